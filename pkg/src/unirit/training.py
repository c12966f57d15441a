"""Training loop, checkpoints, and inference on point-cloud pairs."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geom, metrics
from .model import UniRiTConfig, UniRiTModel
from .nn import AdamState, adam_step
from .synth import load_pairs, subsample_indices

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PreparedPair:
    pair_id: str
    source: np.ndarray  # normalized, model dtype
    target: np.ndarray
    scale: float
    offset: np.ndarray
    src_index: np.ndarray
    tgt_index: np.ndarray


def prepare_pair(source, target, n_points: int, seed: int, pair_id="pair", dtype=np.float32) -> PreparedPair:
    """Subsample to at most ``n_points`` and normalize the pair jointly.

    Equal-size clouds share one index draw so per-index correspondence survives.
    """
    src = geom.as_cloud(source, "source")
    tgt = geom.as_cloud(target, "target")
    if src.shape[0] == tgt.shape[0]:
        n = min(n_points, src.shape[0])
        idx = np.sort(subsample_indices(src.shape[0], n, seed)) if n < src.shape[0] else np.arange(n)
        si = ti = idx
    else:
        n_s = min(n_points, src.shape[0])
        n_t = min(n_points, tgt.shape[0])
        si = np.sort(subsample_indices(src.shape[0], n_s, seed)) if n_s < src.shape[0] else np.arange(n_s)
        ti = np.sort(subsample_indices(tgt.shape[0], n_t, seed + 1)) if n_t < tgt.shape[0] else np.arange(n_t)
    s_n, t_n, scale, offset = geom.normalize(src[si], tgt[ti])
    return PreparedPair(str(pair_id), s_n.astype(dtype), t_n.astype(dtype), scale, offset, si, ti)


@dataclass
class StepResult:
    total: float
    gl: float
    rd: float
    rigid_out: np.ndarray
    aligned: np.ndarray


def train_step(model: UniRiTModel, adam: AdamState, source, target) -> StepResult:
    """Forward both stages, backpropagate the combined loss, and apply one Adam update."""
    trace = model.forward(source, target)
    total, gl, rd, g_hat, g_rd = model.loss_and_grads(trace)
    if not math.isfinite(total):
        raise TrainingDiverged(f"non-finite loss {total}")
    model.zero_grad()
    model.backward(trace, g_hat, g_rd)
    adam_step(model.parameters(), model.gradients(), adam)
    return StepResult(total, gl, rd, trace.rigid_out, trace.aligned)


def save_checkpoint(path, model: UniRiTModel, adam: AdamState | None = None, extra=None) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "stacks": model.state_dict(),
    }
    if adam is not None:
        doc["adam"] = adam.to_dict()
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path) -> tuple[UniRiTModel, AdamState | None]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    config = UniRiTConfig.from_dict(doc["config"])
    model = UniRiTModel.from_state(config, doc["stacks"])
    adam = AdamState.from_dict(doc["adam"]) if "adam" in doc else None
    return model, adam


def prepare_dataset(pairs, config: UniRiTConfig) -> list[PreparedPair]:
    """``pairs`` is an iterable of ``(pair_id, source, target)``."""
    out = []
    for k, (pid, src, tgt) in enumerate(pairs):
        out.append(prepare_pair(src, tgt, config.points_per_cloud, config.seed * 100003 + k,
                                pid, np.dtype(config.dtype)))
    if not out:
        raise ValueError("empty training set")
    return out


def manifest_pairs(manifest_path):
    for rec, src, tgt in load_pairs(manifest_path):
        yield rec["id"], src, tgt


def train(model: UniRiTModel, pairs, config: UniRiTConfig | None = None, out_dir=None,
          progress=None):
    """Train with batch size 1; returns ``(model, history)``.

    ``pairs`` is either a manifest path or an iterable of ``(id, source, target)``.
    The history holds one record per epoch with the mean losses.
    """
    config = config or model.config
    if isinstance(pairs, (str, Path)):
        pairs = manifest_pairs(pairs)
    data = prepare_dataset(pairs, config)
    adam = AdamState(lr=config.lr)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    history = []
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(data))
        sums = np.zeros(3)
        for step, k in enumerate(order):
            pair = data[k]
            try:
                res = train_step(model, adam, pair.source, pair.target)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}, step {step}, pair {pair.pair_id}") from None
            sums += (res.total, res.gl, res.rd)
        mean = sums / len(data)
        history.append({"epoch": epoch, "total": float(mean[0]), "gl": float(mean[1]), "rd": float(mean[2])})
        if progress is not None:
            progress(history[-1])
        log.info("epoch %d total=%.6f gl=%.6f rd=%.6f", epoch, *mean)
        if out_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint_epoch{epoch:04d}.json", model, adam)

    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.json", model, adam)
        (out_dir / "loss_history.json").write_text(json.dumps(history, indent=1) + "\n")
    return model, history


@dataclass
class Registration:
    aligned: np.ndarray
    rigid_out: np.ndarray
    transforms: list
    displacement: np.ndarray
    report: metrics.MetricReport
    seconds: float


def _to_original(xf: geom.RigidTransform, scale, offset) -> geom.RigidTransform:
    R = xf.rotation
    return geom.RigidTransform(R, scale * xf.translation + offset - R @ offset)


def register(model: UniRiTModel, source, target, correspondence: bool | None = None,
             seed: int = 0) -> Registration:
    """Full two-stage inference; metrics and outputs are in the inputs' units.

    Clouds larger than ``points_per_cloud`` are subsampled first (same indices
    for equal-size clouds). ``correspondence`` defaults to "equal sizes".
    """
    t0 = time.perf_counter()
    prep = prepare_pair(source, target, model.config.points_per_cloud, seed, dtype=model.dtype)
    trace = model.forward(prep.source, prep.target)
    seconds = time.perf_counter() - t0

    src = geom.as_cloud(source)[prep.src_index]
    tgt = geom.as_cloud(target)[prep.tgt_index]
    s_n = prep.source.astype(np.float64)
    # outputs are expressed as offsets from the original source so an identity
    # model reproduces it bit for bit
    rigid_out = src + (trace.rigid_out.astype(np.float64) - s_n) * prep.scale
    aligned = src + (trace.aligned.astype(np.float64) - s_n) * prep.scale
    disp = trace.displacement.astype(np.float64) * prep.scale
    xfs = [_to_original(geom.RigidTransform(R.astype(np.float64), t.astype(np.float64)),
                        prep.scale, prep.offset)
           for R, t in zip(trace.rotations, trace.translations)]
    if correspondence is None:
        correspondence = src.shape[0] == tgt.shape[0]
    rep = metrics.report(aligned, src, tgt, correspondence)
    return Registration(geom.as_cloud(aligned), geom.as_cloud(rigid_out), xfs, disp, rep, seconds)


def evaluate(model: UniRiTModel, manifest_path, workers: int = 1) -> list[dict]:
    """Register every manifest pair; returns per-pair JSON-ready records."""
    from concurrent.futures import ThreadPoolExecutor

    items = list(load_pairs(manifest_path))

    def one(item):
        rec, src, tgt = item
        reg = register(model, src, tgt,
                       correspondence=bool(rec.get("has_correspondence", True)))
        out = reg.report.to_record(rec["id"])
        out["family"] = rec.get("family", "unknown")
        out["inference_ms"] = reg.seconds * 1e3
        return out

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, items))
    return [one(it) for it in items]
