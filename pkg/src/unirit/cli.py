"""Command-line entry point: ``unirit {synth,train,register,eval,analyze-gmm}``.

Numeric output goes to files under ``--out``; stdout gets a short summary.
Exit codes: 0 success, 1 invalid usage or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import geom, gmm, synth, training
from .model import UniRiTConfig, UniRiTModel

log = logging.getLogger("unirit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# configuration with provenance

SYNTH_DEFAULTS = {
    "family": "sphere", "count": 4, "n_points": 1024, "deform_mm": 15.0, "case": "A",
    "rotation_range_deg": [-45.0, 45.0], "translation_range": [-0.2, 0.2],
    "noise_sigma": 0.0, "dropout_fraction": 0.0, "seed": 0, "size": 200.0, "n_control": 8,
}
GMM_DEFAULTS = {
    "families": ["sphere", "ellipsoid"], "samples": 12, "picks": 12, "repetitions": 4,
    "K": 16, "n_points": 1024, "samples_per_pair": 1024, "seed": 0,
}
MODEL_DEFAULTS = UniRiTConfig().to_dict()
KNOWN_KEYS = set(SYNTH_DEFAULTS) | set(GMM_DEFAULTS) | set(MODEL_DEFAULTS) | {
    "manifest", "checkpoint", "source", "target", "out", "collections",
}


def resolve_config(defaults: dict, config_path, flags: dict) -> dict:
    """Merge defaults < config file < explicit flags, tagging each value's origin."""
    file_values = {}
    if config_path:
        try:
            file_values = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(file_values, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(file_values) - KNOWN_KEYS
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    for key, value in defaults.items():
        resolved[key] = {"value": value, "source": "default"}
        if key in file_values:
            resolved[key] = {"value": file_values[key], "source": "config-file"}
        if flags.get(key) is not None:
            resolved[key] = {"value": flags[key], "source": "flag"}
    for key, value in flags.items():
        if key not in resolved and value is not None:
            resolved[key] = {"value": value, "source": "flag"}
    return resolved


def values(resolved: dict) -> dict:
    return {k: v["value"] for k, v in resolved.items()}


def write_resolved(out_dir: Path, command: str, resolved: dict) -> None:
    doc = {"command": command, "fields": resolved}
    (out_dir / "resolved_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _interval(vals, name):
    if vals is None:
        return None
    if len(vals) == 1:
        return [-abs(vals[0]), abs(vals[0])]
    if len(vals) == 2:
        return [vals[0], vals[1]]
    raise UsageError(f"{name} takes one (symmetric) or two values")


def _threads() -> int:
    env = os.environ.get("UNIRIT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"UNIRIT_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


# --------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    flags = {
        "family": args.family, "count": args.count, "n_points": args.points,
        "deform_mm": args.deform, "case": args.case,
        "rotation_range_deg": _interval(args.rot_deg, "--rot-deg"),
        "translation_range": _interval(args.trans, "--trans"),
        "noise_sigma": args.noise, "dropout_fraction": args.dropout, "seed": args.seed,
        "size": args.size, "n_control": args.control,
    }
    resolved = resolve_config(SYNTH_DEFAULTS, args.config, flags)
    cfg = values(resolved)
    families = [f.strip() for f in str(cfg["family"]).split(",") if f.strip()]
    if int(cfg["count"]) < 1:
        raise UsageError("--count must be >= 1")
    pairs = []
    for i in range(int(cfg["count"])):
        spec = synth.PairSpec(
            shape_family=families[i % len(families)], n_points=int(cfg["n_points"]),
            deform_mm=float(cfg["deform_mm"]), case=cfg["case"],
            rotation_range_deg=tuple(cfg["rotation_range_deg"]),
            translation_range=tuple(cfg["translation_range"]),
            noise_sigma=float(cfg["noise_sigma"]), dropout_fraction=float(cfg["dropout_fraction"]),
            seed=pair_seed(int(cfg["seed"]), i), size=float(cfg["size"]),
            n_control=int(cfg["n_control"]),
        )
        pairs.append(synth.make_pair(spec))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = synth.write_dataset(pairs, out / "manifest.json", out)
    write_resolved(out, "synth", resolved)
    print(f"wrote {len(records)} pairs to {out / 'manifest.json'}")
    return 0


def pair_seed(seed: int, index: int) -> int:
    return int(np.random.default_rng([seed, index]).integers(2**31))


def _model_flags(args) -> dict:
    return {
        "seed": args.seed, "ablate_rigid": True if args.ablate_rigid else None,
        "epochs": args.epochs, "points_per_cloud": args.points, "lr": args.lr,
        "alpha": args.alpha, "n_iters": args.n_iters,
    }


def cmd_train(args) -> int:
    resolved = resolve_config(MODEL_DEFAULTS, args.config, _model_flags(args))
    resolved["manifest"] = {"value": args.manifest, "source": "flag"}
    try:
        config = UniRiTConfig.from_dict({k: v for k, v in values(resolved).items() if k in MODEL_DEFAULTS})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    records = synth.read_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(out, "train", resolved)
    model = UniRiTModel(config)
    _, history = training.train(model, args.manifest, config, out_dir=out)
    if history:
        print(f"trained on {len(records)} pairs for {config.epochs} epochs; "
              f"final loss {history[-1]['total']:.6g}")
    else:
        print(f"saved untrained model for {len(records)} pairs (0 epochs)")
    print(f"checkpoint: {out / 'checkpoint.json'}")
    return 0


def _load_model(path):
    try:
        model, _ = training.load_checkpoint(path)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from exc
    return model


def cmd_register(args) -> int:
    model = _load_model(args.checkpoint)
    source = geom.read_cloud(args.source)
    target = geom.read_cloud(args.target)
    reg = training.register(model, source, target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    geom.write_cloud(out / "aligned.xyz", reg.aligned)
    geom.write_cloud(out / "rigid_out.xyz", reg.rigid_out)
    doc = {
        "report": reg.report.to_record(Path(args.source).stem),
        "transforms": [{"rotation": xf.rotation.tolist(), "translation": xf.translation.tolist()}
                       for xf in reg.transforms],
        "composed": _composed(reg.transforms),
    }
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (out / "timing.json").write_text(json.dumps({"inference_ms": reg.seconds * 1e3}) + "\n")
    write_resolved(out, "register", {
        "checkpoint": {"value": args.checkpoint, "source": "flag"},
        "source": {"value": args.source, "source": "flag"},
        "target": {"value": args.target, "source": "flag"},
    })
    r = reg.report
    print(f"pre-RMSE {r.pre_rmse} -> RMSE {r.rmse}; CD {r.cd:.6g}; {reg.seconds * 1e3:.1f} ms")
    return 0


def _composed(transforms):
    xf = geom.compose_all(transforms)
    return {"rotation": xf.rotation.tolist(), "translation": xf.translation.tolist(),
            "angle_deg": geom.rotation_angle_deg(xf.rotation)}


def report_aggregate(records) -> tuple[list[dict], dict]:
    """Per-family mean/median RMSE and CD, plus an ``overall`` row."""
    if not records:
        raise ValueError("no records to aggregate")

    def stats(group, label):
        def col(name):
            v = [r[name] for r in group if r.get(name) is not None]
            return np.array(v, dtype=np.float64)

        row = {"family": label, "n": len(group)}
        for name in ("rmse", "pre_rmse", "cd"):
            v = col(name)
            row[f"mean_{name}"] = float(v.mean()) if v.size else None
            row[f"median_{name}"] = float(np.median(v)) if v.size else None
        return row

    families = sorted({r.get("family", "unknown") for r in records})
    rows = [stats([r for r in records if r.get("family", "unknown") == f], f) for f in families]
    rows.append(stats(list(records), "overall"))
    return rows, {"rows": rows}


def write_aggregate_csv(path, rows) -> None:
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                        for c in cols])


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    records = training.evaluate(model, args.manifest, workers=_threads())
    rows, summary = report_aggregate(records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timing = {r["pair_id"]: r.pop("inference_ms") for r in records}
    (out / "records.json").write_text(json.dumps(records, indent=2, sort_keys=True) + "\n")
    (out / "aggregate.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_aggregate_csv(out / "aggregate.csv", rows)
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    write_resolved(out, "eval", {
        "checkpoint": {"value": args.checkpoint, "source": "flag"},
        "manifest": {"value": args.manifest, "source": "flag"},
    })
    overall = rows[-1]
    print(f"evaluated {overall['n']} pairs: mean pre-RMSE {overall['mean_pre_rmse']} -> "
          f"mean RMSE {overall['mean_rmse']}; mean CD {overall['mean_cd']}")
    return 0


def synthetic_collections(families, samples, n_points, seed) -> dict:
    out = {}
    for f_idx, fam in enumerate(families):
        rng = np.random.default_rng([seed, f_idx])
        out[fam] = [synth.base_shape(fam, n_points, rng) for _ in range(samples)]
    return out


def _read_collection(spec: str):
    if "=" not in spec:
        raise UsageError(f"--collection expects LABEL=DIR, got {spec!r}")
    label, directory = spec.split("=", 1)
    files = sorted(Path(directory).glob("*.xyz")) + sorted(Path(directory).glob("*.txt"))
    if not files:
        raise UsageError(f"no .xyz/.txt clouds in {directory}")
    return label, [geom.read_cloud(f) for f in files]


def cmd_analyze_gmm(args) -> int:
    flags = {
        "families": args.family, "samples": args.samples, "picks": args.picks,
        "repetitions": args.reps, "K": args.k, "n_points": args.points,
        "samples_per_pair": args.samples_per_pair, "seed": args.seed,
    }
    resolved = resolve_config(GMM_DEFAULTS, args.config, flags)
    cfg = values(resolved)
    if args.collection:
        collections = dict(_read_collection(c) for c in args.collection)
        resolved["collections"] = {"value": args.collection, "source": "flag"}
    else:
        collections = synthetic_collections(cfg["families"], int(cfg["samples"]),
                                            int(cfg["n_points"]), int(cfg["seed"]))
    labels, mat = gmm.divergence_matrix(
        collections, K=int(cfg["K"]), samples_per_pair=int(cfg["samples_per_pair"]),
        seed=int(cfg["seed"]), picks=int(cfg["picks"]), repetitions=int(cfg["repetitions"]),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gmm.write_matrix_csv(out / "divergence.csv", labels, mat)
    write_resolved(out, "analyze-gmm", resolved)
    width = max(len(lab) for lab in labels)
    print(" " * width + "".join(f"{lab:>12}" for lab in labels))
    for lab, row in zip(labels, mat):
        print(f"{lab:<{width}}" + "".join(f"{v:12.4f}" for v in row))
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="unirit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic pair dataset")
    s.add_argument("--family", help="shape family, or comma-separated families to cycle")
    s.add_argument("--count", type=int)
    s.add_argument("--points", type=int, help="points per cloud (default 1024)")
    s.add_argument("--deform", type=float, help="mean displacement magnitude")
    s.add_argument("--case", choices=["A", "B"])
    s.add_argument("--rot-deg", type=float, nargs="+", metavar="DEG")
    s.add_argument("--trans", type=float, nargs="+", metavar="T")
    s.add_argument("--noise", type=float)
    s.add_argument("--dropout", type=float)
    s.add_argument("--size", type=float, help="shape extent (default 200)")
    s.add_argument("--control", type=int, help="TPS control points (default 8)")
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--ablate-rigid", action="store_true")
    t.add_argument("--epochs", type=int)
    t.add_argument("--points", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--n-iters", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="register one source/target pair")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--source", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("analyze-gmm", help="GMM divergence matrix between shape collections")
    g.add_argument("--family", action="append", help="synthetic family label (repeatable)")
    g.add_argument("--collection", action="append", metavar="LABEL=DIR",
                   help="directory of clouds for one label (repeatable)")
    g.add_argument("--samples", type=int, help="clouds generated per synthetic family")
    g.add_argument("--picks", type=int)
    g.add_argument("--reps", type=int)
    g.add_argument("--k", type=int)
    g.add_argument("--points", type=int)
    g.add_argument("--samples-per-pair", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_analyze_gmm)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, FileNotFoundError) as exc:
        print(f"unirit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        print(f"unirit {args.command}: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
