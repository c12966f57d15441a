"""The two-stage registration network.

Stage one repeatedly predicts a rigid transform from pooled features of the
current source and the target. Stage two predicts a per-point displacement from
the pooled features of both clouds, replicated per point and concatenated with
the point coordinates of the rigidly aligned source and of the target.

All forward/backward passes are written by hand on top of :mod:`unirit.nn`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import nn
from .geom import RigidTransform
from .metrics import LossWeights, nn_rms_with_grad

E1 = np.array([1.0, 0.0, 0.0])
E2 = np.array([0.0, 1.0, 0.0])


@dataclass
class UniRiTConfig:
    n_iters: int = 3
    alpha: float = 0.5
    encoder_widths: list = field(default_factory=lambda: [3, 64, 128, 256])
    rigid_decoder_widths: list = field(default_factory=lambda: [512, 256, 64, 9])
    deform_decoder_widths: list = field(default_factory=lambda: [518, 256, 128, 3])
    rotation_param: str = "six_d"
    ablate_rigid: bool = False
    points_per_cloud: int = 1024
    lr: float = 1e-4
    epochs: int = 300
    seed: int = 0
    pooling: str = "max"
    share_rigid_iters: bool = True
    zero_init_last: bool = True
    dtype: str = "float32"
    checkpoint_every: int = 100

    def __post_init__(self):
        LossWeights(self.alpha)
        if self.rotation_param not in ("six_d", "axis_angle"):
            raise ValueError("rotation_param must be 'six_d' or 'axis_angle'")
        if self.pooling not in ("max", "mean"):
            raise ValueError("pooling must be 'max' or 'mean'")
        if self.n_iters < 1 and not self.ablate_rigid:
            raise ValueError("n_iters must be >= 1 unless the rigid stage is ablated")
        enc = list(self.encoder_widths)
        if enc[0] != 3:
            raise ValueError("encoders take 3-D points")
        feat = 2 * enc[-1]
        rot_out = 6 if self.rotation_param == "six_d" else 3
        if self.rigid_decoder_widths[0] != feat or self.rigid_decoder_widths[-1] != rot_out + 3:
            raise ValueError(f"rigid decoder must map {feat} -> {rot_out + 3}")
        if self.deform_decoder_widths[0] != feat + 6 or self.deform_decoder_widths[-1] != 3:
            raise ValueError(f"deform decoder must map {feat + 6} -> 3")
        if self.points_per_cloud < 1 or self.epochs < 0:
            raise ValueError("points_per_cloud must be positive and epochs non-negative")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(1.0 if self.ablate_rigid else self.alpha)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "UniRiTConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# rotation parameterisations

def six_d_to_rotation(raw):
    """Gram-Schmidt of two 3-vectors offset by (1,0,0), (0,1,0); zero maps to identity.

    Returns ``(R, cache)`` where the columns of ``R`` are the orthonormal frame.
    """
    raw = np.asarray(raw)
    a1 = raw[:3] + E1.astype(raw.dtype)
    a2 = raw[3:6] + E2.astype(raw.dtype)
    n1 = max(np.linalg.norm(a1), 1e-12)
    b1 = a1 / n1
    u = a2 - (b1 @ a2) * b1
    nu = max(np.linalg.norm(u), 1e-12)
    b2 = u / nu
    b3 = np.cross(b1, b2)
    R = np.stack([b1, b2, b3], axis=1)
    return R, (a2, n1, b1, nu, b2)


def six_d_backward(dR, cache):
    a2, n1, b1, nu, b2 = cache
    db1 = dR[:, 0] + np.cross(b2, dR[:, 2])
    db2 = dR[:, 1] + np.cross(dR[:, 2], b1)
    du = (db2 - b2 * (b2 @ db2)) / nu
    proj = b1 @ a2
    da2 = du - b1 * (b1 @ du)
    db1 = db1 - (proj * du + a2 * (b1 @ du))
    da1 = (db1 - b1 * (b1 @ db1)) / n1
    return np.concatenate([da1, da2])


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def axis_angle_to_rotation(raw):
    v = np.asarray(raw, dtype=np.float64)[:3]
    theta = np.linalg.norm(v)
    K = _skew(v)
    if theta < 1e-12:
        R = np.eye(3) + K
    else:
        R = np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * (K @ K)
    return R.astype(np.asarray(raw).dtype), (v, R)


def axis_angle_backward(dR, cache):
    v, R = cache
    theta2 = float(v @ v)
    out = np.zeros(3)
    eye = np.eye(3)
    for i in range(3):
        if theta2 < 1e-24:
            dRi = _skew(eye[i])
        else:
            dRi = (v[i] * _skew(v) + _skew(np.cross(v, (eye - R) @ eye[i]))) / theta2 @ R
        out[i] = np.sum(dR * dRi)
    return out


ROTATIONS = {
    "six_d": (6, six_d_to_rotation, six_d_backward),
    "axis_angle": (3, axis_angle_to_rotation, axis_angle_backward),
}


# --------------------------------------------------------------------------
# model

def _pool(features, mode):
    if mode == "max":
        return nn.pool_max(features)
    return nn.pool_mean(features)


def _pool_backward(grad, cache, n_rows, mode):
    if mode == "max":
        return nn.pool_max_backward(grad, cache, n_rows)
    return nn.pool_mean_backward(grad, n_rows)


@dataclass
class RigidBlock:
    enc_src: nn.MlpStack
    enc_tgt: nn.MlpStack
    decoder: nn.MlpStack


@dataclass
class ForwardTrace:
    """Everything the backward pass needs, plus the stage outputs."""

    source: np.ndarray
    target: np.ndarray
    rigid_out: np.ndarray
    aligned: np.ndarray
    displacement: np.ndarray
    rotations: list
    translations: list
    steps: list = field(default_factory=list)
    tgt_feats: dict = field(default_factory=dict)
    stage2: tuple | None = None


class UniRiTModel:
    def __init__(self, config: UniRiTConfig | None = None):
        self.config = config or UniRiTConfig()
        cfg = self.config
        dt = np.dtype(cfg.dtype)
        enc_act = ["leaky_relu"] * (len(cfg.encoder_widths) - 1)
        seed = cfg.seed * 1000

        def enc(k):
            return nn.MlpStack(cfg.encoder_widths, enc_act, seed=seed + k, dtype=dt)

        n_blocks = 1 if cfg.share_rigid_iters else max(cfg.n_iters, 1)
        self.rigid_blocks = [
            RigidBlock(enc(10 * b + 1), enc(10 * b + 2),
                       nn.MlpStack(cfg.rigid_decoder_widths, None, seed=seed + 10 * b + 3,
                                   dtype=dt, zero_last=cfg.zero_init_last))
            for b in range(n_blocks)
        ]
        self.enc_src2 = enc(901)
        self.enc_tgt2 = enc(902)
        self.deform_decoder = nn.MlpStack(cfg.deform_decoder_widths, None, seed=seed + 903,
                                          dtype=dt, zero_last=cfg.zero_init_last)

    # -- bookkeeping --------------------------------------------------------
    def stacks(self) -> dict:
        out = {}
        for b, blk in enumerate(self.rigid_blocks):
            out[f"rigid{b}.enc_src"] = blk.enc_src
            out[f"rigid{b}.enc_tgt"] = blk.enc_tgt
            out[f"rigid{b}.decoder"] = blk.decoder
        out["nonrigid.enc_src"] = self.enc_src2
        out["nonrigid.enc_tgt"] = self.enc_tgt2
        out["nonrigid.decoder"] = self.deform_decoder
        return out

    def parameters(self) -> list:
        return [p for s in self.stacks().values() for p in s.parameters()]

    def gradients(self) -> list:
        return [g for s in self.stacks().values() for g in s.gradients()]

    def zero_grad(self):
        for s in self.stacks().values():
            s.zero_grad()

    def astype(self, dtype) -> "UniRiTModel":
        clone = UniRiTModel.__new__(UniRiTModel)
        clone.config = UniRiTConfig.from_dict({**self.config.to_dict(), "dtype": np.dtype(dtype).name})
        clone.rigid_blocks = [RigidBlock(b.enc_src.astype(dtype), b.enc_tgt.astype(dtype),
                                         b.decoder.astype(dtype)) for b in self.rigid_blocks]
        clone.enc_src2 = self.enc_src2.astype(dtype)
        clone.enc_tgt2 = self.enc_tgt2.astype(dtype)
        clone.deform_decoder = self.deform_decoder.astype(dtype)
        return clone

    def state_dict(self) -> dict:
        return {name: s.to_dict() for name, s in self.stacks().items()}

    @classmethod
    def from_state(cls, config: UniRiTConfig, state: dict) -> "UniRiTModel":
        model = cls(config)
        expected = set(model.stacks())
        if set(state) != expected:
            raise ValueError(f"checkpoint stacks {sorted(state)} do not match config {sorted(expected)}")
        for b, blk in enumerate(model.rigid_blocks):
            blk.enc_src = nn.MlpStack.from_dict(state[f"rigid{b}.enc_src"])
            blk.enc_tgt = nn.MlpStack.from_dict(state[f"rigid{b}.enc_tgt"])
            blk.decoder = nn.MlpStack.from_dict(state[f"rigid{b}.decoder"])
        model.enc_src2 = nn.MlpStack.from_dict(state["nonrigid.enc_src"])
        model.enc_tgt2 = nn.MlpStack.from_dict(state["nonrigid.enc_tgt"])
        model.deform_decoder = nn.MlpStack.from_dict(state["nonrigid.decoder"])
        for name, s in model.stacks().items():
            if s.widths != list(_expected_widths(config, name)):
                raise ValueError(f"stack {name} widths {s.widths} disagree with config")
        return model

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def _block(self, i) -> RigidBlock:
        return self.rigid_blocks[0 if self.config.share_rigid_iters else i]

    # -- forward ------------------------------------------------------------
    def _check_inputs(self, source, target):
        src = np.asarray(source, dtype=self.dtype)
        tgt = np.asarray(target, dtype=self.dtype)
        for name, a in (("source", src), ("target", tgt)):
            if a.ndim != 2 or a.shape[1] != 3 or a.shape[0] == 0:
                raise ValueError(f"{name} must be a non-empty (N, 3) array, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} has non-finite coordinates")
        return src, tgt

    def _target_features(self, block_idx, tgt, trace):
        if block_idx not in trace.tgt_feats:
            blk = self.rigid_blocks[block_idx]
            f, cache = blk.enc_tgt.forward(tgt)
            pooled, pcache = _pool(f, self.config.pooling)
            trace.tgt_feats[block_idx] = [pooled, cache, pcache, f.shape[0], np.zeros_like(pooled)]
        return trace.tgt_feats[block_idx]

    def _rigid_step(self, i, x, tgt, trace):
        cfg = self.config
        b = 0 if cfg.share_rigid_iters else i
        blk = self.rigid_blocks[b]
        py = self._target_features(b, tgt, trace)[0]
        fx, cx = blk.enc_src.forward(x)
        px, pcx = _pool(fx, cfg.pooling)
        raw, cd = blk.decoder.forward(np.concatenate([px, py], axis=1))
        n_rot, to_rot, _ = ROTATIONS[cfg.rotation_param]
        R, rcache = to_rot(raw[0, :n_rot])
        t = raw[0, n_rot:n_rot + 3]
        x_next = x @ R.T + t
        trace.steps.append((b, x, cx, pcx, fx.shape[0], cd, R, rcache))
        return R, t, x_next

    def forward(self, source, target) -> ForwardTrace:
        """Run both stages on normalized clouds; the returned trace feeds ``backward``."""
        cfg = self.config
        src, tgt = self._check_inputs(source, target)
        trace = ForwardTrace(src, tgt, src, src, np.zeros_like(src), [], [])
        x = src
        if not cfg.ablate_rigid:
            for i in range(cfg.n_iters):
                R, t, x = self._rigid_step(i, x, tgt, trace)
                trace.rotations.append(R)
                trace.translations.append(t)
        trace.rigid_out = x

        fx, cx = self.enc_src2.forward(x)
        px, pcx = _pool(fx, cfg.pooling)
        fy, cy = self.enc_tgt2.forward(tgt)
        py, pcy = _pool(fy, cfg.pooling)
        tgt_rows = _rows_for(tgt, x.shape[0])
        n = x.shape[0]
        glob = np.concatenate([x, np.repeat(np.concatenate([px, py], axis=1), n, axis=0), tgt_rows], axis=1)
        disp, cd = self.deform_decoder.forward(glob)
        trace.displacement = disp
        trace.aligned = x + disp
        trace.stage2 = (cx, pcx, fx.shape[0], cy, pcy, fy.shape[0], cd, px.shape[1])
        return trace

    def rigid_step(self, source, target) -> RigidTransform:
        """One rigid prediction for ``source`` against ``target`` (first iteration's weights)."""
        src, tgt = self._check_inputs(source, target)
        trace = ForwardTrace(src, tgt, src, src, np.zeros_like(src), [], [])
        R, t, _ = self._rigid_step(0, src, tgt, trace)
        return RigidTransform(R.astype(np.float64), t.astype(np.float64))

    def rigid_stage(self, source, target):
        """Return ``(P'_S, transforms)`` after ``n_iters`` rigid refinements."""
        trace = self.forward(source, target)
        xfs = [RigidTransform(R.astype(np.float64), t.astype(np.float64))
               for R, t in zip(trace.rotations, trace.translations)]
        return trace.rigid_out, xfs

    def nonrigid_stage(self, rigid_out, target):
        """Return ``(displacements, P_hat)`` for an already rigidly aligned source."""
        x, tgt = self._check_inputs(rigid_out, target)
        cfg = self.config
        fx, _ = self.enc_src2.forward(x)
        px, _ = _pool(fx, cfg.pooling)
        fy, _ = self.enc_tgt2.forward(tgt)
        py, _ = _pool(fy, cfg.pooling)
        n = x.shape[0]
        glob = np.concatenate([x, np.repeat(np.concatenate([px, py], axis=1), n, axis=0),
                               _rows_for(tgt, n)], axis=1)
        disp = self.deform_decoder(glob)
        return disp, x + disp

    # -- backward -----------------------------------------------------------
    def backward(self, trace: ForwardTrace, grad_aligned, grad_rigid_out=None):
        """Accumulate parameter gradients given dL/dP_hat and (optionally) dL/dP'_S.

        Returns dL/d(source).
        """
        cfg = self.config
        dt = self.dtype
        g_hat = np.asarray(grad_aligned, dtype=dt)
        g_x = g_hat.copy()
        if grad_rigid_out is not None:
            g_x += np.asarray(grad_rigid_out, dtype=dt)

        cx, pcx, nx, cy, pcy, ny, cd, width = trace.stage2
        # project only the input columns that carry gradient: the source
        # coordinates and the (row-summed) replicated pooled features
        g_pre = self.deform_decoder.backward(g_hat, cd, input_grad=False)
        w0 = self.deform_decoder.weights[0]
        g_x += g_pre @ w0[:3].T
        g_feat = g_pre.sum(axis=0, keepdims=True) @ w0[3:3 + 2 * width].T
        g_x += self.enc_src2.backward(_pool_backward(g_feat[:, :width], pcx, nx, cfg.pooling), cx)
        self.enc_tgt2.backward(_pool_backward(g_feat[:, width:], pcy, ny, cfg.pooling), cy,
                               input_grad=False)

        n_rot, _, rot_back = ROTATIONS[cfg.rotation_param]
        for b, x_prev, cx, pcx, nx, cd, R, rcache in reversed(trace.steps):
            blk = self.rigid_blocks[b]
            dR = g_x.T.astype(np.float64) @ x_prev.astype(np.float64)
            dt_vec = g_x.sum(axis=0)
            g_prev = g_x @ R
            g_raw = np.zeros((1, n_rot + 3), dtype=dt)
            g_raw[0, :n_rot] = rot_back(dR, rcache)
            g_raw[0, n_rot:] = dt_vec
            g_feat = blk.decoder.backward(g_raw, cd)
            width = g_feat.shape[1] // 2
            g_prev = g_prev + blk.enc_src.backward(_pool_backward(g_feat[:, :width], pcx, nx, cfg.pooling), cx)
            trace.tgt_feats[b][4] += g_feat[:, width:]
            g_x = g_prev
        for b, (_, cache, pcache, n_rows, g_pooled) in trace.tgt_feats.items():
            self.rigid_blocks[b].enc_tgt.backward(
                _pool_backward(g_pooled, pcache, n_rows, cfg.pooling), cache, input_grad=False)
        return g_x

    # -- loss -----------------------------------------------------------------
    def loss_and_grads(self, trace: ForwardTrace):
        """Return ``(total, gl, rd, grad_aligned, grad_rigid_out)`` for a forward trace."""
        w = self.config.weights
        tgt = trace.target.astype(np.float64)
        gl, g_gl = nn_rms_with_grad(trace.aligned.astype(np.float64), tgt)
        if self.config.ablate_rigid:
            rd, g_rd = 0.0, np.zeros_like(g_gl)
        else:
            rd, g_rd = nn_rms_with_grad(trace.rigid_out.astype(np.float64), tgt)
        total = w.alpha * gl + (1.0 - w.alpha) * rd
        return total, gl, rd, w.alpha * g_gl, (1.0 - w.alpha) * g_rd


def _rows_for(target, n):
    """Target coordinates paired row-by-row with ``n`` source points.

    Equal sizes keep index correspondence; otherwise rows are taken at evenly
    spaced indices (deterministic, no RNG).
    """
    if target.shape[0] == n:
        return target
    idx = np.floor(np.arange(n) * target.shape[0] / n).astype(int)
    return target[idx]


def _expected_widths(config: UniRiTConfig, name: str):
    if name.endswith("enc_src") or name.endswith("enc_tgt"):
        return config.encoder_widths
    if name.startswith("rigid"):
        return config.rigid_decoder_widths
    return config.deform_decoder_widths
