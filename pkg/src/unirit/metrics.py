"""Registration losses and evaluation metrics.

The two training losses are one-directional nearest-neighbour RMS distances
(aligned cloud -> target). Their gradients are returned alongside the value so
the network can backpropagate through them without an autodiff engine.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .geom import as_cloud


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class MetricReport:
    """Pre/post registration errors; ``rmse`` fields are ``None`` without correspondence."""

    rmse: float | None
    cd: float
    pre_rmse: float | None
    pre_cd: float | None = None

    def __post_init__(self):
        for name in ("rmse", "cd", "pre_rmse", "pre_cd"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    def to_record(self, pair_id) -> dict:
        return {"pair_id": pair_id, **asdict(self)}


def nearest_neighbors(query, ref) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force nearest neighbour of every query point in ``ref``.

    Returns ``(indices, squared_distances)``. Ties resolve to the lowest index
    (``argmin`` returns the first minimum).
    """
    q = np.asarray(query)
    r = np.asarray(ref)
    if q.shape[0] == 0 or r.shape[0] == 0:
        raise ValueError("nearest neighbour search needs non-empty clouds")
    diff = q[:, None, :] - r[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    idx = np.argmin(d2, axis=1)
    return idx, d2[np.arange(q.shape[0]), idx]


def rmse_corresponded(a, b) -> float:
    a = as_cloud(a, "a")
    b = as_cloud(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"point count mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def chamfer(a, b) -> float:
    a = as_cloud(a, "a")
    b = as_cloud(b, "b")
    _, d_ab = nearest_neighbors(a, b)
    _, d_ba = nearest_neighbors(b, a)
    return float(d_ab.mean() + d_ba.mean())


def nn_rms_with_grad(aligned, target) -> tuple[float, np.ndarray]:
    """One-sided nearest-neighbour RMS distance and its gradient w.r.t. ``aligned``.

    The gradient is a subgradient at nearest-neighbour ties (the lowest-index
    target point is used) and is defined as zero when the loss is zero.
    """
    x = np.asarray(aligned)
    y = np.asarray(target)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("loss needs non-empty (N, 3) clouds")
    idx, d2 = nearest_neighbors(x, y)
    loss = math.sqrt(float(np.mean(d2)))
    if loss == 0.0:
        return 0.0, np.zeros_like(x)
    grad = (x - y[idx]) / (x.shape[0] * loss)
    return loss, grad


def loss_global(aligned, target) -> float:
    return nn_rms_with_grad(as_cloud(aligned, "aligned"), as_cloud(target, "target"))[0]


def loss_rigid(rigid_out, target) -> float:
    return nn_rms_with_grad(as_cloud(rigid_out, "rigid_out"), as_cloud(target, "target"))[0]


def loss_total(gl: float, rd: float, w: LossWeights = LossWeights()) -> float:
    if gl < 0 or rd < 0:
        raise ValueError("losses must be non-negative")
    return w.alpha * gl + (1.0 - w.alpha) * rd


def report(aligned, source, target, correspondence: bool = True) -> MetricReport:
    if correspondence:
        return MetricReport(
            rmse=rmse_corresponded(aligned, target),
            cd=chamfer(aligned, target),
            pre_rmse=rmse_corresponded(source, target),
            pre_cd=chamfer(source, target),
        )
    return MetricReport(rmse=None, cd=chamfer(aligned, target), pre_rmse=None,
                        pre_cd=chamfer(source, target))
