"""Synthetic registration pairs: base shapes, thin-plate-spline warps, rigid
perturbations, noise, dropout, and the on-disk dataset layout."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geom import as_cloud, read_cloud, rotation_about_axis, write_cloud

FAMILIES = ("sphere", "ellipsoid", "blob", "torus", "from_file")
MAX_CONDITION = 1e12


# --------------------------------------------------------------------------
# thin-plate splines

@dataclass(frozen=True)
class TpsWarp:
    control_points: np.ndarray
    target_offsets: np.ndarray
    affine: np.ndarray  # 3x4, [linear | translation]
    kernel_weights: np.ndarray  # M x 3
    lam: float = 0.0

    def __call__(self, points) -> np.ndarray:
        return tps_apply(self, points)


def _kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # U(r) = r, the 3-D biharmonic kernel
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def tps_fit(control, offsets, lam: float = 0.0) -> TpsWarp:
    """Solve for the spline sending ``control[i]`` to ``control[i] + offsets[i]``."""
    c = as_cloud(control, "control points")
    off = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
    m = c.shape[0]
    if m < 4:
        raise ValueError("TPS needs at least 4 control points")
    if off.shape[0] != m:
        raise ValueError("one offset per control point required")
    if lam < 0:
        raise ValueError("lambda must be non-negative")

    P = np.hstack([np.ones((m, 1)), c])
    A = np.zeros((m + 4, m + 4))
    A[:m, :m] = _kernel(c, c) + lam * np.eye(m)
    A[:m, m:] = P
    A[m:, :m] = P.T
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise np.linalg.LinAlgError(
            f"TPS system is ill-conditioned (cond={cond:.3g}); control points may be coplanar"
        )
    rhs = np.zeros((m + 4, 3))
    rhs[:m] = c + off
    sol = np.linalg.solve(A, rhs)
    w, b = sol[:m], sol[m:]
    affine = np.hstack([b[1:].T, b[0][:, None]])
    return TpsWarp(c, off, affine, w, float(lam))


def tps_apply(warp: TpsWarp, cloud) -> np.ndarray:
    x = as_cloud(cloud)
    out = x @ warp.affine[:, :3].T + warp.affine[:, 3]
    out = out + _kernel(x, warp.control_points) @ warp.kernel_weights
    return as_cloud(out)


def farthest_point_sampling(cloud, m: int, rng: np.random.Generator) -> np.ndarray:
    x = as_cloud(cloud)
    if m > x.shape[0]:
        raise ValueError("cannot pick more control points than the cloud has")
    idx = [int(rng.integers(x.shape[0]))]
    d2 = np.sum((x - x[idx[0]]) ** 2, axis=1)
    for _ in range(1, m):
        nxt = int(np.argmax(d2))
        idx.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    return x[idx]


# --------------------------------------------------------------------------
# base shapes (unit scale: roughly max |coordinate| = 1)

def _sphere_dirs(n, rng):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def base_shape(family: str, n: int, rng: np.random.Generator, variation: float = 0.1) -> np.ndarray:
    """Sample ``n`` surface points of a randomly perturbed shape of ``family``."""
    if family == "sphere":
        axes = 1.0 + variation * rng.uniform(-1, 1, 3) * 0.5
        return _sphere_dirs(n, rng) * axes
    if family == "ellipsoid":
        axes = np.array([1.0, 0.55, 0.35]) * (1.0 + variation * rng.uniform(-1, 1, 3))
        return _sphere_dirs(n, rng) * axes
    if family == "blob":
        u = _sphere_dirs(n, rng)
        # low-order radial perturbation: random polynomial of degree <= 3 in the direction
        ux, uy, uz = u.T
        basis = np.stack([ux, uy, uz, ux * uy, uy * uz, ux * uz, ux**2 - uy**2,
                          3 * uz**2 - 1, ux**3, uy**3, uz**3, ux * uy * uz], axis=1)
        coef = rng.normal(0.0, 0.12 + variation, basis.shape[1])
        r = 1.0 + 0.5 * np.tanh(basis @ coef)
        return u * r[:, None] / (1.0 + 0.5)
    if family == "torus":
        big = 0.7 * (1.0 + variation * rng.uniform(-1, 1) * 0.5)
        small = 0.3
        pts = []
        while sum(len(p) for p in pts) < n:
            theta = rng.uniform(0, 2 * np.pi, n)
            phi = rng.uniform(0, 2 * np.pi, n)
            # rejection keeps the area density uniform
            keep = rng.uniform(0, 1, n) < (big + small * np.cos(phi)) / (big + small)
            theta, phi = theta[keep], phi[keep]
            ring = big + small * np.cos(phi)
            pts.append(np.stack([ring * np.cos(theta), ring * np.sin(theta), small * np.sin(phi)], axis=1))
        return np.concatenate(pts)[:n]
    raise ValueError(f"unknown shape family {family!r}")


# --------------------------------------------------------------------------
# pairs

@dataclass(frozen=True)
class PairSpec:
    shape_family: str = "sphere"
    n_points: int = 1024
    deform_mm: float = 15.0
    case: str = "A"
    rotation_range_deg: tuple = (-45.0, 45.0)
    translation_range: tuple = (-0.2, 0.2)
    noise_sigma: float = 0.0
    dropout_fraction: float = 0.0
    seed: int = 0
    size: float = 200.0
    n_control: int = 8
    axis: tuple | None = None
    path: str | None = None
    variation: float = 0.1

    def __post_init__(self):
        if self.shape_family not in FAMILIES:
            raise ValueError(f"shape_family must be one of {FAMILIES}")
        if self.shape_family == "from_file" and not self.path:
            raise ValueError("from_file family needs a path")
        if self.case not in ("A", "B"):
            raise ValueError("case must be 'A' or 'B'")
        if self.n_points < 1:
            raise ValueError("n_points must be positive")
        if self.deform_mm < 0 or self.noise_sigma < 0 or self.size <= 0:
            raise ValueError("deform_mm and noise_sigma must be >= 0, size > 0")
        if not 0.0 <= self.dropout_fraction < 1.0:
            raise ValueError("dropout_fraction must lie in [0, 1)")
        for name in ("rotation_range_deg", "translation_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not well ordered")
        if self.n_control < 4:
            raise ValueError("n_control must be >= 4")


@dataclass
class Pair:
    source: np.ndarray
    target: np.ndarray
    ground_truth: np.ndarray | None
    spec: PairSpec
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def has_correspondence(self) -> bool:
        return self.ground_truth is not None


def _target_shape(spec: PairSpec, rng) -> np.ndarray:
    if spec.shape_family == "from_file":
        pts = read_cloud(spec.path)
        if pts.shape[0] < spec.n_points:
            raise ValueError(f"{spec.path} has fewer than {spec.n_points} points")
        pts = pts[np.sort(rng.choice(pts.shape[0], spec.n_points, replace=False))]
        return pts - pts.mean(axis=0)
    return base_shape(spec.shape_family, spec.n_points, rng, spec.variation) * (spec.size / 2.0)


def make_pair(spec: PairSpec) -> Pair:
    """Build a target shape and a source deformed (and for Case B, rigidly moved) from it.

    The ground truth is the per-index displacement ``target - source``; it is
    dropped when dropout breaks the 1:1 indexing.
    """
    rng = np.random.default_rng(spec.seed)
    target = _target_shape(spec, rng)
    half = spec.size / 2.0
    source = target.copy()

    if spec.deform_mm > 0:
        control = farthest_point_sampling(target, spec.n_control, rng)
        warp = tps_fit(control, rng.standard_normal((spec.n_control, 3)))
        disp = tps_apply(warp, target) - target
        disp = disp - disp.mean(axis=0)
        mag = np.linalg.norm(disp, axis=1).mean()
        if mag > 0:
            disp *= spec.deform_mm / mag
        source = source + disp

    rot, trans = np.eye(3), np.zeros(3)
    if spec.case == "B":
        angle = np.radians(rng.uniform(*spec.rotation_range_deg))
        axis = spec.axis if spec.axis is not None else _sphere_dirs(1, rng)[0]
        rot = rotation_about_axis(axis, angle)
        trans = rng.uniform(*spec.translation_range, size=3) * half
        rel = source - target.mean(axis=0)
        # written as an offset so a zero rotation and translation leave the source bit-identical
        source = source + (rel @ rot.T - rel) + trans

    if spec.noise_sigma > 0:
        source = source + rng.normal(0.0, spec.noise_sigma, source.shape)

    gt = target - source
    if spec.dropout_fraction > 0:
        keep = max(1, int(round(spec.n_points * (1.0 - spec.dropout_fraction))))
        source = source[np.sort(rng.choice(spec.n_points, keep, replace=False))]
        gt = None
    return Pair(as_cloud(source), as_cloud(target), gt, spec, rot, trans)


def subsample_indices(n_total: int, n: int, seed: int) -> np.ndarray:
    if n > n_total:
        raise ValueError(f"cannot draw {n} points from {n_total}")
    return np.random.default_rng(seed).choice(n_total, n, replace=False)


def subsample(cloud, n: int, seed: int) -> np.ndarray:
    pts = as_cloud(cloud)
    return as_cloud(pts[subsample_indices(pts.shape[0], n, seed)])


# --------------------------------------------------------------------------
# dataset files

def write_dataset(pairs, manifest_path, directory) -> list[dict]:
    """Write each pair as two ASCII clouds plus a JSON manifest; returns the records."""
    if not pairs:
        raise ValueError("no pairs to write")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest_path = Path(manifest_path)
    records = []
    for i, pair in enumerate(pairs):
        pid = f"pair_{i:05d}"
        src = directory / f"{pid}_source.xyz"
        tgt = directory / f"{pid}_target.xyz"
        write_cloud(src, pair.source)
        write_cloud(tgt, pair.target)
        records.append({
            "id": pid,
            "source_path": os.path.relpath(src, manifest_path.parent),
            "target_path": os.path.relpath(tgt, manifest_path.parent),
            "case": pair.spec.case,
            "deform_mm": pair.spec.deform_mm,
            "seed": pair.spec.seed,
            "has_correspondence": pair.has_correspondence,
            "family": pair.spec.shape_family,
        })
    manifest_path.write_text(json.dumps(records, indent=2, sort_keys=True) + "\n")
    return records


def read_manifest(manifest_path) -> list[dict]:
    """Load manifest records with ``source_path``/``target_path`` resolved to absolute paths."""
    manifest_path = Path(manifest_path)
    records = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    out = []
    for rec in records:
        rec = dict(rec)
        for key in ("source_path", "target_path"):
            p = Path(rec[key])
            rec[key] = str(p if p.is_absolute() else (base / p))
        out.append(rec)
    return out


def load_pairs(manifest_path):
    """Yield ``(record, source, target)`` for every manifest entry."""
    for rec in read_manifest(manifest_path):
        yield rec, read_cloud(rec["source_path"]), read_cloud(rec["target_path"])


def spec_dict(spec: PairSpec) -> dict:
    return asdict(spec)
