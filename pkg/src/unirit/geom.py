"""Point clouds, rigid transforms and the ASCII cloud file format.

A point cloud is an ``(N, 3)`` float64 array. Every transform here keeps the
point order, so index ``i`` of an output always corresponds to index ``i`` of
the input.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

ORTHO_TOL = 1e-6


def as_cloud(points, name: str = "cloud") -> np.ndarray:
    """Validate and return ``points`` as a read-only ``(N, 3)`` float64 array."""
    arr = np.array(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("rigid transform contains non-finite values")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not proper (det != 1)")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def compose(outer: RigidTransform, inner: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``inner`` first, then ``outer``."""
    return RigidTransform(
        outer.rotation @ inner.rotation,
        outer.rotation @ inner.translation + outer.translation,
    )


def compose_all(transforms) -> RigidTransform:
    """Compose a sequence applied in order (first element applied first)."""
    out = RigidTransform.identity()
    for xf in transforms:
        out = compose(xf, out)
    return out


def rotation_about_axis(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0:
        raise ValueError("rotation axis must be non-zero")
    k = axis / norm
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle_rad) * kx + (1.0 - np.cos(angle_rad)) * (kx @ kx)


def rotation_angle_deg(rotation) -> float:
    """Geodesic angle of a rotation matrix, in degrees."""
    c = (np.trace(np.asarray(rotation)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def apply_rigid(cloud, xf: RigidTransform) -> np.ndarray:
    pts = as_cloud(cloud)
    return as_cloud(pts @ xf.rotation.T + xf.translation)


def apply_displacement(cloud, field) -> np.ndarray:
    pts = as_cloud(cloud)
    disp = np.asarray(field, dtype=np.float64)
    if disp.shape != pts.shape:
        raise ValueError(f"displacement field shape {disp.shape} does not match cloud {pts.shape}")
    if not np.all(np.isfinite(disp)):
        raise ValueError("displacement field contains non-finite values")
    return as_cloud(pts + disp)


def centroid(cloud) -> np.ndarray:
    return as_cloud(cloud).mean(axis=0)


def normalize(cloud, *others):
    """Center on the centroid and scale so the max absolute coordinate is 1.

    Extra clouds are normalized with the same scale and offset, which is how a
    source/target pair is prepared jointly (offset and scale then come from the
    concatenation of all inputs). Returns ``(normalized..., scale, offset)``.
    """
    clouds = [as_cloud(cloud)] + [as_cloud(c, "other cloud") for c in others]
    stacked = np.concatenate(clouds, axis=0)
    if stacked.shape[0] < 2:
        raise ValueError("normalization needs at least two points")
    offset = stacked.mean(axis=0)
    scale = float(np.max(np.abs(stacked - offset)))
    if scale == 0.0:
        raise ValueError("degenerate cloud: all points identical")
    out = [as_cloud((c - offset) / scale) for c in clouds]
    return (*out, scale, offset)


def denormalize(cloud, scale: float, offset) -> np.ndarray:
    return as_cloud(np.asarray(cloud) * scale + np.asarray(offset))


def procrustes(source, target) -> RigidTransform:
    """Least-squares rigid transform mapping corresponding ``source`` onto ``target`` (Kabsch)."""
    src = as_cloud(source)
    tgt = as_cloud(target)
    if src.shape != tgt.shape:
        raise ValueError("procrustes needs clouds of equal size")
    cs, ct = src.mean(axis=0), tgt.mean(axis=0)
    h = (src - cs).T @ (tgt - ct)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, ct - rot @ cs)


def read_cloud(path) -> np.ndarray:
    """Read the ASCII format: three numbers per line, ``#`` lines ignored."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            rows.append([float(p) for p in parts])
    return as_cloud(rows, name=str(path))


def write_cloud(path, cloud, header: str | None = None) -> None:
    # repr() of a float64 is the shortest string that round-trips exactly
    pts = as_cloud(cloud)
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    lines.extend(f"{x!r} {y!r} {z!r}" for x, y, z in pts.tolist())
    Path(path).write_text("\n".join(lines) + "\n")
