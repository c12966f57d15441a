"""Gaussian mixture models of point clouds.

Covers EM fitting, log-domain density evaluation, the Monte Carlo divergence
between two mixtures, and the rigid / per-component pushforwards of a mixture.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .geom import RigidTransform, as_cloud

log = logging.getLogger(__name__)

FLOOR_FACTOR = 1e-6
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    floor: float = 0.0

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        mu = np.array(self.means, dtype=np.float64).reshape(-1, 3)
        cov = np.array(self.covariances, dtype=np.float64).reshape(-1, 3, 3)
        k = w.shape[0]
        if k < 1 or mu.shape[0] != k or cov.shape[0] != k:
            raise ValueError("weights, means and covariances disagree on K")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if np.max(np.abs(cov - cov.transpose(0, 2, 1))) > 1e-9 * max(1.0, np.abs(cov).max()):
            raise ValueError("covariances must be symmetric")
        cov = 0.5 * (cov + cov.transpose(0, 2, 1))
        min_eig = np.linalg.eigvalsh(cov).min(axis=1)
        if np.any(min_eig <= 0) or np.any(min_eig < self.floor * (1 - 1e-9)):
            raise ValueError("covariance is not positive definite above the floor")
        for arr in (w, mu, cov):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.K, size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covariances)
        z = rng.standard_normal((n, 3))
        return self.means[comp] + np.einsum("nij,nj->ni", chol[comp], z)


def component_log_pdf(points, means, covariances) -> np.ndarray:
    """``(N, K)`` log N(x_n | mu_k, Sigma_k) for 3-D points."""
    x = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    chol = np.linalg.cholesky(covariances)
    out = np.empty((x.shape[0], means.shape[0]))
    for k in range(means.shape[0]):
        # solve L z = (x - mu) so that z.z is the Mahalanobis distance
        z = np.linalg.solve(chol[k], (x - means[k]).T)
        maha = np.sum(z * z, axis=0)
        log_det = 2.0 * np.sum(np.log(np.diag(chol[k])))
        out[:, k] = -0.5 * (3 * _LOG_2PI + log_det + maha)
    return out


def log_density(g: GaussianMixture, x) -> np.ndarray | float:
    """Log of the mixture density, evaluated with log-sum-exp (no underflow)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    lp = component_log_pdf(x, g.means, g.covariances) + np.log(g.weights)
    out = logsumexp(lp, axis=1)
    return float(out[0]) if single else out


def density(g: GaussianMixture, x) -> np.ndarray | float:
    """Mixture density. May underflow to 0 far from the data; use ``log_density`` there."""
    return np.exp(log_density(g, x))


@dataclass
class EMResult:
    mixture: GaussianMixture
    log_likelihood: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(x.shape[0])]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total == 0:
            idx = rng.integers(x.shape[0])
        else:
            idx = rng.choice(x.shape[0], p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _clip_eigenvalues(cov: np.ndarray, floor: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, floor)
    out = np.einsum("kij,kj,klj->kil", vecs, vals, vecs)
    return 0.5 * (out + out.transpose(0, 2, 1))


def _m_step(x, resp, floor):
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    weights = nk / nk.sum()
    means = (resp.T @ x) / nk[:, None]
    cov = np.empty((resp.shape[1], 3, 3))
    for k in range(resp.shape[1]):
        diff = x - means[k]
        cov[k] = (resp[:, k, None] * diff).T @ diff / nk[k]
    # Eigenvalue clipping is the exact maximiser of the EM objective under the
    # constraint eig(Sigma) >= floor, so the likelihood trace stays monotone.
    return weights, means, _clip_eigenvalues(cov, floor)


def fit_em_trace(cloud, K: int, seed: int = 0, max_iter: int = 200, tol: float = 1e-6) -> EMResult:
    x = as_cloud(cloud)
    n = x.shape[0]
    if K < 1 or K > n:
        raise ValueError(f"need 1 <= K <= N, got K={K}, N={n}")
    extent = x.max(axis=0) - x.min(axis=0)
    diag2 = float(extent @ extent)
    if diag2 == 0.0:
        raise ValueError("degenerate cloud: all points identical")
    floor = FLOOR_FACTOR * diag2
    rng = np.random.default_rng(seed)

    centers = _kmeans_pp(x, K, rng)
    d2 = np.sum((x[:, None, :] - centers[None]) ** 2, axis=2)
    resp = np.zeros((n, K))
    resp[np.arange(n), np.argmin(d2, axis=1)] = 1.0
    weights, means, cov = _m_step(x, resp, floor)

    trace = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        lp = component_log_pdf(x, means, cov) + np.log(weights)
        norm = logsumexp(lp, axis=1)
        trace.append(float(norm.mean()))
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
        resp = np.exp(lp - norm[:, None])
        weights, means, cov = _m_step(x, resp, floor)
    log.debug("EM K=%d finished after %d iterations (ll=%.6f)", K, it, trace[-1])
    mix = GaussianMixture(weights, means, cov, floor=floor)
    return EMResult(mix, trace, it, converged)


def fit_em(cloud, K: int, seed: int = 0) -> GaussianMixture:
    return fit_em_trace(cloud, K, seed).mixture


def mc_divergence(gX: GaussianMixture, gY: GaussianMixture, samples) -> float:
    """Mean of ``log gX(s) - log gY(s)`` over the sample points."""
    s = as_cloud(samples, "samples")
    # overflow/inf-inf surface as the FloatingPointError below, not as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        val = float(np.mean(log_density(gX, s) - log_density(gY, s)))
    if not np.isfinite(val):
        raise FloatingPointError("Monte Carlo divergence is not finite")
    return val


def rigid_pushforward(g: GaussianMixture, xf: RigidTransform) -> GaussianMixture:
    R, t = xf.rotation, xf.translation
    return GaussianMixture(
        g.weights,
        g.means @ R.T + t,
        np.einsum("ij,kjl,ml->kim", R, g.covariances, R),
        floor=g.floor,
    )


def componentwise_map(g: GaussianMixture, mean_maps, cov_maps) -> GaussianMixture:
    """Replace every component's mean and covariance by its own mapping."""
    if len(mean_maps) != g.K or len(cov_maps) != g.K:
        raise ValueError("need exactly one mean map and one covariance map per component")
    means = np.array([np.asarray(f(m), dtype=np.float64) for f, m in zip(mean_maps, g.means)])
    covs = np.array([np.asarray(f(c), dtype=np.float64) for f, c in zip(cov_maps, g.covariances)])
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    min_eig = np.linalg.eigvalsh(covs).min(axis=1)
    if np.any(min_eig <= 0) or np.any(min_eig < g.floor * (1 - 1e-9)):
        raise ValueError("mapped covariance is no longer positive definite above the floor")
    return GaussianMixture(g.weights, means, covs, floor=g.floor)


def divergence_matrix(
    collections: dict,
    K: int = 16,
    samples_per_pair: int = 1024,
    seed: int = 0,
    picks: int = 12,
    repetitions: int = 4,
):
    """Average pairwise divergence between labelled collections of clouds.

    For each ordered label pair, ``picks`` random (cloud_a, cloud_b) pairs are
    drawn and ``repetitions`` times over; each cell is the mean of the two
    directed divergences, evaluated at up to ``samples_per_pair`` points of the
    cloud whose mixture comes first. Returns ``(labels, matrix)``.
    """
    labels = list(collections)
    if len(labels) < 2:
        raise ValueError("need at least two labels")
    for lab in labels:
        if len(collections[lab]) == 0:
            raise ValueError(f"collection {lab!r} is empty")

    rng = np.random.default_rng(seed)
    fits: dict = {}

    def fitted(lab, i):
        key = (lab, i)
        if key not in fits:
            cloud = as_cloud(collections[lab][i])
            fit_seed = int(np.random.default_rng([seed, labels.index(lab), i]).integers(2**31))
            fits[key] = (fit_em(cloud, min(K, cloud.shape[0]), fit_seed), cloud)
        return fits[key]

    def directed(ga, cloud_a, gb, pick_rng):
        if cloud_a.shape[0] > samples_per_pair:
            sel = pick_rng.choice(cloud_a.shape[0], samples_per_pair, replace=False)
            cloud_a = cloud_a[sel]
        return mc_divergence(ga, gb, cloud_a)

    L = len(labels)
    mat = np.zeros((L, L))
    for a in range(L):
        for b in range(a, L):
            na, nb = len(collections[labels[a]]), len(collections[labels[b]])
            vals = []
            for _ in range(repetitions):
                for _ in range(picks):
                    i = int(rng.integers(na))
                    j = int(rng.integers(nb))
                    if a == b and na > 1:
                        while j == i:
                            j = int(rng.integers(nb))
                    ga, ca = fitted(labels[a], i)
                    gb, cb = fitted(labels[b], j)
                    vals.append(0.5 * (directed(ga, ca, gb, rng) + directed(gb, cb, ga, rng)))
            mat[a, b] = mat[b, a] = float(np.mean(vals))
    return labels, mat


def write_matrix_csv(path, labels, matrix) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + list(labels))
        for lab, row in zip(labels, matrix):
            w.writerow([lab] + [repr(float(v)) for v in row])


def read_matrix_csv(path):
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = rows[0][1:]
    return labels, np.array([[float(v) for v in r[1:]] for r in rows[1:]])
