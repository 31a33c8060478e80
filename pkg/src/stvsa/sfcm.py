"""Semi-supervised fuzzy C-means (fuzzifier 2) with a label-adherence penalty.

The objective is

    J = sum_ij u_ij^2 d_ij^2 + lam * sum_ij (u_ij - f_ij b_i)^2 d_ij^2

with ``d_ij = ||x_i - c_j||``, ``f`` one-hot supervision rows and ``b`` the
per-sample labeled flag. Memberships use the exact minimiser of ``J`` for
fixed centers; centers use the exact minimiser for fixed memberships, whose
weights ``u^2 + lam (u - f b)^2`` reduce to ``u^2`` on unlabeled rows.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels
from .core.types import Dataset

log = logging.getLogger(__name__)


class SfcmError(RuntimeError):
    pass


@dataclass(frozen=True)
class SfcmConfig:
    n_clusters: int = 2
    lam: float = 1.0
    max_iter: int = 200
    tol: float = 1e-6

    def __post_init__(self):
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be >= 2")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")


@dataclass
class SfcmState:
    memberships: np.ndarray  # [n, C]
    centers: np.ndarray  # [C, D]
    supervision: np.ndarray  # [n, C] one-hot where labeled
    labeled: np.ndarray  # [n] bool
    lam: float
    objective_trace: list[float] = field(default_factory=list)

    @property
    def target(self) -> np.ndarray:
        return self.supervision * self.labeled[:, None]


def make_supervision(partial_labels: np.ndarray, n_clusters: int) -> tuple[np.ndarray, np.ndarray]:
    """One-hot rows for labels in ``[0, C)``; negative entries mean unlabeled."""
    y = np.asarray(partial_labels, dtype=np.int64)
    labeled = y >= 0
    if np.any(y[labeled] >= n_clusters):
        raise ValueError("label index exceeds cluster count")
    f = np.zeros((len(y), n_clusters))
    f[np.flatnonzero(labeled), y[labeled]] = 1.0
    return f, labeled


def squared_distances(data: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = data[:, None, :] - centers[None, :, :]
    return np.einsum("ncd,ncd->nc", diff, diff)


def sfcm_objective(state: SfcmState, data: np.ndarray) -> float:
    d2 = squared_distances(np.asarray(data, dtype=np.float64), state.centers)
    u = state.memberships
    return float(np.sum(u**2 * d2) + state.lam * np.sum((u - state.target) ** 2 * d2))


def update_memberships(state: SfcmState, data: np.ndarray) -> np.ndarray:
    """Closed-form row-stochastic minimiser of J for fixed centers.

    A sample sitting exactly on a center gets membership 1 there (shared
    equally if it touches several).
    """
    d2 = squared_distances(np.asarray(data, dtype=np.float64), state.centers)
    return kernels.sfcm_memberships(np.ascontiguousarray(d2), np.ascontiguousarray(state.target),
                                    float(state.lam))


def _farthest_point(data: np.ndarray, centers: np.ndarray) -> np.ndarray:
    if len(centers) == 0:
        return data[int(np.argmax(np.sum((data - data.mean(axis=0)) ** 2, axis=1)))]
    return data[int(np.argmax(squared_distances(data, centers).min(axis=1)))]


def update_centers(state: SfcmState, data: np.ndarray) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    u = state.memberships
    w = u**2 + state.lam * (u - state.target) ** 2
    mass = w.sum(axis=0)
    centers = np.empty((u.shape[1], data.shape[1]))
    ok = mass > 0
    centers[ok] = (w[:, ok].T @ data) / mass[ok, None]
    for j in np.flatnonzero(~ok):
        centers[j] = _farthest_point(data, centers[ok])
        ok[j] = True
        log.warning("cluster %d lost all membership mass; re-seeded at farthest point", j)
    return centers


def initial_centers(data: np.ndarray, f: np.ndarray, labeled: np.ndarray) -> np.ndarray:
    """Labeled-class means; classes without labels get farthest-point seeds."""
    C = f.shape[1]
    centers = []
    missing = []
    for j in range(C):
        rows = labeled & (f[:, j] > 0)
        if rows.any():
            centers.append(data[rows].mean(axis=0))
        else:
            centers.append(None)
            missing.append(j)
    for j in missing:
        centers[j] = _farthest_point(data, np.array([c for c in centers if c is not None]))
    return np.array(centers)


def cluster_to_class(memberships: np.ndarray, f: np.ndarray, labeled: np.ndarray) -> np.ndarray:
    """Permutation ``perm[cluster] = class`` maximising agreement with the labeled rows."""
    C = memberships.shape[1]
    hard = np.argmax(memberships, axis=1)
    agree = np.zeros((C, C))
    for j in range(C):
        rows = labeled & (hard == j)
        agree[j] = f[rows].sum(axis=0)
    rows, cols = linear_sum_assignment(-agree)
    perm = np.empty(C, dtype=np.int64)
    perm[rows] = cols
    return perm


@dataclass
class SfcmResult:
    memberships: np.ndarray
    centers: np.ndarray
    hard_labels: np.ndarray
    state: SfcmState
    n_iter: int


def sfcm_fit(data: np.ndarray, partial_labels: np.ndarray, cfg: SfcmConfig = SfcmConfig(),
             init_centers: np.ndarray | None = None) -> SfcmResult:
    """Alternate membership and center updates until the objective settles.

    ``partial_labels`` holds class indices, with -1 for unlabeled samples.
    """
    data = np.asarray(data, dtype=np.float64)
    f, labeled = make_supervision(partial_labels, cfg.n_clusters)
    given_f, given_labeled = f, labeled  # still used to name the clusters after a fallback
    lam = cfg.lam
    per_class = f[labeled].sum(axis=0)
    if np.any(per_class == 0):
        warnings.warn("some cluster has no labeled sample; falling back to plain FCM", stacklevel=2)
        f = np.zeros_like(f)
        labeled = np.zeros_like(labeled)
        lam = 0.0
    centers = (np.array(init_centers, dtype=np.float64) if init_centers is not None
               else initial_centers(data, f, labeled))
    state = SfcmState(np.full((len(data), cfg.n_clusters), 1.0 / cfg.n_clusters), centers, f, labeled, lam)
    state.memberships = update_memberships(state, data)
    state.objective_trace.append(sfcm_objective(state, data))
    it = 0
    for it in range(1, cfg.max_iter + 1):
        state.centers = update_centers(state, data)
        state.memberships = update_memberships(state, data)
        obj = sfcm_objective(state, data)
        if not np.isfinite(obj):
            raise SfcmError(f"non-finite objective at iteration {it}")
        prev = state.objective_trace[-1]
        state.objective_trace.append(obj)
        if abs(prev - obj) < cfg.tol:
            break
    perm = (cluster_to_class(state.memberships, given_f, given_labeled) if given_labeled.any()
            else np.arange(cfg.n_clusters))
    hard = perm[np.argmax(state.memberships, axis=1)]
    return SfcmResult(state.memberships, state.centers, hard, state, it)


def sfcm_features(ds: Dataset) -> np.ndarray:
    """Node-averaged trajectories flattened to [S, T*F]."""
    return ds.features.astype(np.float64).mean(axis=1).reshape(len(ds), -1)


def label_dataset(ds: Dataset, cfg: SfcmConfig = SfcmConfig()) -> tuple[Dataset, SfcmResult]:
    """Fill in unlabeled samples from SFCM; confident labels are kept as they are."""
    x = sfcm_features(ds)
    partial = np.where(ds.labels >= 0, ds.labels, -1).astype(np.int64)
    res = sfcm_fit(x, partial, cfg)
    labels = np.where(ds.labels >= 0, ds.labels, res.hard_labels).astype(np.int8)
    meta = [dict(m, label_source="rule" if lab >= 0 else "sfcm") for m, lab in zip(ds.meta, ds.labels)]
    out = ds.evolve(labels=labels, meta=meta)
    log.info("sfcm labeled %d boundary samples in %d iterations", int(np.sum(ds.labels < 0)), res.n_iter)
    return out, res

