"""Matching stack: affinity, log-domain Sinkhorn, Hungarian assignment and the training losses."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .align import DegenerateError, weighted_kabsch
from .tensor import Tensor

log = logging.getLogger(__name__)

CLAMP = 1e-7
TAU = 0.05
SINKHORN_ITERS = 20
SINKHORN_MAX_ITERS = 10_000
MIN_PAIR_WEIGHT = 1e-6


# ---------------------------------------------------------------------------
# affinity and Sinkhorn
# ---------------------------------------------------------------------------
def affinity(primal, dual, A, tau: float = TAU) -> Tensor:
    """Log-affinity ``primal @ A @ dual^T / tau``; the affinity itself is its exponential."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return T.scale(T.matmul(T.matmul(primal, A), T.as_tensor(dual).T), 1.0 / tau)


def affinity_matrix(primal, dual, A, tau: float = TAU) -> np.ndarray:
    with T.no_grad():
        return np.exp(affinity(primal, dual, A, tau).data)


def sinkhorn_log(log_m, iters: int = SINKHORN_ITERS, eps: float = 0.0, max_iters: int = SINKHORN_MAX_ITERS) -> Tensor:
    """Alternate row and column normalisation in the log domain; returns the soft matching.

    Runs ``iters`` rounds. With ``eps > 0`` it keeps going (up to
    ``max_iters`` rounds in total) until every row sum is within ``eps`` of 1
    after a column pass; column sums are then exact to rounding. Training
    uses ``eps = 0`` so the number of rounds is fixed.
    """
    L = T.as_tensor(log_m)
    if L.ndim != 2:
        raise T.ShapeError(f"sinkhorn: expected a matrix, got shape {L.shape}")
    rounds = 0
    while rounds < iters or (eps > 0 and rounds < max_iters
                             and np.abs(np.exp(L.data).sum(axis=1) - 1).max() > eps):
        L = L - T.logsumexp(L, axis=1, keepdims=True)
        L = L - T.logsumexp(L, axis=0, keepdims=True)
        rounds += 1
    return T.exp(L)


def sinkhorn(M, iters: int = SINKHORN_ITERS, eps: float = 1e-9) -> Tensor:
    """Sinkhorn on a positive matrix (taken to the log domain first), converged to ``eps``."""
    M = T.as_tensor(M)
    if not (M.data > 0).all():
        raise ValueError("sinkhorn: matrix entries must be positive")
    return sinkhorn_log(T.log(M), iters, eps)


# ---------------------------------------------------------------------------
# Hungarian
# ---------------------------------------------------------------------------
def hungarian(X) -> np.ndarray:
    """Maximum-weight perfect matching on a square matrix.

    Returns ``col`` with ``col[r]`` the column assigned to row ``r``.
    Shortest augmenting paths with dual potentials, O(n^3).
    """
    W = np.asarray(X, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"hungarian: square matrix required, got shape {W.shape}")
    n = W.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    cost = -W
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of = np.zeros(n + 1, dtype=np.int64)  # row_of[j]: row (1-based) matched to column j; 0 = free
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        way = np.zeros(n + 1, dtype=np.int64)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[row_of[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
    col = np.empty(n, dtype=np.int64)
    col[row_of[1:] - 1] = np.arange(n)
    return col


def permutation_matrix(col) -> np.ndarray:
    n = len(col)
    P = np.zeros((n, n))
    P[np.arange(n), col] = 1.0
    return P


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------
def _bce_sum(pred: Tensor, target: np.ndarray) -> Tensor:
    p = T.clip(pred, CLAMP, 1 - CLAMP)
    t = np.asarray(target, dtype=np.float64)
    return T.tsum(T.log(p) * t + T.log(1.0 - p) * (1.0 - t))


def loss_seg(conf, labels) -> Tensor:
    """Mean binary cross-entropy between predicted fracture confidence and labels."""
    conf = T.as_tensor(conf)
    labels = np.asarray(labels, dtype=np.float64).reshape(conf.shape)
    return T.scale(_bce_sum(conf, labels), -1.0 / conf.shape[0])


def loss_mat(soft, gt) -> Tensor:
    """Cross-entropy over all entries of the soft matching, normalised by the number of rows."""
    soft = T.as_tensor(soft)
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != soft.shape:
        raise T.ShapeError(f"loss_mat: shapes {soft.shape} and {gt.shape} differ")
    return T.scale(_bce_sum(soft, gt), -1.0 / soft.shape[0])


def gt_matrix(fracture_index: np.ndarray, gt_match: np.ndarray) -> np.ndarray:
    """Dense GT matching over fracture points, rows and columns both in ``fracture_index`` order."""
    pos = {int(p): k for k, p in enumerate(fracture_index)}
    X = np.zeros((len(fracture_index), len(fracture_index)))
    for a, b in gt_match:
        if int(a) in pos and int(b) in pos:
            X[pos[int(a)], pos[int(b)]] = 1.0
    return X


def _safe_norm(x: Tensor, axis: int = -1) -> Tensor:
    # sqrt(s + e^2) - e is exact to ~e and has a finite gradient at 0
    e = 1e-12
    return T.sqrt(T.tsum(x * x, axis=axis) + e * e) - e


@dataclass
class PairFit:
    i: int
    j: int
    weight: float
    transform: object


def rigidity(soft, points, piece, return_fits: bool = False, fixed: dict | None = None):
    """Sum over ordered piece pairs of weighted distances to the soft-matched targets.

    For each point p of piece i, ``w_p`` is its row mass in block (i, j)
    and ``p'`` the mass-weighted mean of piece j's points. The rigid fit
    of p to p' is solved in closed form and treated as a constant; the
    gradient flows through ``w_p`` and ``p'`` only. ``fixed`` maps
    ``(i, j)`` to a transform to use instead of solving (for gradient checks).
    """
    soft = T.as_tensor(soft)
    points = np.asarray(points, dtype=np.float64)
    piece = np.asarray(piece)
    total = None
    fits = []
    labels = np.unique(piece)
    for i in labels:
        rows = np.flatnonzero(piece == i)
        for j in labels:
            if i == j:
                continue
            cols = np.flatnonzero(piece == j)
            block = soft[np.ix_(rows, cols)]
            w = T.tsum(block, axis=1)
            if w.data.sum() <= MIN_PAIR_WEIGHT:
                continue
            target = T.matmul(block, points[cols]) / T.reshape(w + 1e-12, (-1, 1))
            if fixed is not None:
                if (int(i), int(j)) not in fixed:
                    continue
                fit = fixed[(int(i), int(j))]
            else:
                try:
                    fit = weighted_kabsch(points[rows], target.data, w.data)
                except DegenerateError as exc:
                    log.debug("rigidity: skipping pair %d->%d: %s", i, j, exc)
                    continue
            moved = points[rows] @ fit.rotation.T + fit.translation
            term = T.tsum(w * _safe_norm(T.as_tensor(moved) - target, axis=1))
            total = term if total is None else total + term
            fits.append(PairFit(int(i), int(j), float(w.data.sum()), fit))
    if total is None:
        total = T.Tensor(0.0)
    return (total, fits) if return_fits else total


@dataclass
class MatchResult:
    fracture_index: np.ndarray
    log_affinity: np.ndarray
    soft: np.ndarray
    col: np.ndarray

    @property
    def pairs(self) -> np.ndarray:
        """Matched point-index pairs (primal row point, dual column point)."""
        f = self.fracture_index
        return np.stack([f, f[self.col]], axis=1) if len(f) else np.zeros((0, 2), dtype=np.int64)

    @property
    def permutation(self) -> np.ndarray:
        return permutation_matrix(self.col)

    def cross_piece_pairs(self, piece_id: np.ndarray) -> np.ndarray:
        p = self.pairs
        return p[piece_id[p[:, 0]] != piece_id[p[:, 1]]]


def match_descriptors(primal, dual, A, fracture_index, tau: float = TAU, iters: int = SINKHORN_ITERS) -> MatchResult:
    """Inference path: affinity, Sinkhorn and Hungarian without recording gradients."""
    with T.no_grad():
        logm = affinity(primal, dual, A, tau)
        soft = sinkhorn_log(logm, iters)
    return MatchResult(np.asarray(fracture_index), logm.data, soft.data, hungarian(soft.data))
