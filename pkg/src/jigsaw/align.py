"""Pose recovery: weighted Kabsch, RANSAC on correspondences, pose-graph alignment.

Relative poses follow ``T_ij = T_j^{-1} T_i``: they map points of piece i's
input frame into piece j's input frame, where ``T_k`` maps piece k's input
frame to the assembled frame. Hence ``R_i = R_j R_ij`` and
``t_i = R_j t_ij + t_j``.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .geom import RigidTransform

log = logging.getLogger(__name__)


class DegenerateError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Kabsch
# ---------------------------------------------------------------------------
def _proper_rotation(U: np.ndarray, Vt: np.ndarray) -> np.ndarray:
    """``U diag(1, 1, det(U Vt)) Vt`` for one or a batch of SVD factors."""
    d = np.sign(np.linalg.det(U @ Vt))
    d = np.where(d == 0, 1.0, d)
    U = U.copy()
    U[..., :, 2] *= d[..., None]
    return U @ Vt


def weighted_kabsch(src, dst, weights=None) -> RigidTransform:
    """Rigid transform minimising ``sum w ||R src + t - dst||^2``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError(f"weighted_kabsch: {len(src)} source vs {len(dst)} target points")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(src) < 3:
        raise DegenerateError(f"weighted_kabsch needs >= 3 correspondences, got {len(src)}")
    if np.any(w < 0) or w.sum() <= 0:
        raise DegenerateError("weighted_kabsch: weights must be non-negative with positive sum")
    w = w / w.sum()
    cs, cd = w @ src, w @ dst
    H = (src - cs).T @ ((dst - cd) * w[:, None])
    U, S, Vt = np.linalg.svd(H)
    scale = max(S[0], np.abs(src - cs).max() ** 2, 1e-300)
    if S[1] <= 1e-12 * scale:
        raise DegenerateError("weighted_kabsch: rank < 2 cross-covariance (collinear or coincident points)")
    # H = U S Vt and R = V U^T, so build from (Vt^T, U^T)
    R = _proper_rotation(Vt.T, U.T)
    return RigidTransform(R, cd - R @ cs)


def _kabsch_batch(src: np.ndarray, dst: np.ndarray):
    """Unweighted Kabsch for a batch of (B, k, 3) correspondence sets."""
    cs, cd = src.mean(axis=1, keepdims=True), dst.mean(axis=1, keepdims=True)
    H = np.swapaxes(src - cs, 1, 2) @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    R = _proper_rotation(np.swapaxes(Vt, 1, 2), np.swapaxes(U, 1, 2))
    t = cd[:, 0] - np.einsum("bij,bj->bi", R, cs[:, 0])
    return R, t


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------
@dataclass
class RansacConfig:
    iters: int = 2000
    tau: float = 0.02
    min_inliers: int = 3
    # score hypotheses by truncated squared residual instead of inlier count
    msac: bool = True
    # the refit uses residuals below refit_fraction * tau under the best hypothesis;
    # near-boundary matches that are only approximately corresponding stay out
    refit_fraction: float = 0.25
    seed: int = 0


def ransac_pairwise(src, dst, cfg: RansacConfig | None = None, rng=None):
    """Robust rigid fit ``dst ~ T src``. Returns ``(T, inlier_mask)`` or None.

    Hypotheses come from random correspondence triplets. The best one has the
    lowest truncated squared residual (MSAC), or the most residuals below
    ``tau`` with ``msac=False``; earliest wins ties. It is refit with unit
    weights on the correspondences within ``refit_fraction * tau``.
    """
    cfg = cfg or RansacConfig()
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    m = len(src)
    if m < 3:
        return None
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    trip = np.stack([rng.choice(m, 3, replace=False) for _ in range(cfg.iters)]) if m < 8 else \
        rng.integers(m, size=(cfg.iters, 3))
    distinct = (trip[:, 0] != trip[:, 1]) & (trip[:, 1] != trip[:, 2]) & (trip[:, 0] != trip[:, 2])
    trip = trip[distinct]
    if not len(trip):
        return None
    R, t = _kabsch_batch(src[trip], dst[trip])
    best_score, best_res = -np.inf, None
    for s in range(0, len(trip), 256):
        pred = np.einsum("bij,mj->bmi", R[s : s + 256], src) + t[s : s + 256, None, :]
        res = np.linalg.norm(pred - dst[None], axis=2)
        if cfg.msac:
            score = -np.minimum(res, cfg.tau) ** 2
            score = score.sum(axis=1)
        else:
            score = (res < cfg.tau).sum(axis=1).astype(float)
        k = int(np.argmax(score))
        if score[k] > best_score:
            best_score, best_res = score[k], res[k]
    mask = best_res < cfg.tau
    if mask.sum() < max(3, cfg.min_inliers):
        return None
    refit = best_res < cfg.tau * cfg.refit_fraction
    if refit.sum() < 3:
        refit = mask
    try:
        T = weighted_kabsch(src[refit], dst[refit])
    except DegenerateError:
        return None
    return T, mask


# ---------------------------------------------------------------------------
# pose graph
# ---------------------------------------------------------------------------
@dataclass
class Edge:
    i: int
    j: int
    transform: RigidTransform  # maps piece i's frame into piece j's frame
    weight: float
    inliers: int = 0

    @property
    def information(self) -> np.ndarray:
        return self.weight * np.eye(6)


@dataclass
class PoseGraph:
    sizes: list[int]
    edges: list[Edge] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.sizes)

    def add_edge(self, i, j, transform, n_matches: int, invert_edge_weight: bool = False, inliers: int = 0):
        """Add a measurement; information is ``(1/m) I_6`` for m matches, or ``m I_6`` when inverted."""
        if n_matches <= 0:
            raise ValueError("edge needs a positive match count")
        w = float(n_matches) if invert_edge_weight else 1.0 / n_matches
        self.edges.append(Edge(int(i), int(j), transform, w, inliers))

    def components(self) -> list[list[int]]:
        adj = defaultdict(set)
        for e in self.edges:
            adj[e.i].add(e.j)
            adj[e.j].add(e.i)
        seen, out = set(), []
        for v in range(self.n):
            if v in seen:
                continue
            comp, stack = [], [v]
            seen.add(v)
            while stack:
                u = stack.pop()
                comp.append(u)
                for x in adj[u]:
                    if x not in seen:
                        seen.add(x)
                        stack.append(x)
            out.append(sorted(comp))
        return out


def _project_so3(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    return _proper_rotation(U, Vt)


def _chordal_rotations(comp, anchor, edges):
    """Linear least squares for ``R_i^T - R_ij^T R_j^T = 0`` with the anchor fixed, then SO(3) projection."""
    var = [v for v in comp if v != anchor]
    col = {v: k for k, v in enumerate(var)}
    A = np.zeros((3 * len(edges), 3 * len(var)))
    B = np.zeros((3 * len(edges), 3))
    for r, e in enumerate(edges):
        s = np.sqrt(e.weight)
        Rt = e.transform.rotation.T
        rows = slice(3 * r, 3 * r + 3)
        # Z_i - Rt Z_j = 0 where Z_k = R_k^T
        if e.i == anchor:
            B[rows] -= s * np.eye(3)
        else:
            A[rows, 3 * col[e.i] : 3 * col[e.i] + 3] += s * np.eye(3)
        if e.j == anchor:
            B[rows] += s * Rt
        else:
            A[rows, 3 * col[e.j] : 3 * col[e.j] + 3] -= s * Rt
    Z = np.linalg.lstsq(A, B, rcond=None)[0]
    R = {anchor: np.eye(3)}
    for v in var:
        R[v] = _project_so3(Z[3 * col[v] : 3 * col[v] + 3].T)
    return R


def _hat_basis():
    E = np.zeros((3, 3, 3))
    E[0, 2, 1], E[0, 1, 2] = 1, -1
    E[1, 0, 2], E[1, 2, 0] = 1, -1
    E[2, 1, 0], E[2, 0, 1] = 1, -1
    return E


_HAT = _hat_basis()


def _chordal_cost(R, edges):
    return sum(e.weight * np.sum((R[e.j] @ e.transform.rotation - R[e.i]) ** 2) for e in edges)


def _refine_rotations(R, comp, anchor, edges, max_iters=50, tol=1e-10):
    """Gauss-Newton on the chordal cost with right-multiplicative updates ``R exp(delta)``."""
    from .geom import so3_exp

    var = [v for v in comp if v != anchor]
    if not var:
        return R
    col = {v: k for k, v in enumerate(var)}
    cost = _chordal_cost(R, edges)
    for _ in range(max_iters):
        J = np.zeros((9 * len(edges), 3 * len(var)))
        r = np.zeros(9 * len(edges))
        for k, e in enumerate(edges):
            s = np.sqrt(e.weight)
            Rij = e.transform.rotation
            rows = slice(9 * k, 9 * k + 9)
            r[rows] = s * (R[e.j] @ Rij - R[e.i]).ravel()
            if e.j != anchor:
                J[rows, 3 * col[e.j] : 3 * col[e.j] + 3] = s * np.einsum("ab,kbc,cd->adk", R[e.j], _HAT, Rij).reshape(9, 3)
            if e.i != anchor:
                J[rows, 3 * col[e.i] : 3 * col[e.i] + 3] = -s * np.einsum("ab,kbc->ack", R[e.i], _HAT).reshape(9, 3)
        delta = np.linalg.lstsq(J, -r, rcond=None)[0]
        trial = dict(R)
        for v in var:
            trial[v] = _project_so3(R[v] @ so3_exp(delta[3 * col[v] : 3 * col[v] + 3]))
        new_cost = _chordal_cost(trial, edges)
        if new_cost > cost:
            break
        R, cost = trial, new_cost
        if np.linalg.norm(delta) < tol:
            break
    return R


def _translations(R, comp, anchor, edges):
    """Least squares for ``t_i - t_j = R_j t_ij`` with the anchor at the origin."""
    var = [v for v in comp if v != anchor]
    col = {v: k for k, v in enumerate(var)}
    A = np.zeros((3 * len(edges), 3 * len(var)))
    b = np.zeros(3 * len(edges))
    for r, e in enumerate(edges):
        s = np.sqrt(e.weight)
        rows = slice(3 * r, 3 * r + 3)
        if e.i != anchor:
            A[rows, 3 * col[e.i] : 3 * col[e.i] + 3] += s * np.eye(3)
        if e.j != anchor:
            A[rows, 3 * col[e.j] : 3 * col[e.j] + 3] -= s * np.eye(3)
        b[rows] = s * R[e.j] @ e.transform.translation
    x = np.linalg.lstsq(A, b, rcond=None)[0] if var else np.zeros(0)
    t = {anchor: np.zeros(3)}
    for v in var:
        t[v] = x[3 * col[v] : 3 * col[v] + 3]
    return t


def global_align(graph: PoseGraph, refine: bool = True) -> tuple[list[RigidTransform], list[str | None]]:
    """Absolute poses from relative measurements, one gauge per connected component.

    Each component is anchored at its largest piece (identity pose).
    Vertices without edges get the identity and the flag ``"unaligned"``.
    """
    if graph.n == 0:
        raise ValueError("global_align: empty pose graph")
    poses: list[RigidTransform | None] = [None] * graph.n
    flags: list[str | None] = [None] * graph.n
    for comp in graph.components():
        if len(comp) == 1:
            poses[comp[0]] = RigidTransform.identity()
            flags[comp[0]] = "unaligned"
            continue
        anchor = max(comp, key=lambda v: (graph.sizes[v], -v))
        members = set(comp)
        edges = [e for e in graph.edges if e.i in members]
        R = _chordal_rotations(comp, anchor, edges)
        if refine:
            R = _refine_rotations(R, comp, anchor, edges)
        t = _translations(R, comp, anchor, edges)
        for v in comp:
            poses[v] = RigidTransform(R[v], t[v])
    return poses, flags


def global_anchor(sizes) -> int:
    """Largest piece by point count; ties go to the lower index."""
    sizes = np.asarray(sizes)
    return int(np.argmax(sizes))


# ---------------------------------------------------------------------------
# correspondences -> poses
# ---------------------------------------------------------------------------
@dataclass
class AlignConfig:
    ransac: RansacConfig = field(default_factory=RansacConfig)
    invert_edge_weight: bool = False
    refine: bool = True


def pairwise_correspondences(piece_id: np.ndarray, pairs: np.ndarray) -> dict[tuple[int, int], np.ndarray]:
    """Group point-index pairs by unordered piece pair ``(a, b)``, a < b.

    Each group is an (m, 2) array whose first column lies in piece a.
    Same-piece pairs are dropped.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    pa, pb = piece_id[pairs[:, 0]], piece_id[pairs[:, 1]]
    keep = pa != pb
    pairs, pa, pb = pairs[keep], pa[keep], pb[keep]
    flip = pa > pb
    oriented = np.where(flip[:, None], pairs[:, ::-1], pairs)
    lo, hi = np.minimum(pa, pb), np.maximum(pa, pb)
    out = {}
    for key in sorted(set(zip(lo.tolist(), hi.tolist()))):
        sel = (lo == key[0]) & (hi == key[1])
        out[key] = oriented[sel]
    return out


def poses_from_correspondences(scattered, piece_id, pairs, cfg: AlignConfig | None = None):
    """RANSAC every piece pair with correspondences, then solve the pose graph.

    Returns ``(poses, flags, graph)``; poses map each scattered piece into
    the frame of its component's anchor.
    """
    cfg = cfg or AlignConfig()
    n = int(piece_id.max()) + 1 if len(piece_id) else 0
    sizes = np.bincount(piece_id, minlength=n).tolist()
    graph = PoseGraph(sizes)
    for k, ((a, b), corr) in enumerate(pairwise_correspondences(piece_id, pairs).items()):
        rc = replace(cfg.ransac, seed=cfg.ransac.seed + k)
        fit = ransac_pairwise(scattered[corr[:, 0]], scattered[corr[:, 1]], rc)
        if fit is None:
            log.debug("pair %d-%d: no RANSAC model from %d correspondences", a, b, len(corr))
            continue
        T, mask = fit
        graph.add_edge(a, b, T, len(corr), cfg.invert_edge_weight, inliers=int(mask.sum()))
    poses, flags = global_align(graph, refine=cfg.refine)
    return poses, flags, graph


# ---------------------------------------------------------------------------
# end-to-end assembly
# ---------------------------------------------------------------------------
@dataclass
class Assembly:
    poses: list[RigidTransform]
    flags: list[str | None]
    points: np.ndarray  # scattered points moved by their piece poses
    piece_id: np.ndarray
    pairs: np.ndarray  # cross-piece correspondences that fed RANSAC
    confidence: np.ndarray | None = None
    match: object | None = None  # match.MatchResult when the network ran
    graph: PoseGraph | None = None


def _apply_poses(scattered, piece_id, poses) -> np.ndarray:
    out = np.empty_like(np.asarray(scattered, dtype=np.float64))
    for i, T in enumerate(poses):
        sel = piece_id == i
        out[sel] = T.apply(scattered[sel])
    return out


def _identity_assembly(scattered, piece_id, n, flag, **extra) -> Assembly:
    poses = [RigidTransform.identity() for _ in range(n)]
    return Assembly(poses, [flag] * n, np.asarray(scattered, dtype=np.float64).copy(), piece_id,
                    np.zeros((0, 2), dtype=np.int64), **extra)


def assemble_from_pairs(scattered, piece_id, pairs, cfg: AlignConfig | None = None) -> Assembly:
    """Poses from given point-index correspondences (bypasses the network)."""
    scattered = np.asarray(scattered, dtype=np.float64)
    piece_id = np.asarray(piece_id)
    n = int(piece_id.max()) + 1
    if n == 1:
        return _identity_assembly(scattered, piece_id, 1, None)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    poses, flags, graph = poses_from_correspondences(scattered, piece_id, pairs, cfg)
    for i, f in enumerate(flags):
        if f:
            log.info("piece %d: %s", i, f)
    return Assembly(poses, flags, _apply_poses(scattered, piece_id, poses), piece_id, pairs, graph=graph)


def assemble(scattered, piece_id, params, cfg: AlignConfig | None = None, threshold: float = 0.5) -> Assembly:
    """Network forward, fracture threshold, descriptor matching, RANSAC, pose graph."""
    from . import match, net
    from . import tensor as T

    scattered = np.asarray(scattered, dtype=np.float64)
    piece_id = np.asarray(piece_id)
    n = int(piece_id.max()) + 1
    if n == 1:
        return _identity_assembly(scattered, piece_id, 1, None)
    prep = net.prepare(scattered, piece_id, params.cfg)
    with T.no_grad():
        fw = net.forward(prep, params)
        conf = fw.confidence.data
        frac = np.flatnonzero(conf > threshold)
        if len(frac) == 0:
            log.warning("no predicted fracture points; returning identity poses")
            return _identity_assembly(scattered, piece_id, n, "unaligned", confidence=conf)
        primal, dual = net.descriptor_head(T.gather_rows(fw.features, frac), params)
    m = match.match_descriptors(primal, dual, params["affinity"], frac)
    out = assemble_from_pairs(scattered, piece_id, m.cross_piece_pairs(piece_id), cfg)
    out.confidence, out.match = conf, m
    return out
