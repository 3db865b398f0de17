"""Synthetic fractured objects with ground-truth labels, matching and poses.

A solid primitive is split into pieces by a sequence of wavy plane cuts.
Each cut divides one existing piece in two; a point's piece is found by
replaying the cuts in order. Points are drawn area-uniformly from the
original surface and from both sides of every cut surface, then allotted
to fragments in proportion to their surface area ("sampling by object")
with a floor of ``MIN_POINTS_PER_PIECE``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import geom
from .geom import KnnIndex, RigidTransform

log = logging.getLogger(__name__)

SHAPES = ("sphere", "box", "cylinder", "superellipsoid")
MIN_POINTS_PER_PIECE = 30
TARGET_DIAMETER = 0.8


class SynthError(RuntimeError):
    pass


@dataclass
class SynthConfig:
    shape: str = "random"
    pieces_min: int = 2
    pieces_max: int = 5
    points: int = 1000
    eta: float = 0.025
    perturb: float = 0.05
    # "shared": both sides of a fracture are sampled at the same locations;
    # "independent": each side gets its own samples.
    fracture_sampling: str = "shared"
    noise: float = 0.0
    pool_factor: float = 8.0
    max_attempts: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.shape != "random" and self.shape not in SHAPES:
            raise ValueError(f"shape must be 'random' or one of {SHAPES}, got {self.shape!r}")
        if not 1 <= self.pieces_min <= self.pieces_max <= 20:
            raise ValueError(f"need 1 <= pieces_min <= pieces_max <= 20, got {self.pieces_min}..{self.pieces_max}")
        if self.points < MIN_POINTS_PER_PIECE * self.pieces_max:
            raise ValueError(f"points={self.points} < {MIN_POINTS_PER_PIECE} * pieces_max={self.pieces_max}")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.fracture_sampling not in ("shared", "independent"):
            raise ValueError("fracture_sampling must be 'shared' or 'independent'")


@dataclass(eq=False)
class PointCloudObject:
    """One fractured object.

    ``points`` are in the assembled (canonical) frame. ``gt_quat``/``gt_trans``
    hold, per piece, the pose that maps the scattered piece back to the
    canonical frame; before :func:`scatter` they are the identity.
    """

    points: np.ndarray
    piece_id: np.ndarray
    labels: np.ndarray
    gt_quat: np.ndarray
    gt_trans: np.ndarray
    gt_match: np.ndarray
    eta: float
    # bookkeeping that is not serialized: True where a point was drawn on a cut
    on_cut: np.ndarray | None = field(default=None, repr=False)
    _scattered: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def n_pieces(self) -> int:
        return len(self.gt_quat)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.piece_id, minlength=self.n_pieces)

    def piece_indices(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.piece_id == i)

    @property
    def gt_poses(self) -> list[RigidTransform]:
        return [RigidTransform.from_quaternion(q, t) for q, t in zip(self.gt_quat, self.gt_trans)]

    @property
    def scattered(self) -> np.ndarray:
        """Input-frame coordinates: ``R_i^T (p - t_i)`` for each piece."""
        if self._scattered is None:
            out = np.empty_like(self.points)
            for i in range(self.n_pieces):
                sel = self.piece_id == i
                R = geom.rotation_from_quaternion(self.gt_quat[i])
                out[sel] = (self.points[sel] - self.gt_trans[i]) @ R
            self._scattered = out
        return self._scattered

    @property
    def fracture_index(self) -> np.ndarray:
        return np.flatnonzero(self.labels)

    def largest_piece(self) -> int:
        return int(np.argmax(self.counts))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------
class Primitive:
    name = "primitive"

    def inside(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    area: float
    bound: float


class Sphere(Primitive):
    name = "sphere"

    def __init__(self, rng):
        self.r = 1.0
        self.area = 4 * np.pi
        self.bound = 1.0

    def inside(self, x):
        return np.einsum("ij,ij->i", x, x) <= self.r**2

    def sample_surface(self, n, rng):
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True) * self.r


class Box(Primitive):
    name = "box"

    def __init__(self, rng):
        self.h = rng.uniform(0.5, 1.0, size=3)
        hx, hy, hz = self.h
        self.faces = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4
        self.area = float(self.faces.sum())
        self.bound = float(np.linalg.norm(self.h))

    def inside(self, x):
        return np.all(np.abs(x) <= self.h, axis=1)

    def sample_surface(self, n, rng):
        face = rng.choice(6, size=n, p=self.faces / self.area)
        p = rng.uniform(-1, 1, size=(n, 3)) * self.h
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        p[np.arange(n), axis] = sign * self.h[axis]
        return p


class Cylinder(Primitive):
    name = "cylinder"

    def __init__(self, rng):
        self.r = rng.uniform(0.5, 1.0)
        self.hz = rng.uniform(0.5, 1.2)
        self.side = 2 * np.pi * self.r * 2 * self.hz
        self.cap = np.pi * self.r**2
        self.area = self.side + 2 * self.cap
        self.bound = float(np.hypot(self.r, self.hz))

    def inside(self, x):
        return (x[:, 0] ** 2 + x[:, 1] ** 2 <= self.r**2) & (np.abs(x[:, 2]) <= self.hz)

    def sample_surface(self, n, rng):
        part = rng.choice(3, size=n, p=np.array([self.side, self.cap, self.cap]) / self.area)
        th = rng.uniform(0, 2 * np.pi, size=n)
        rad = np.where(part == 0, self.r, self.r * np.sqrt(rng.uniform(size=n)))
        z = np.where(part == 0, rng.uniform(-self.hz, self.hz, size=n), np.where(part == 1, self.hz, -self.hz))
        return np.stack([rad * np.cos(th), rad * np.sin(th), z], axis=1)


class Superellipsoid(Primitive):
    """``sum |x_i / a_i|^e = 1``, sampled by radial projection plus area reweighting."""

    name = "superellipsoid"

    def __init__(self, rng):
        self.a = rng.uniform(0.6, 1.0, size=3)
        self.e = rng.uniform(2.5, 4.0)
        pilot = self._radial(rng.normal(size=(20000, 3)))
        w = self._area_weight(pilot)
        self.area = float(4 * np.pi * w.mean())
        self.w_max = float(w.max() * 1.1)
        self.bound = float(np.linalg.norm(pilot, axis=1).max())

    def _g(self, x):
        return (np.abs(x / self.a) ** self.e).sum(axis=1)

    def _radial(self, v):
        u = v / np.linalg.norm(v, axis=1, keepdims=True)
        return u / self._g(u)[:, None] ** (1.0 / self.e)

    def _area_weight(self, x):
        # dA/dOmega = r^2 / (n . u) for a radially projected surface point
        r = np.linalg.norm(x, axis=1)
        grad = self.e * np.abs(x) ** (self.e - 1) * np.sign(x) / self.a**self.e
        n = grad / np.linalg.norm(grad, axis=1, keepdims=True)
        cos = np.einsum("ij,ij->i", n, x / r[:, None])
        return r**2 / np.maximum(cos, 1e-6)

    def inside(self, x):
        return self._g(x) <= 1.0

    def sample_surface(self, n, rng):
        out = []
        have = 0
        while have < n:
            cand = self._radial(rng.normal(size=(2 * n, 3)))
            keep = rng.uniform(size=len(cand)) * self.w_max < self._area_weight(cand)
            out.append(cand[keep])
            have += int(keep.sum())
        return np.concatenate(out)[:n]


_PRIMITIVES = {c.name: c for c in (Sphere, Box, Cylinder, Superellipsoid)}


# ---------------------------------------------------------------------------
# cuts
# ---------------------------------------------------------------------------
@dataclass
class Cut:
    """Wavy plane ``n.(x - x0) = h(a, b)`` splitting piece ``parent``; the positive side becomes ``child``."""

    parent: int
    child: int
    origin: np.ndarray
    normal: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    amp: np.ndarray  # (2,)
    freq: np.ndarray  # (4,)
    phase: np.ndarray  # (3,)

    def _h(self, a, b):
        A, B = self.amp
        w1, w2, w3, w4 = self.freq
        p1, p2, p3 = self.phase
        return A * np.sin(w1 * a + p1) * np.sin(w2 * b + p2) + B * np.sin(w3 * a + w4 * b + p3)

    def _grad_h(self, a, b):
        A, B = self.amp
        w1, w2, w3, w4 = self.freq
        p1, p2, p3 = self.phase
        c3 = np.cos(w3 * a + w4 * b + p3)
        ha = A * w1 * np.cos(w1 * a + p1) * np.sin(w2 * b + p2) + B * w3 * c3
        hb = A * w2 * np.sin(w1 * a + p1) * np.cos(w2 * b + p2) + B * w4 * c3
        return ha, hb

    def side(self, x: np.ndarray) -> np.ndarray:
        d = x - self.origin
        return d @ self.normal - self._h(d @ self.e1, d @ self.e2) > 0

    def area_bound(self) -> float:
        A, B = self.amp
        w1, w2, w3, w4 = self.freq
        return float(np.sqrt(1 + (A * w1 + B * w3) ** 2 + (A * w2 + B * w4) ** 2))

    def sample(self, half: float, density: float, rng) -> np.ndarray:
        """Area-uniform candidates on the surface over the square ``[-half, half]^2``."""
        wmax = self.area_bound()
        m = int(np.ceil(density * (2 * half) ** 2 * wmax))
        ab = rng.uniform(-half, half, size=(m, 2))
        ha, hb = self._grad_h(ab[:, 0], ab[:, 1])
        w = np.sqrt(1 + ha**2 + hb**2)
        ab = ab[rng.uniform(size=m) * wmax < w]
        h = self._h(ab[:, 0], ab[:, 1])
        return self.origin + ab[:, :1] * self.e1 + ab[:, 1:] * self.e2 + h[:, None] * self.normal


def assign_pieces(x: np.ndarray, cuts: list[Cut], start: np.ndarray | None = None, first: int = 0) -> np.ndarray:
    """Replay ``cuts[first:]`` to find the piece of every point."""
    piece = np.zeros(len(x), dtype=np.int64) if start is None else start.copy()
    for c in cuts[first:]:
        sel = piece == c.parent
        if sel.any():
            idx = np.flatnonzero(sel)
            piece[idx[c.side(x[idx])]] = c.child
    return piece


def _random_cut(rng, parent, child, interior, diam, perturb) -> Cut:
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    tmp = np.eye(3)[np.argmin(np.abs(n))]
    e1 = np.cross(n, tmp)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    proj = interior @ n
    origin = interior.mean(axis=0) + n * rng.uniform(-0.25, 0.25) * proj.std()
    amp = perturb * diam * np.array([rng.uniform(0.5, 1.0), rng.uniform(0.0, 0.5)])
    freq = 2 * np.pi / (diam * rng.uniform(0.3, 0.6, size=4))
    return Cut(parent, child, origin, n, e1, e2, amp, freq, rng.uniform(0, 2 * np.pi, size=3))


def _allocate(ext_area, iface_area, total, rng_unused=None):
    """Integer point counts per exterior patch and per interface patch.

    Interface patches cost two points each (one per side). Returns
    ``(ext_counts, iface_counts)`` summing to ``total`` with every piece
    holding at least ``MIN_POINTS_PER_PIECE`` points.
    """
    ext_area = np.asarray(ext_area, dtype=np.float64)
    keys = list(iface_area)
    f_area = np.array([iface_area[k] for k in keys], dtype=np.float64)
    a_tot = ext_area.sum() + 2 * f_area.sum()
    rho = total / a_tot
    f_cnt = np.rint(rho * f_area).astype(np.int64)
    ext_total = total - 2 * int(f_cnt.sum())
    ideal = ext_area / ext_area.sum() * ext_total
    e_cnt = np.floor(ideal).astype(np.int64)
    rem = ext_total - int(e_cnt.sum())
    order = np.argsort(-(ideal - e_cnt), kind="stable")
    e_cnt[order[:rem]] += 1

    def per_piece():
        c = e_cnt.copy()
        for (a, b), f in zip(keys, f_cnt):
            c[a] += f
            c[b] += f
        return c

    for _ in range(10 * len(e_cnt) + 10):
        c = per_piece()
        low = np.flatnonzero(c < MIN_POINTS_PER_PIECE)
        if not len(low):
            break
        i = low[0]
        d = MIN_POINTS_PER_PIECE - c[i]
        donor = int(np.argmax(np.where(np.arange(len(c)) == i, -1, e_cnt)))
        take = min(d, e_cnt[donor])
        e_cnt[i] += take
        e_cnt[donor] -= take
    return e_cnt, dict(zip(keys, f_cnt))


def _scale_to_diameter(p: np.ndarray) -> np.ndarray:
    p = p - p.mean(axis=0)
    return p * (TARGET_DIAMETER / geom.diameter(p))


def compute_labels(points: np.ndarray, piece_id: np.ndarray, eta: float) -> np.ndarray:
    """Fracture label: distance to the nearest point of any other piece is at most eta."""
    labels = np.zeros(len(points), dtype=bool)
    for i in np.unique(piece_id):
        own = piece_id == i
        if own.all():
            continue
        _, d = KnnIndex(points[~own]).query(points[own], 1)
        labels[own] = d[:, 0] <= eta
    return labels


def build_gt_matching(points: np.ndarray, piece_id: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Directed pairs (i, j): j is the nearest fracture point of another piece to fracture point i."""
    frac = np.flatnonzero(labels)
    pairs = []
    for i in np.unique(piece_id[frac]):
        own = frac[piece_id[frac] == i]
        other = frac[piece_id[frac] != i]
        if len(other) == 0:
            raise SynthError(f"fracture points of piece {i} have no cross-piece candidates")
        idx, _ = KnnIndex(points[other]).query(points[own], 1)
        pairs.append(np.stack([own, other[idx[:, 0]]], axis=1))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    out = np.concatenate(pairs)
    return out[np.argsort(out[:, 0], kind="stable")]


def generate_object(cfg: SynthConfig, rng_seed: int | None = None) -> PointCloudObject:
    """Fracture one primitive into pieces and sample it, in the canonical frame."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if rng_seed is None else rng_seed)
    shape = cfg.shape if cfg.shape != "random" else SHAPES[rng.integers(len(SHAPES))]
    prim = _PRIMITIVES[shape](rng)
    n_pieces = int(rng.integers(cfg.pieces_min, cfg.pieces_max + 1))

    rho_pool = cfg.pool_factor * cfg.points / prim.area
    ext_pool = prim.sample_surface(int(np.ceil(rho_pool * prim.area)), rng)
    diam = geom.diameter(ext_pool[:2000])
    box = rng.uniform(-prim.bound, prim.bound, size=(40000, 3))
    interior = box[prim.inside(box)]

    ext_piece = np.zeros(len(ext_pool), dtype=np.int64)
    int_piece = np.zeros(len(interior), dtype=np.int64)
    # cut-surface pools: locations, piece on the negative side, piece on the positive side
    pools: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    cuts: list[Cut] = []
    for child in range(1, n_pieces):
        for attempt in range(cfg.max_attempts):
            vol = np.bincount(int_piece, minlength=child).astype(float)
            parent = int(rng.choice(child, p=vol / vol.sum()))
            cut = _random_cut(rng, parent, child, interior[int_piece == parent], diam, cfg.perturb)
            half = prim.bound + np.linalg.norm(cut.origin)
            loc = cut.sample(half, rho_pool, rng)
            loc = loc[prim.inside(loc)]
            loc = loc[assign_pieces(loc, cuts) == parent]
            e_new = ext_piece.copy()
            m = e_new == parent
            e_new[np.flatnonzero(m)[cut.side(ext_pool[m])]] = child
            new_pools = []
            for x, neg, pos in pools:
                neg, pos = neg.copy(), pos.copy()
                for side in (neg, pos):
                    s = side == parent
                    side[np.flatnonzero(s)[cut.side(x[s])]] = child
                new_pools.append((x, neg, pos))
            new_pools.append((loc, np.full(len(loc), parent), np.full(len(loc), child)))
            surf = np.bincount(e_new, minlength=child + 1)
            for _, neg, pos in new_pools:
                surf += np.bincount(neg, minlength=child + 1) + np.bincount(pos, minlength=child + 1)
            if surf[parent] >= MIN_POINTS_PER_PIECE and surf[child] >= MIN_POINTS_PER_PIECE:
                break
            log.debug("rejecting cut %d (attempt %d): surface pool %s", child, attempt, surf[[parent, child]])
        else:
            raise SynthError(f"could not place cut {child} with >= {MIN_POINTS_PER_PIECE} points per fragment "
                             f"after {cfg.max_attempts} attempts")
        cuts.append(cut)
        ext_piece = e_new
        pools = new_pools
        m = int_piece == parent
        int_piece[np.flatnonzero(m)[cut.side(interior[m])]] = child

    # patch areas in pool units; allot points
    ext_area = np.bincount(ext_piece, minlength=n_pieces).astype(float)
    iface_area: dict[tuple[int, int], float] = {}
    iface_pts: dict[tuple[int, int], list[np.ndarray]] = {}
    for x, neg, pos in pools:
        a, b = np.minimum(neg, pos), np.maximum(neg, pos)
        for key in set(zip(a.tolist(), b.tolist())):
            sel = (a == key[0]) & (b == key[1])
            iface_area[key] = iface_area.get(key, 0.0) + sel.sum()
            iface_pts.setdefault(key, []).append(x[sel])
    iface_area = dict(sorted(iface_area.items()))
    e_cnt, f_cnt = _allocate(ext_area, iface_area, cfg.points)

    pts, pid, cut_flag = [], [], []
    for i in range(n_pieces):
        pool = ext_pool[ext_piece == i]
        if e_cnt[i] > len(pool):
            raise SynthError(f"exterior pool of piece {i} too small ({len(pool)} < {e_cnt[i]})")
        pts.append(pool[rng.choice(len(pool), e_cnt[i], replace=False)])
        pid.append(np.full(e_cnt[i], i))
        cut_flag.append(np.zeros(e_cnt[i], dtype=bool))
    for (a, b), cnt in f_cnt.items():
        pool = np.concatenate(iface_pts[(a, b)])
        if cfg.fracture_sampling == "shared":
            if cnt > len(pool):
                raise SynthError(f"interface pool {a}-{b} too small")
            chosen = pool[rng.choice(len(pool), cnt, replace=False)]
            sides = [chosen, chosen]
        else:
            if 2 * cnt > len(pool):
                raise SynthError(f"interface pool {a}-{b} too small")
            pick = rng.choice(len(pool), 2 * cnt, replace=False)
            sides = [pool[pick[:cnt]], pool[pick[cnt:]]]
        for piece, s in zip((a, b), sides):
            pts.append(s)
            pid.append(np.full(cnt, piece))
            cut_flag.append(np.ones(cnt, dtype=bool))
    pts = np.concatenate(pts)
    pid = np.concatenate(pid)
    cut_flag = np.concatenate(cut_flag)

    # group by piece, random order inside each piece
    order = np.lexsort((rng.permutation(len(pid)), pid))
    pts, pid, cut_flag = pts[order], pid[order], cut_flag[order]

    pts = _scale_to_diameter(pts)
    if cfg.noise > 0:
        pts = pts + rng.normal(scale=cfg.noise, size=pts.shape)
    # positions are stored as float32 on disk; keep memory and disk identical
    pts = pts.astype(np.float32).astype(np.float64)

    labels = compute_labels(pts, pid, cfg.eta)
    match = build_gt_matching(pts, pid, labels) if n_pieces > 1 else np.zeros((0, 2), dtype=np.int64)
    return PointCloudObject(
        points=pts,
        piece_id=pid.astype(np.int64),
        labels=labels,
        gt_quat=np.tile([1.0, 0.0, 0.0, 0.0], (n_pieces, 1)),
        gt_trans=np.zeros((n_pieces, 3)),
        gt_match=match,
        eta=float(cfg.eta),
        on_cut=cut_flag,
    )


def scatter(obj: PointCloudObject, rng: np.random.Generator) -> PointCloudObject:
    """Recentre every piece at the origin and give it a uniform random rotation.

    The stored pose maps the scattered piece back: ``canonical = R(q) s + t``
    with ``t`` the piece centroid.
    """
    quats = np.empty((obj.n_pieces, 4))
    trans = np.empty((obj.n_pieces, 3))
    for i in range(obj.n_pieces):
        quats[i] = geom.random_quaternion(rng)
        trans[i] = obj.points[obj.piece_id == i].mean(axis=0)
    return replace(obj, gt_quat=quats, gt_trans=trans, _scattered=None)


def object_seeds(seed: int, count: int) -> list[int]:
    """Independent per-object seeds derived from (seed, object index)."""
    return [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def make_object(cfg: SynthConfig, obj_seed: int) -> PointCloudObject:
    obj = generate_object(cfg, obj_seed)
    return scatter(obj, np.random.default_rng([obj_seed, 1]))


def make_dataset(cfg: SynthConfig, count: int, seed: int | None = None) -> tuple[list[PointCloudObject], list[int]]:
    seeds = object_seeds(cfg.seed if seed is None else seed, count)
    return [make_object(cfg, s) for s in seeds], seeds
