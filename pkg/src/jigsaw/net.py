"""Front-end network: grouping backbone, vector self-attention, cross-attention and the two heads.

Every piece is processed in a local reference frame built from its own
geometry (normal from local PCA oriented away from the piece centroid, first
tangent axis toward the centroid), so the features depend neither on where
a scattered piece sits nor on how it is rotated. Neighbourhoods never cross
pieces; cross-attention mixes information over the whole object.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .geom import KnnIndex
from .tensor import Tensor

N_INPUT_FEATURES = 7


@dataclass
class NetConfig:
    D: int = 32
    d: int = 64
    heads: int = 4
    head_dim: int = 8
    ffn_dim: int = 64
    k: int = 16
    # neighbour offsets are divided by this before entering an MLP
    offset_scale: float = 0.05
    # piece-level distances (to the centroid) are divided by this
    piece_scale: float = 0.4
    init_seed: int = 0

    def validate(self) -> None:
        if self.heads * self.head_dim != self.D:
            raise ValueError(f"heads * head_dim must equal D ({self.heads} * {self.head_dim} != {self.D})")
        if self.D % 2:
            raise ValueError("D must be even (segmentation head halves it)")
        if min(self.D, self.d, self.heads, self.head_dim, self.ffn_dim, self.k) < 1:
            raise ValueError("network sizes must be positive")


# ---------------------------------------------------------------------------
# geometry preprocessing (no gradients)
# ---------------------------------------------------------------------------
@dataclass
class Prepared:
    """Per-object geometric inputs, cached across epochs."""

    knn: np.ndarray  # (N, k) global indices, neighbours within the same piece, self first
    offsets: np.ndarray  # (N, k, 3) neighbour offsets in the query point's local frame, scaled
    features: np.ndarray  # (N, N_INPUT_FEATURES) invariant per-point descriptors
    piece_id: np.ndarray


def local_frames(points: np.ndarray, knn_local: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-point frames (rows: tangent x, tangent y, normal), eigenvalues (descending), neighbour offsets."""
    nb = points[knn_local]  # (n, k, 3)
    off = nb - points[:, None, :]
    cen = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", cen, cen) / knn_local.shape[1]
    evals, evecs = np.linalg.eigh(cov)  # ascending
    normal = evecs[:, :, 0]
    to_c = points.mean(axis=0) - points
    flip = np.einsum("ni,ni->n", normal, -to_c) < 0
    normal[flip] *= -1
    tang = to_c - np.einsum("ni,ni->n", to_c, normal)[:, None] * normal
    tn = np.linalg.norm(tang, axis=1)
    weak = tn < 1e-9
    tang[weak] = evecs[weak, :, 2]
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    y = np.cross(normal, tang)
    frames = np.stack([tang, y, normal], axis=1)
    return frames, evals[:, ::-1], off


def prepare(points: np.ndarray, piece_id: np.ndarray, cfg: NetConfig) -> Prepared:
    points = np.asarray(points, dtype=np.float64)
    piece_id = np.asarray(piece_id)
    N = len(points)
    knn = np.empty((N, cfg.k), dtype=np.int64)
    offsets = np.empty((N, cfg.k, 3))
    feats = np.empty((N, N_INPUT_FEATURES))
    for i in np.unique(piece_id):
        idx = np.flatnonzero(piece_id == i)
        if len(idx) == 0:
            raise ValueError(f"piece {i} is empty")
        P = points[idx]
        loc, _ = KnnIndex(P).query(P, cfg.k)
        if loc.shape[1] < cfg.k:
            # small piece: repeat the farthest available neighbour
            loc = np.concatenate([loc, np.repeat(loc[:, -1:], cfg.k - loc.shape[1], axis=1)], axis=1)
        frames, evals, off = local_frames(P, loc)
        knn[idx] = idx[loc]
        offsets[idx] = np.einsum("nij,nkj->nki", frames, off) / cfg.offset_scale
        ev = np.maximum(evals, 0.0)
        tot = ev.sum(axis=1) + 1e-300
        rel = P - P.mean(axis=0)
        normal = frames[:, 2]
        spread = np.linalg.norm(off, axis=2).mean(axis=1)
        feats[idx] = np.stack(
            [
                ev[:, 0] / tot,
                ev[:, 1] / tot,
                ev[:, 2] / tot,
                np.log(spread / cfg.offset_scale + 1e-12),
                np.linalg.norm(rel, axis=1) / cfg.piece_scale,
                np.einsum("ni,ni->n", normal, rel) / cfg.piece_scale,
                # signed bending: neighbours below (convex) or above (concave) the tangent plane
                np.einsum("ni,nki->n", normal, off) / cfg.k / cfg.offset_scale,
            ],
            axis=1,
        )
    return Prepared(knn, offsets, feats, piece_id)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------
def _shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    D, d, h, dh, di = cfg.D, cfg.d, cfg.heads, cfg.head_dim, cfg.ffn_dim
    c0 = N_INPUT_FEATURES
    return {
        # grouping layer 1: (offset, neighbour input features) -> D
        "bb1.w1": (3 + c0, D), "bb1.b1": (D,), "bb1.w2": (D, D), "bb1.b2": (D,),
        # grouping layer 2: (offset, neighbour layer-1 features) -> D
        "bb2.w1": (3 + D, D), "bb2.b1": (D,), "bb2.w2": (D, D), "bb2.b2": (D,),
        # vector self-attention
        "sa.wq": (D, D), "sa.wk": (D, D), "sa.wv": (D, D),
        "sa.pe.w1": (3, D), "sa.pe.b1": (D,), "sa.pe.w2": (D, D), "sa.pe.b2": (D,),
        "sa.att.w1": (D, D), "sa.att.b1": (D,), "sa.att.w2": (D, D), "sa.att.b2": (D,),
        # multi-head cross-attention with feed-forward block
        "ca.wq": (h, D, dh), "ca.wk": (h, D, dh), "ca.wv": (h, D, dh), "ca.wo": (h * dh, D),
        "ca.ffn.w1": (D, di), "ca.ffn.b1": (di,), "ca.ffn.w2": (di, D), "ca.ffn.b2": (D,),
        "ca.ln.gamma": (D,), "ca.ln.beta": (D,),
        # heads
        "seg.w1": (D, D // 2), "seg.b1": (D // 2,), "seg.w2": (D // 2, 1), "seg.b2": (1,),
        "desc.w1": (D, D), "desc.b1": (D,), "desc.w2": (D, 2 * d), "desc.b2": (2 * d,),
        "affinity": (d, d),
    }


class NetParams:
    def __init__(self, cfg: NetConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    @classmethod
    def init(cls, cfg: NetConfig, seed: int | None = None) -> NetParams:
        cfg.validate()
        rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
        out = {}
        for name, shape in _shapes(cfg).items():
            leaf = name.rsplit(".", 1)[-1]
            if name == "affinity":
                val = np.eye(shape[0])
            elif leaf == "gamma":
                val = np.ones(shape)
            elif leaf.startswith("b") or leaf == "beta":
                val = np.zeros(shape)
            else:
                fan_in = shape[-2]
                val = rng.normal(scale=np.sqrt(2.0 / fan_in), size=shape)
            out[name] = Tensor(val, requires_grad=True, name=name)
        return cls(cfg, out)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self) -> list[tuple[str, Tensor]]:
        return list(self.tensors.items())

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def checkpoint_entries(self) -> list[tuple[str, np.ndarray]]:
        cfg = [(f"config.{k}", np.array(float(v))) for k, v in asdict(self.cfg).items()]
        return cfg + [(n, t.data) for n, t in self.tensors.items()]

    def save(self, path) -> None:
        T.save_checkpoint(path, self.checkpoint_entries())

    @classmethod
    def load(cls, path, expect: NetConfig | None = None) -> NetParams:
        raw = T.load_checkpoint(path)
        kw = {}
        for f in fields(NetConfig):
            key = f"config.{f.name}"
            if key not in raw:
                raise T.CheckpointError(f"checkpoint lacks {key}")
            v = float(np.asarray(raw[key]).reshape(-1)[0])
            kw[f.name] = int(v) if f.type in (int, "int") else v
        cfg = NetConfig(**kw)
        if expect is not None and asdict(expect) != asdict(cfg):
            raise T.CheckpointError(f"checkpoint config {asdict(cfg)} differs from expected {asdict(expect)}")
        tensors = {}
        for name, shape in _shapes(cfg).items():
            if name not in raw:
                raise T.CheckpointError(f"checkpoint lacks parameter {name}")
            if raw[name].shape != shape:
                raise T.CheckpointError(f"parameter {name}: shape {raw[name].shape} != {shape}")
            tensors[name] = Tensor(raw[name], requires_grad=True, name=name)
        return cls(cfg, tensors)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------
def _linear(x, w, b=None):
    y = T.matmul(x, w)
    return y + b if b is not None else y


def _mlp2(x, p: NetParams, prefix: str, final_relu: bool = False):
    h = T.relu(_linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    y = _linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])
    return T.relu(y) if final_relu else y


def _grouping(prep: Prepared, feats, p: NetParams, prefix: str):
    """Shared MLP over (local offset, neighbour feature), max-pooled over the neighbourhood."""
    nb = T.gather_rows(feats, prep.knn)  # (N, k, C)
    x = T.concat([T.Tensor(prep.offsets), nb], axis=2)
    return T.tmax(_mlp2(x, p, prefix, final_relu=True), axis=1)


def backbone(prep: Prepared, p: NetParams) -> Tensor:
    f1 = _grouping(prep, T.Tensor(prep.features), p, "bb1")
    return _grouping(prep, f1, p, "bb2")


def self_attention(prep: Prepared, feats, p: NetParams) -> Tensor:
    """Vector attention over each point's neighbourhood, with a residual connection."""
    feats = T.as_tensor(feats)
    q = T.matmul(feats, p["sa.wq"])
    k = T.gather_rows(T.matmul(feats, p["sa.wk"]), prep.knn)
    v = T.gather_rows(T.matmul(feats, p["sa.wv"]), prep.knn)
    # offsets are q - p in the frame of p; the encoding takes p - q
    pe = _mlp2(T.Tensor(-prep.offsets), p, "sa.pe")
    N, kk, D = k.shape
    logits = _mlp2(T.reshape(q, (N, 1, D)) - k + pe, p, "sa.att")
    attn = T.softmax(logits, axis=1)
    return T.tsum(attn * (v + pe), axis=1) + feats


def cross_attention(feats, p: NetParams) -> Tensor:
    """Multi-head scaled dot-product attention over all points, feed-forward block, layer norm."""
    feats = T.as_tensor(feats)
    cfg = p.cfg
    N = feats.shape[0]
    q = T.matmul(feats, p["ca.wq"])  # (h, N, dh)
    k = T.matmul(feats, p["ca.wk"])
    v = T.matmul(feats, p["ca.wv"])
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(cfg.head_dim))
    heads = T.matmul(T.softmax(scores, axis=-1), v)  # (h, N, dh)
    merged = T.reshape(T.transpose(heads, (1, 0, 2)), (N, cfg.heads * cfg.head_dim))
    x = feats + T.matmul(merged, p["ca.wo"])
    x = x + _mlp2(x, p, "ca.ffn")
    return T.layernorm(x, p["ca.ln.gamma"], p["ca.ln.beta"])


def seg_head(feats, p: NetParams) -> Tensor:
    return T.sigmoid(T.reshape(_mlp2(feats, p, "seg"), (-1,)))


def descriptor_head(feats, p: NetParams) -> tuple[Tensor, Tensor]:
    """Primal and dual descriptors, each row scaled to unit length."""
    out = _mlp2(T.as_tensor(feats), p, "desc")
    d = p.cfg.d
    halves = []
    for part in (out[:, :d], out[:, d:]):
        norm = T.sqrt(T.tsum(part * part, axis=1, keepdims=True) + 1e-24) + 1e-12
        halves.append(part / norm)
    return halves[0], halves[1]


@dataclass
class Forward:
    features: Tensor  # cross-attended features, (N, D)
    confidence: Tensor  # (N,)


def forward(prep: Prepared, p: NetParams) -> Forward:
    f = backbone(prep, p)
    f = self_attention(prep, f, p)
    f = cross_attention(f, p)
    return Forward(f, seg_head(f, p))
