"""Binary object files, matching sidecars, dataset manifests, pose files and PLY export.

All binary layouts are little-endian with fixed widths. Object files
(``.jgso``)::

    "JGSO" | version u32 | n_pieces u32 | n_points u32 | eta f64
    n_points x (x, y, z f32 | piece_id u16 | label u8)
    n_pieces x (qw, qx, qy, qz f64 | tx, ty, tz f64)
    match_count u32 | match_count x (i u32, j u32)
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .geom import RigidTransform
from .synth import PointCloudObject, SynthConfig

OBJ_MAGIC = b"JGSO"
MATCH_MAGIC = b"JGSM"
VERSION = 1
MANIFEST_VERSION = 1

_POINT_DTYPE = np.dtype([("pos", "<f4", (3,)), ("piece", "<u2"), ("label", "u1")])
_PIECE_DTYPE = np.dtype([("quat", "<f8", (4,)), ("trans", "<f8", (3,))])


class DataError(ValueError):
    pass


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class InvariantError(DataError):
    pass


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"unexpected EOF at {section} section (need {n} bytes at offset {self.pos}, "
                                     f"file has {len(self.raw)})")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def array(self, dtype, count: int, section: str) -> np.ndarray:
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count, section), dtype=dtype, count=count)


def _check_magic(r: _Reader, magic: bytes) -> None:
    got = r.raw[:4]
    if got != magic:
        raise BadMagicError(f"bad magic: expected {magic!r}, got {got!r}")
    r.pos = 4


def write_object(path, obj: PointCloudObject) -> None:
    n = obj.n_points
    if obj.n_pieces > 65535:
        raise InvariantError("too many pieces for a u16 piece id")
    pts = np.empty(n, dtype=_POINT_DTYPE)
    pts["pos"] = obj.points.astype(np.float32)
    pts["piece"] = obj.piece_id
    pts["label"] = obj.labels
    pieces = np.empty(obj.n_pieces, dtype=_PIECE_DTYPE)
    pieces["quat"] = obj.gt_quat
    pieces["trans"] = obj.gt_trans
    match = np.ascontiguousarray(obj.gt_match, dtype="<u4")
    with open(path, "wb") as f:
        f.write(OBJ_MAGIC)
        f.write(struct.pack("<IIId", VERSION, obj.n_pieces, n, obj.eta))
        f.write(pts.tobytes())
        f.write(pieces.tobytes())
        f.write(struct.pack("<I", len(match)))
        f.write(match.tobytes())


def read_object(path) -> PointCloudObject:
    r = _Reader(Path(path).read_bytes())
    _check_magic(r, OBJ_MAGIC)
    version, n_pieces, n_points, eta = struct.unpack("<IIId", r.take(20, "header"))
    if version != VERSION:
        raise DataError(f"unsupported object file version {version}")
    pts = r.array(_POINT_DTYPE, n_points, "points")
    pieces = r.array(_PIECE_DTYPE, n_pieces, "poses")
    (m,) = struct.unpack("<I", r.take(4, "match count"))
    match = r.array("<u4", 2 * m, "matches").reshape(m, 2).astype(np.int64)
    if r.pos != len(r.raw):
        raise DataError(f"{len(r.raw) - r.pos} trailing bytes after matches")

    obj = PointCloudObject(
        points=pts["pos"].astype(np.float64),
        piece_id=pts["piece"].astype(np.int64),
        labels=pts["label"].astype(bool),
        gt_quat=pieces["quat"].copy(),
        gt_trans=pieces["trans"].copy(),
        gt_match=match,
        eta=float(eta),
    )
    validate_object(obj, raw_labels=pts["label"])
    return obj


def validate_object(obj: PointCloudObject, raw_labels=None) -> None:
    if obj.n_points and (obj.piece_id.min() < 0 or obj.piece_id.max() >= obj.n_pieces):
        raise InvariantError("piece id out of range")
    if raw_labels is not None and np.any(raw_labels > 1):
        raise InvariantError("fracture label must be 0 or 1")
    if not np.isfinite(obj.points).all():
        raise InvariantError("non-finite point coordinates")
    qn = np.linalg.norm(obj.gt_quat, axis=1)
    if np.any(np.abs(qn - 1) > 1e-9):
        raise InvariantError(f"quaternion norm off by {np.abs(qn - 1).max():.3g}")
    if not np.isfinite(obj.gt_trans).all():
        raise InvariantError("non-finite translation")
    m = obj.gt_match
    if len(m):
        if m.max() >= obj.n_points:
            raise InvariantError("match index out of range")
        if np.any(obj.piece_id[m[:, 0]] == obj.piece_id[m[:, 1]]):
            raise InvariantError("match pair within one piece")
        if not obj.labels[m.ravel()].all():
            raise InvariantError("match pair involves a non-fracture point")


def objects_equal(a: PointCloudObject, b: PointCloudObject) -> bool:
    """Bitwise equality of all serialized fields."""
    return (
        a.points.tobytes() == b.points.tobytes()
        and a.piece_id.tobytes() == b.piece_id.tobytes()
        and a.labels.tobytes() == b.labels.tobytes()
        and a.gt_quat.tobytes() == b.gt_quat.tobytes()
        and a.gt_trans.tobytes() == b.gt_trans.tobytes()
        and np.array_equal(a.gt_match, b.gt_match)
        and a.eta == b.eta
    )


# ---------------------------------------------------------------------------
# matching sidecar
# ---------------------------------------------------------------------------
def write_matching(path, fracture_index, log_affinity, soft, perm) -> None:
    """Sidecar with the log-affinity, the Sinkhorn output and the discrete matching.

    Layout: "JGSM" | version u32 | n u32 | index u32[n] | log_affinity f64[n*n]
    | soft f64[n*n] | perm u32[n] (column matched to each row).
    """
    idx = np.asarray(fracture_index, dtype="<u4")
    n = len(idx)
    with open(path, "wb") as f:
        f.write(MATCH_MAGIC)
        f.write(struct.pack("<II", VERSION, n))
        f.write(idx.tobytes())
        f.write(np.asarray(log_affinity, dtype="<f8").reshape(n, n).tobytes())
        f.write(np.asarray(soft, dtype="<f8").reshape(n, n).tobytes())
        f.write(np.asarray(perm, dtype="<u4").reshape(n).tobytes())


def read_matching(path) -> dict:
    r = _Reader(Path(path).read_bytes())
    _check_magic(r, MATCH_MAGIC)
    version, n = struct.unpack("<II", r.take(8, "header"))
    if version != VERSION:
        raise DataError(f"unsupported matching file version {version}")
    return {
        "fracture_index": r.array("<u4", n, "index").astype(np.int64),
        "log_affinity": r.array("<f8", n * n, "affinity").reshape(n, n).copy(),
        "soft": r.array("<f8", n * n, "soft matching").reshape(n, n).copy(),
        "perm": r.array("<u4", n, "permutation").astype(np.int64),
    }


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------
def object_name(i: int) -> str:
    return f"obj_{i}.jgso"


def write_dataset(out_dir, objects, cfg: SynthConfig, seeds) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, obj in enumerate(objects):
        write_object(out / object_name(i), obj)
        files.append(object_name(i))
    manifest = {
        "version": MANIFEST_VERSION,
        "count": len(objects),
        "config": asdict(cfg),
        "seeds": [int(s) for s in seeds],
        "files": files,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def read_manifest(ds_dir) -> dict:
    path = Path(ds_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {ds_dir}; create one with `jigsaw synth`")
    m = json.loads(path.read_text(encoding="utf-8"))
    for key in ("version", "count", "files"):
        if key not in m:
            raise DataError(f"manifest missing key {key!r}")
    if m["count"] != len(m["files"]):
        raise DataError("manifest count does not match file list")
    return m


def read_dataset(ds_dir) -> list[PointCloudObject]:
    m = read_manifest(ds_dir)
    return [read_object(Path(ds_dir) / f) for f in m["files"]]


# ---------------------------------------------------------------------------
# poses and PLY
# ---------------------------------------------------------------------------
def write_poses(path, poses, flags=None) -> None:
    """One line per piece: ``piece_id qw qx qy qz tx ty tz``; optional trailing flag comment."""
    lines = []
    for i, T in enumerate(poses):
        q, t = T.quaternion(), T.translation
        line = f"{i} " + " ".join(repr(float(v)) for v in (*q, *t))
        if flags and flags[i]:
            line += f"  # {flags[i]}"
        lines.append(line)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_poses(path) -> list[RigidTransform]:
    poses = {}
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DataError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
        vals = [float(v) for v in parts[1:]]
        poses[int(parts[0])] = RigidTransform.from_quaternion(vals[:4], vals[4:])
    if sorted(poses) != list(range(len(poses))):
        raise DataError(f"{path}: piece ids must be 0..n-1")
    return [poses[i] for i in range(len(poses))]


_PALETTE = np.array(
    [[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180],
     [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128], [220, 190, 255],
     [170, 110, 40], [255, 250, 200], [128, 0, 0], [170, 255, 195], [128, 128, 0], [255, 215, 180],
     [0, 0, 128], [128, 128, 128]],
    dtype=np.int64,
)


def piece_color(i: int) -> tuple[int, int, int]:
    return tuple(int(c) for c in _PALETTE[i % len(_PALETTE)])


def export_ply(obj: PointCloudObject, poses, path, source: str = "scattered") -> None:
    """ASCII PLY of ``poses[i]`` applied to each piece, coloured by piece id.

    ``source`` selects the points the poses act on: the scattered input
    (default) or the canonical frame.
    """
    if len(poses) != obj.n_pieces:
        raise ValueError(f"need one pose per piece ({obj.n_pieces}), got {len(poses)}")
    base = obj.scattered if source == "scattered" else obj.points
    out = np.empty_like(base)
    for i, T in enumerate(poses):
        sel = obj.piece_id == i
        out[sel] = T.apply(base[sel])
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {obj.n_points}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    rows = [f"{x!r} {y!r} {z!r} {r} {g} {b}"
            for (x, y, z), (r, g, b) in zip(out.tolist(), (piece_color(p) for p in obj.piece_id))]
    Path(path).write_text("\n".join(header + rows) + "\n", encoding="ascii")
