"""Rigid-body math and point-cloud primitives.

Conventions used throughout the package:

* A :class:`RigidTransform` maps points as ``R @ p + t``; ``a.compose(b)``
  applies ``b`` first, then ``a``.
* Euler angles are intrinsic XYZ in degrees, ``R = Rx(rx) @ Ry(ry) @ Rz(rz)``,
  each reported in (-180, 180].
* Quaternions are (w, x, y, z) with ``w >= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    pass


def _as_points(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != 3:
        raise GeometryError(f"expected (..., 3) points, got shape {p.shape}")
    return p


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.isfinite(R).all() or not np.isfinite(t).all():
            raise GeometryError("non-finite rigid transform")
        if np.abs(R.T @ R - np.eye(3)).max() >= ORTHO_TOL or np.linalg.det(R) <= 0:
            raise GeometryError("rotation is not orthonormal with det +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> RigidTransform:
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_quaternion(cls, q, t=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(rotation_from_quaternion(q), t)

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def quaternion(self) -> np.ndarray:
        return quaternion_from_rotation(self.rotation)

    def compose(self, other: RigidTransform) -> RigidTransform:
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        p = _as_points(points)
        return p @ self.rotation.T + self.translation

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return self.compose(other)

    def __repr__(self) -> str:
        rx, ry, rz = euler_from_rotation(self.rotation)[0]
        tx, ty, tz = self.translation
        return f"RigidTransform(euler=({rx:.3f}, {ry:.3f}, {rz:.3f}) deg, t=({tx:.4g}, {ty:.4g}, {tz:.4g}))"


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------
def rot_x(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def hat(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w) -> np.ndarray:
    """Rodrigues formula; ``w`` is an axis-angle vector in radians."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = hat(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


def so3_log(R) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (radians)."""
    R = np.asarray(R, dtype=np.float64)
    q = quaternion_from_rotation(R)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-12:
        return 2.0 * v / max(q[0], 1e-300)
    angle = 2.0 * np.arctan2(s, q[0])
    return v / s * angle


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation, in radians, in [0, pi]."""
    return float(np.linalg.norm(so3_log(R)))


def rotation_from_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0:
        raise GeometryError("zero or non-finite quaternion")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quaternion_from_rotation(R) -> np.ndarray:
    """Shepperd's method, returns unit (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def random_quaternion(rng: np.random.Generator) -> np.ndarray:
    """Unit quaternion uniformly distributed on S^3 (uniform rotation)."""
    while True:
        q = rng.normal(size=4)
        n = np.linalg.norm(q)
        if n > 1e-6:
            q = q / n
            return -q if q[0] < 0 else q


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return rotation_from_quaternion(random_quaternion(rng))


def _wrap180(a):
    """Map degrees to (-180, 180]."""
    a = np.mod(np.asarray(a, dtype=np.float64) + 180.0, 360.0) - 180.0
    return np.where(a <= -180.0, a + 360.0, a)


GIMBAL_TOL_DEG = 1e-6


def euler_from_rotation(R) -> tuple[np.ndarray, bool]:
    """Intrinsic XYZ Euler angles in degrees and a gimbal-lock flag.

    At ``|ry| = 90`` only ``rx +/- rz`` is observable; it is folded into
    ``rx`` and ``rz`` is set to 0.
    """
    R = np.asarray(R, dtype=np.float64)
    ry = np.degrees(np.arctan2(R[0, 2], np.hypot(R[0, 0], R[0, 1])))
    if abs(abs(ry) - 90.0) < GIMBAL_TOL_DEG:
        rx = np.degrees(np.arctan2(R[2, 1], R[1, 1]))
        return _wrap180(np.array([rx, ry, 0.0])), True
    rx = np.degrees(np.arctan2(-R[1, 2], R[2, 2]))
    rz = np.degrees(np.arctan2(-R[0, 1], R[0, 0]))
    return _wrap180(np.array([rx, ry, rz])), False


def rotation_from_euler(angles) -> np.ndarray:
    rx, ry, rz = angles
    return rot_x(rx) @ rot_y(ry) @ rot_z(rz)


# ---------------------------------------------------------------------------
# nearest neighbours
# ---------------------------------------------------------------------------
class KnnIndex:
    """Exact Euclidean k-NN over a fixed reference set.

    Results are sorted by distance with ties broken by the lower reference
    index. Distances are evaluated directly as ``||q - p||`` so they agree
    bit-for-bit with a naive double loop.
    """

    CHUNK = 128

    def __init__(self, points):
        pts = _as_points(points).reshape(-1, 3)
        if len(pts) == 0:
            raise GeometryError("KnnIndex: empty reference set")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    def _dist(self, q: np.ndarray) -> np.ndarray:
        d = q[:, None, :] - self.points[None, :, :]
        return np.sqrt(np.einsum("ijk,ijk->ij", d, d))

    def query(self, queries, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(indices, distances)`` of shape (m, min(k, n)) (or (min(k, n),) for one query)."""
        if k < 1:
            raise GeometryError("k must be >= 1")
        q = _as_points(queries)
        single = q.ndim == 1
        q = q.reshape(-1, 3)
        kk = min(k, len(self.points))
        idx = np.empty((len(q), kk), dtype=np.int64)
        dist = np.empty((len(q), kk))
        for s in range(0, len(q), self.CHUNK):
            d = self._dist(q[s : s + self.CHUNK])
            if kk == 1:
                o = np.argmin(d, axis=1)[:, None]
            else:
                o = np.argsort(d, axis=1, kind="stable")[:, :kk]
            idx[s : s + self.CHUNK] = o
            dist[s : s + self.CHUNK] = np.take_along_axis(d, o, axis=1)
        if single:
            return idx[0], dist[0]
        return idx, dist


def knn(index: KnnIndex, query, k: int) -> tuple[np.ndarray, np.ndarray]:
    return index.query(query, k)


def chamfer(A, B, squared: bool = False) -> float:
    """Symmetric Chamfer distance: half the sum of the two mean NN distances."""
    A = _as_points(A).reshape(-1, 3)
    B = _as_points(B).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        raise GeometryError("chamfer: empty point set")
    _, dab = KnnIndex(B).query(A, 1)
    _, dba = KnnIndex(A).query(B, 1)
    if squared:
        dab, dba = dab**2, dba**2
    return 0.5 * (float(dab.mean()) + float(dba.mean()))


def diameter(points) -> float:
    """Largest pairwise distance (exact, O(n^2) in chunks)."""
    p = _as_points(points).reshape(-1, 3)
    best = 0.0
    for s in range(0, len(p), 512):
        d = p[s : s + 512, None, :] - p[None, :, :]
        best = max(best, float(np.sqrt(np.einsum("ijk,ijk->ij", d, d).max())))
    return best
