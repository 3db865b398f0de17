"""Assembly metrics: Euler-angle rotation error, translation error and part accuracy.

Poses are compared relative to the largest piece, so a rigid motion applied
to a whole assembly does not change any number. Per-object values are means
over pieces; dataset values are unweighted means over objects.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geom
from .geom import RigidTransform

PA_THRESHOLD = 0.01
HIST_BINS = 20
METRICS = ("mae_r", "rmse_r", "mae_t", "rmse_t", "pa")


def rotation_errors(R_pred, R_gt) -> tuple[float, float]:
    """(MAE, RMSE) in degrees over the three Euler angles, each difference wrapped to (-180, 180]."""
    e_pred, _ = geom.euler_from_rotation(R_pred)
    e_gt, _ = geom.euler_from_rotation(R_gt)
    return euler_errors(e_pred, e_gt)


def euler_errors(e_pred, e_gt) -> tuple[float, float]:
    d = geom._wrap180(np.asarray(e_pred, dtype=np.float64) - np.asarray(e_gt, dtype=np.float64))
    return float(np.mean(np.abs(d))), float(np.sqrt(np.mean(d**2)))


def translation_errors(t_pred, t_gt) -> tuple[float, float]:
    d = np.asarray(t_pred, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)
    return float(np.mean(np.abs(d))), float(np.sqrt(np.mean(d**2)))


def part_correct(points, pose_pred: RigidTransform, pose_gt: RigidTransform, squared: bool = False,
                 threshold: float = PA_THRESHOLD) -> bool:
    return geom.chamfer(pose_pred.apply(points), pose_gt.apply(points), squared=squared) < threshold


def relative_to_anchor(poses, anchor: int) -> list[RigidTransform]:
    inv = poses[anchor].inverse()
    return [inv.compose(T) for T in poses]


@dataclass
class ObjectScore:
    n_pieces: int
    mae_r: float
    rmse_r: float
    mae_t: float
    rmse_t: float
    pa: float
    name: str = ""


def evaluate_object(obj, poses, name: str = "", chamfer_squared: bool = False) -> ObjectScore:
    """Score predicted poses (scattered -> assembled) against the object's ground truth."""
    if len(poses) != obj.n_pieces:
        raise ValueError(f"need {obj.n_pieces} poses, got {len(poses)}")
    anchor = obj.largest_piece()
    gt = relative_to_anchor(obj.gt_poses, anchor)
    pred = relative_to_anchor(list(poses), anchor)
    rows = []
    for i in range(obj.n_pieces):
        mr, rr = rotation_errors(pred[i].rotation, gt[i].rotation)
        mt, rt = translation_errors(pred[i].translation, gt[i].translation)
        ok = part_correct(obj.scattered[obj.piece_id == i], pred[i], gt[i], chamfer_squared)
        rows.append((mr, rr, mt, rt, float(ok)))
    m = np.mean(np.array(rows), axis=0)
    return ObjectScore(obj.n_pieces, *map(float, m), name=name)


@dataclass
class EvalReport:
    objects: list[ObjectScore] = field(default_factory=list)

    def add(self, score: ObjectScore) -> None:
        self.objects.append(score)

    def _values(self, key, subset=None):
        objs = self.objects if subset is None else subset
        return np.array([getattr(o, key) for o in objs], dtype=np.float64)

    def aggregate(self, subset=None) -> dict[str, float]:
        return {k: float(self._values(k, subset).mean()) for k in METRICS}

    def by_pieces(self) -> dict[int, dict[str, float]]:
        groups: dict[int, list[ObjectScore]] = {}
        for o in self.objects:
            groups.setdefault(o.n_pieces, []).append(o)
        return {k: {"count": len(v), **self.aggregate(v)} for k, v in sorted(groups.items())}

    def histograms(self, bins: int = HIST_BINS) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        out = {}
        for k in METRICS:
            v = self._values(k)
            lo, hi = float(v.min()), float(v.max())
            if hi <= lo:
                hi = lo + 1.0
            counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
            out[k] = (counts, edges)
        return out

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": out / "report.csv", "summary": out / "summary.csv", "histograms": out / "histograms.csv"}
        with open(paths["report"], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["object", "n_pieces", *METRICS])
            for o in self.objects:
                w.writerow([o.name, o.n_pieces, *(repr(getattr(o, k)) for k in METRICS)])
        with open(paths["summary"], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["group", "count", *METRICS])
            w.writerow(["all", len(self.objects), *(repr(v) for v in self.aggregate().values())])
            for k, agg in self.by_pieces().items():
                w.writerow([f"pieces={k}", agg["count"], *(repr(agg[m]) for m in METRICS)])
        with open(paths["histograms"], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "bin_lo", "bin_hi", "count"])
            for k, (counts, edges) in self.histograms().items():
                for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                    w.writerow([k, repr(float(lo)), repr(float(hi)), int(c)])
        return paths


def read_summary(path) -> dict[str, dict[str, float]]:
    with open(path, newline="") as f:
        return {r["group"]: {k: float(v) for k, v in r.items() if k != "group"} for r in csv.DictReader(f)}
