"""Joint training of segmentation, matching and rigidity losses, plus evaluation helpers.

Matching is teacher-forced: descriptors are computed on the ground-truth
fracture points, so the matching target is always well defined. The matching
and rigidity terms switch on at fixed epochs; before that they are recorded
as exactly zero.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import match, net
from . import tensor as T
from .net import NetConfig, NetParams

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("epoch", "lr", "L_seg", "L_mat", "L_rig", "total")


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    batch: int = 4
    lr: float = 1e-3
    min_lr: float = 1e-5
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    beta_epoch: int | None = None  # None: 4% of epochs
    gamma_epoch: int | None = None  # None: 80% of epochs
    seed: int = 0
    checkpoint_every: int = 10
    rigidity_norm: str = "mean"  # "mean": divide by the fracture point count; "sum": raw sum

    @property
    def matching_start(self) -> int:
        return round(0.04 * self.epochs) if self.beta_epoch is None else self.beta_epoch

    @property
    def rigidity_start(self) -> int:
        return round(0.8 * self.epochs) if self.gamma_epoch is None else self.gamma_epoch

    def validate(self) -> None:
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be >= 1")
        if not 0 <= self.matching_start <= self.rigidity_start <= self.epochs:
            raise ConfigError(
                f"need 0 <= beta_epoch <= gamma_epoch <= epochs, got {self.matching_start}, "
                f"{self.rigidity_start}, {self.epochs}")
        if self.rigidity_norm not in ("mean", "sum"):
            raise ConfigError(f"rigidity_norm must be 'mean' or 'sum', got {self.rigidity_norm!r}")
        if self.lr <= 0 or self.min_lr < 0:
            raise ConfigError("lr must be positive and min_lr non-negative")


# ---------------------------------------------------------------------------
# config files: `key = value` lines, keys are dataclass field names
# ---------------------------------------------------------------------------
def _convert(raw: str, default, name: str):
    text = raw.strip()
    if default is None or isinstance(default, int) and not isinstance(default, bool):
        if default is None and text.lower() in ("none", ""):
            return None
        try:
            return int(text)
        except ValueError:
            if default is None:
                raise ConfigError(f"{name}: expected an integer or 'none', got {raw!r}") from None
            raise ConfigError(f"{name}: expected an integer, got {raw!r}") from None
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {raw!r}") from None
    return text


def valid_keys(*configs) -> list[str]:
    return sorted({f.name for c in configs for f in fields(c)})


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def read_config_file(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def apply_config(values: dict[str, str], *configs):
    """Return copies of ``configs`` with matching fields replaced.

    A key updates every config that has a field of that name; a key that
    matches none raises with the list of valid keys.
    """
    known = valid_keys(*configs)
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown}; valid keys: {', '.join(known)}")
    out = []
    for c in configs:
        kw = asdict(c)
        for f in fields(c):
            if f.name in values:
                kw[f.name] = _convert(values[f.name], getattr(c, f.name), f.name)
        out.append(type(c)(**kw))
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
@dataclass
class LossTerms:
    seg: float
    mat: float
    rig: float
    total: float


def object_loss(obj, prep: net.Prepared, params: NetParams, use_mat: bool, use_rig: bool, cfg: TrainConfig):
    """Weighted loss of one object; gated terms are skipped and reported as 0."""
    fw = net.forward(prep, params)
    l_seg = match.loss_seg(fw.confidence, obj.labels)
    total = T.scale(l_seg, cfg.alpha)
    l_mat = l_rig = None
    if use_mat or use_rig:
        f = obj.fracture_index
        primal, dual = net.descriptor_head(T.gather_rows(fw.features, f), params)
        soft = match.sinkhorn_log(match.affinity(primal, dual, params["affinity"]))
        if use_mat:
            l_mat = match.loss_mat(soft, match.gt_matrix(f, obj.gt_match))
            total = total + T.scale(l_mat, cfg.beta)
        if use_rig:
            l_rig = match.rigidity(soft, obj.scattered[f], obj.piece_id[f])
            if cfg.rigidity_norm == "mean":
                # same per-point scale as the matching loss; the raw sum grows with N-hat
                l_rig = T.scale(l_rig, 1.0 / len(f))
            total = total + T.scale(l_rig, cfg.gamma)
    terms = LossTerms(l_seg.item(), 0.0 if l_mat is None else l_mat.item(),
                      0.0 if l_rig is None else l_rig.item(), total.item())
    return total, terms


@dataclass
class TrainState:
    params: NetParams
    adam: T.AdamState
    epoch: int = 0  # next epoch to run
    curves: list[dict] = field(default_factory=list)


def init_state(net_cfg: NetConfig, cfg: TrainConfig) -> TrainState:
    params = NetParams.init(net_cfg, seed=cfg.seed)
    return TrainState(params, T.AdamState(lr=cfg.lr, min_lr=cfg.min_lr, total_epochs=cfg.epochs))


def save_state(state: TrainState, path) -> None:
    """Parameters plus optimizer moments and the next epoch, so training can resume exactly."""
    entries = state.params.checkpoint_entries()
    entries.append(("train.epoch", np.array(float(state.epoch))))
    entries.append(("train.step", np.array(float(state.adam.step))))
    for i, (name, _) in enumerate(state.params.named()):
        if i in state.adam.m:
            entries.append((f"adam.m.{name}", state.adam.m[i]))
            entries.append((f"adam.v.{name}", state.adam.v[i]))
    T.save_checkpoint(path, entries)


def load_state(path, cfg: TrainConfig, expect: NetConfig | None = None) -> TrainState:
    params = NetParams.load(path, expect=expect)
    raw = T.load_checkpoint(path)
    adam = T.AdamState(lr=cfg.lr, min_lr=cfg.min_lr, total_epochs=cfg.epochs)
    adam.step = int(raw.get("train.step", np.array(0.0)).reshape(-1)[0])
    for i, (name, _) in enumerate(params.named()):
        if f"adam.m.{name}" in raw:
            adam.m[i] = raw[f"adam.m.{name}"].copy()
            adam.v[i] = raw[f"adam.v.{name}"].copy()
    epoch = int(raw.get("train.epoch", np.array(0.0)).reshape(-1)[0])
    return TrainState(params, adam, epoch)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle for one epoch; depends only on (seed, epoch) so resumed runs replay it."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def write_curves(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], *(repr(float(r[k])) for k in CURVE_COLUMNS[1:])])


def read_curves(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


def train(objects, net_cfg: NetConfig, cfg: TrainConfig, out_dir=None, state: TrainState | None = None,
          preps: Sequence[net.Prepared] | None = None, stop_epoch: int | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainState:
    """Train (or resume) on ``objects``; writes checkpoints and train.csv when ``out_dir`` is set."""
    cfg.validate()
    net_cfg.validate()
    if not objects:
        raise TrainingError("empty training set")
    for k, o in enumerate(objects):
        if o.n_pieces < 2:
            raise TrainingError(f"object {k} has {o.n_pieces} piece(s); training needs >= 2")
    state = state or init_state(net_cfg, cfg)
    preps = preps or [net.prepare(o.scattered, o.piece_id, net_cfg) for o in objects]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = state.params.parameters()
    last = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    while state.epoch < last:
        e = state.epoch
        t0 = time.perf_counter()
        use_mat, use_rig = e >= cfg.matching_start, e >= cfg.rigidity_start
        order = epoch_order(len(objects), cfg.seed, e)
        sums = np.zeros(4)
        lr = state.adam.scheduled_lr(e)
        for start in range(0, len(order), cfg.batch):
            batch = order[start : start + cfg.batch]
            for k in batch:
                try:
                    loss, terms = object_loss(objects[k], preps[k], state.params, use_mat, use_rig, cfg)
                except FloatingPointError as exc:
                    raise TrainingError(f"non-finite value on object {k} at epoch {e}: {exc}") from exc
                if not np.isfinite(terms.total):
                    raise TrainingError(f"non-finite loss on object {k} at epoch {e}")
                try:
                    T.backward(T.scale(loss, 1.0 / len(batch)))
                except FloatingPointError as exc:
                    raise TrainingError(f"non-finite gradient on object {k} at epoch {e}: {exc}") from exc
                sums += (terms.seg, terms.mat, terms.rig, terms.total)
            lr = T.adam_step(params, state.adam, e, missing="zero")
        means = sums / len(objects)
        row = {"epoch": e, "lr": lr, "L_seg": means[0], "L_mat": means[1], "L_rig": means[2], "total": means[3]}
        state.curves.append(row)
        state.epoch = e + 1
        log.info("epoch %d lr %.2e seg %.4f mat %.4f rig %.4f total %.4f (%.1fs)", e, lr, *means,
                 time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(row)
        if out is not None:
            write_curves(state.curves, out / "train.csv")
            if state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs:
                save_state(state, out / f"epoch_{state.epoch:04d}.bin")
                save_state(state, out / "final.bin")
    return state


# ---------------------------------------------------------------------------
# evaluation of the network's outputs
# ---------------------------------------------------------------------------
@dataclass
class MatchingReport:
    seg_f1: float
    seg_precision: float
    seg_recall: float
    matching_accuracy: float  # teacher-forced Hungarian rows equal to the GT partner
    self_match_fraction: float  # Hungarian rows matched to their own column
    primal_dual_cosine: float  # mean cosine between a point's primal and dual descriptor
    n_objects: int


def f1_counts(pred: np.ndarray, truth: np.ndarray) -> tuple[int, int, int]:
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    return int((pred & truth).sum()), int((pred & ~truth).sum()), int((~pred & truth).sum())


def evaluate_network(objects, params: NetParams, preps=None, threshold: float = 0.5) -> MatchingReport:
    """Pooled segmentation F1 and teacher-forced matching statistics over ``objects``."""
    tp = fp = fn = 0
    correct = rows_with_gt = selfm = matched = 0
    cos_sum = 0.0
    cos_n = 0
    for k, o in enumerate(objects):
        prep = preps[k] if preps is not None else net.prepare(o.scattered, o.piece_id, params.cfg)
        with T.no_grad():
            fw = net.forward(prep, params)
            a, b, c = f1_counts(fw.confidence.data > threshold, o.labels)
            tp, fp, fn = tp + a, fp + b, fn + c
            f = o.fracture_index
            if len(f) == 0:
                continue
            primal, dual = net.descriptor_head(T.gather_rows(fw.features, f), params)
        m = match.match_descriptors(primal, dual, params["affinity"], f)
        gt = match.gt_matrix(f, o.gt_match)
        has = gt.sum(axis=1) > 0
        correct += int(gt[np.arange(len(f)), m.col][has].sum())
        rows_with_gt += int(has.sum())
        selfm += int((m.col == np.arange(len(f))).sum())
        matched += len(f)
        cos_sum += float(np.sum(primal.data * dual.data))
        cos_n += len(f)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return MatchingReport(f1, prec, rec, correct / rows_with_gt if rows_with_gt else 0.0,
                          selfm / matched if matched else 0.0, cos_sum / cos_n if cos_n else 0.0, len(objects))
