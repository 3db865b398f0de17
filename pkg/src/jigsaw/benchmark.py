"""Desk-scale end-to-end benchmark: train on synthetic objects, score held-out ones.

Results are cached in a directory together with the settings that produced
them; a cache whose settings differ is ignored and rebuilt.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import align, metrics, net, synth, train
from .net import NetConfig
from .synth import SynthConfig
from .train import TrainConfig

log = logging.getLogger(__name__)

RESULTS_FILE = "results.json"


@dataclass
class BenchmarkConfig:
    train_count: int = 200
    test_count: int = 50
    train_seed: int = 0
    test_seed: int = 1
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(pieces_min=2, pieces_max=4, points=1000))
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ransac_seed: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def datasets(cfg: BenchmarkConfig):
    tr, _ = synth.make_dataset(cfg.synth, cfg.train_count, seed=cfg.train_seed)
    te, _ = synth.make_dataset(cfg.synth, cfg.test_count, seed=cfg.test_seed)
    return tr, te


def evaluate(params, objects, ransac_seed: int = 0) -> dict:
    """Network statistics plus end-to-end assembly metrics on ``objects``."""
    rep = train.evaluate_network(objects, params)
    ev = metrics.EvalReport()
    acfg = align.AlignConfig(align.RansacConfig(seed=ransac_seed))
    for k, o in enumerate(objects):
        out = align.assemble(o.scattered, o.piece_id, params, acfg)
        ev.add(metrics.evaluate_object(o, out.poses, name=f"test_{k}"))
    # the anchor piece is correct by construction; also report accuracy over the other pieces
    non_anchor = float(np.mean([(s.pa * s.n_pieces - 1) / (s.n_pieces - 1) for s in ev.objects]))
    return {**asdict(rep), **ev.aggregate(), "pa_non_anchor": non_anchor,
            "by_pieces": {str(k): v for k, v in ev.by_pieces().items()}}


def _cached(cache: Path, settings: dict) -> dict | None:
    path = cache / RESULTS_FILE
    if not path.exists():
        return None
    data = json.loads(path.read_text())
    return data if data.get("settings") == settings else None


def run(cache_dir, cfg: BenchmarkConfig | None = None, force: bool = False) -> dict:
    """Train (or reuse the cached run) and return the held-out results."""
    cfg = cfg or BenchmarkConfig()
    cache = Path(cache_dir)
    settings = json.loads(json.dumps(cfg.as_dict()))
    if not force:
        hit = _cached(cache, settings)
        if hit is not None:
            return hit
    cache.mkdir(parents=True, exist_ok=True)
    tr, te = datasets(cfg)
    run_dir = cache / "run"
    state = None
    final = run_dir / "final.bin"
    if final.exists() and not force:
        # resume an interrupted run from its last checkpoint
        state = train.load_state(final, cfg.train, expect=cfg.net)
        state.curves = train.read_curves(run_dir / "train.csv")[: state.epoch]
    t0 = time.perf_counter()
    state = train.train(tr, cfg.net, cfg.train, out_dir=run_dir, state=state)
    train_seconds = time.perf_counter() - t0
    t0 = time.perf_counter()
    res = evaluate(state.params, te, cfg.ransac_seed)
    res.update(settings=settings, train_seconds=train_seconds, eval_seconds=time.perf_counter() - t0,
               final_losses=state.curves[-1] if state.curves else None)
    (cache / RESULTS_FILE).write_text(json.dumps(res, indent=2, default=float) + "\n")
    return res


def main() -> None:  # pragma: no cover - long-running entry point
    import argparse
    p = argparse.ArgumentParser(description="Run or reuse the desk-scale benchmark.")
    p.add_argument("--cache", default=".acceptance_cache/desk")
    p.add_argument("--force", action="store_true")
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = run(a.cache, force=a.force)
    print(json.dumps({k: v for k, v in res.items() if k != "settings"}, indent=2, default=float))


if __name__ == "__main__":  # pragma: no cover
    main()
