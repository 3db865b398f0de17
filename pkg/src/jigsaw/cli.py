"""Command-line entry point: ``jigsaw <synth|train|assemble|eval|export-ply|selftest>``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Settings resolve as
defaults < ``--config`` file < ``--key value`` overrides on the command line.
Log level comes from ``JIGSAW_LOG`` (error, info or debug).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, dataclass
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import align, dataio, metrics, synth, train
from . import tensor as T
from .align import AlignConfig, RansacConfig
from .geom import RigidTransform
from .net import NetConfig, NetParams
from .synth import SynthConfig
from .train import ConfigError, TrainConfig

log = logging.getLogger("jigsaw")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        # prefix matching would turn the --d override into --data
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# settings: defaults < config file < --key value overrides
# ---------------------------------------------------------------------------
def _overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) <= 2:
            raise UsageError(f"unexpected argument {tok!r}; overrides take the form --key value")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"override {tok} needs a value")
            value = extra[i + 1]
            i += 2
        out[key] = value
    return out


def _settings(args, extra: list[str], *defaults):
    values = train.read_config_file(args.config) if args.config else {}
    values.update(_overrides(extra))
    return train.apply_config(values, *defaults)


@dataclass
class AlignSettings:
    ransac_iters: int = 2000
    ransac_tau: float = 0.02
    invert_edge_weight: bool = False
    threshold: float = 0.5
    seed: int = 0

    def to_config(self) -> AlignConfig:
        return AlignConfig(RansacConfig(iters=self.ransac_iters, tau=self.ransac_tau, seed=self.seed),
                           invert_edge_weight=self.invert_edge_weight)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------
def _parse_pieces(text: str) -> tuple[int, int]:
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split("..", 1))
        else:
            lo = hi = int(text)
    except ValueError:
        raise UsageError(f"--pieces expects N or LO..HI, got {text!r}") from None
    return lo, hi


def cmd_synth(args, extra) -> int:
    (cfg,) = _settings(args, extra, SynthConfig(seed=args.seed))
    if args.pieces:
        lo, hi = _parse_pieces(args.pieces)
        cfg = SynthConfig(**{**asdict(cfg), "pieces_min": lo, "pieces_max": hi})
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    objs, seeds = synth.make_dataset(cfg, args.count, seed=cfg.seed)
    path = dataio.write_dataset(args.out, objs, cfg, seeds)
    print(f"wrote {len(objs)} objects and {path}")
    return 0


def cmd_train(args, extra) -> int:
    tc, nc = _settings(args, extra, TrainConfig(seed=args.seed), NetConfig())
    for c in (tc, nc):
        try:
            c.validate()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    objs = dataio.read_dataset(args.data)
    state = train.load_state(args.resume, tc, expect=nc) if args.resume else None
    state = train.train(objs, nc, tc, out_dir=args.out, state=state)
    last = state.curves[-1] if state.curves else None
    if last:
        print(f"trained {tc.epochs} epochs; final total loss {last['total']:.4f}; checkpoint {Path(args.out) / 'final.bin'}")
    return 0


def _assemble_one(job):
    path, ckpt, settings, oracle = job
    obj = dataio.read_object(path)
    cfg = settings.to_config()
    if oracle:
        out = align.assemble_from_pairs(obj.scattered, obj.piece_id, obj.gt_match, cfg)
    else:
        params = NetParams.load(ckpt)
        out = align.assemble(obj.scattered, obj.piece_id, params, cfg, threshold=settings.threshold)
    return obj, out


def _inputs(path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        return [p / f for f in dataio.read_manifest(p)["files"]]
    if not p.exists():
        raise FileNotFoundError(f"input {p} does not exist")
    return [p]


def _map(fn, jobs, n_jobs: int):
    if n_jobs <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, jobs))


def _poses_name(obj_path: Path) -> str:
    return obj_path.stem + ".poses.txt"


def cmd_assemble(args, extra) -> int:
    (settings,) = _settings(args, extra, AlignSettings(seed=args.seed))
    if not args.oracle and not args.ckpt:
        raise UsageError("assemble needs --ckpt (or --oracle to use the stored true correspondences)")
    if args.ckpt and not Path(args.ckpt).exists():
        raise FileNotFoundError(f"checkpoint {args.ckpt} does not exist")
    inputs = _inputs(args.input)
    results = _map(_assemble_one, [(p, args.ckpt, settings, args.oracle) for p in inputs], args.jobs)
    single = len(inputs) == 1 and not Path(args.input).is_dir()
    out = Path(args.out)
    if not single:
        out.mkdir(parents=True, exist_ok=True)
    for path, (obj, res) in zip(inputs, results):
        target = out if single else out / _poses_name(path)
        dataio.write_poses(target, res.poses, res.flags)
        if args.ply:
            ply = Path(args.ply) if single else Path(args.ply) / (path.stem + ".ply")
            ply.parent.mkdir(parents=True, exist_ok=True)
            dataio.export_ply(obj, res.poses, ply)
        unaligned = [i for i, f in enumerate(res.flags) if f]
        if unaligned:
            log.warning("%s: pieces %s unaligned", path.name, unaligned)
    print(f"wrote poses for {len(inputs)} object(s) to {out}")
    return 0


def _eval_one(job):
    path, mode, source, settings = job
    obj = dataio.read_object(path)
    if mode == "gt":
        poses = obj.gt_poses
    elif mode == "poses":
        poses = dataio.read_poses(source)
    else:
        _, res = _assemble_one((path, source, settings, mode == "oracle"))
        poses = res.poses
    return metrics.evaluate_object(obj, poses, name=path.stem)


def cmd_eval(args, extra) -> int:
    (settings,) = _settings(args, extra, AlignSettings(seed=args.seed))
    modes = [m for m in ("gt", "oracle") if getattr(args, m)] + (["poses"] if args.poses else []) \
        + (["ckpt"] if args.ckpt else [])
    if len(modes) != 1:
        raise UsageError("eval needs exactly one of --poses DIR, --ckpt FILE, --oracle, --gt")
    mode = modes[0]
    inputs = _inputs(args.data)
    jobs = []
    for p in inputs:
        source = None
        if mode == "poses":
            source = Path(args.poses) / _poses_name(p) if Path(args.poses).is_dir() else Path(args.poses)
            if not source.exists():
                raise FileNotFoundError(f"no poses file {source} for {p.name}")
        elif mode == "ckpt":
            source = args.ckpt
        jobs.append((p, mode, source, settings))
    rep = metrics.EvalReport()
    for score in _map(_eval_one, jobs, args.jobs):
        rep.add(score)
    paths = rep.write(args.out)
    agg = rep.aggregate()
    print(f"{len(inputs)} objects: MAE(R)={agg['mae_r']:.3f} RMSE(R)={agg['rmse_r']:.3f} "
          f"MAE(T)={agg['mae_t']:.2e} RMSE(T)={agg['rmse_t']:.2e} PA={agg['pa']:.3f}; wrote {paths['summary']}")
    return 0


def cmd_export_ply(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    obj = dataio.read_object(args.input)
    if args.poses:
        poses, source = dataio.read_poses(args.poses), "scattered"
    elif args.view == "assembled":
        poses, source = obj.gt_poses, "scattered"
    else:
        poses, source = [RigidTransform.identity()] * obj.n_pieces, "scattered"
    dataio.export_ply(obj, poses, args.out, source=source)
    print(f"wrote {args.out}")
    return 0


def cmd_selftest(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    from . import selftest
    return 0 if selftest.run() else 2


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jigsaw", description="Fracture assembly on synthetic point clouds.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="file of `key = value` lines")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for per-object stages (default 1)")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    common(s)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--pieces", help="N or LO..HI pieces per object")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train the network on a dataset")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="training checkpoint to continue from")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("assemble", help="recover piece poses for one object or a dataset")
    common(s)
    s.add_argument("--ckpt")
    s.add_argument("--oracle", action="store_true", help="use stored true correspondences instead of the network")
    s.add_argument("--in", dest="input", required=True, help="object file or dataset directory")
    s.add_argument("--out", required=True, help="poses file (single object) or directory")
    s.add_argument("--ply", help="also write the assembled cloud as PLY (file or directory)")
    s.set_defaults(fn=cmd_assemble)

    s = sub.add_parser("eval", help="score poses against ground truth")
    common(s)
    s.add_argument("--data", required=True, help="dataset directory or object file")
    s.add_argument("--poses", help="poses file or directory of <object>.poses.txt")
    s.add_argument("--ckpt", help="assemble with this checkpoint, then score")
    s.add_argument("--oracle", action="store_true", help="assemble from true correspondences, then score")
    s.add_argument("--gt", action="store_true", help="score the ground-truth poses")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("export-ply", help="write an object as coloured PLY")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--poses", help="apply these poses to the scattered pieces")
    s.add_argument("--view", choices=("scattered", "assembled"), default="scattered")
    s.set_defaults(fn=cmd_export_ply)

    s = sub.add_parser("selftest", help="run the built-in invariant checks")
    s.set_defaults(fn=cmd_selftest)
    return p


def _setup_logging() -> None:
    level = os.environ.get("JIGSAW_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"JIGSAW_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        _setup_logging()
        parser = build_parser()
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return args.fn(args, extra)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (OSError, dataio.DataError, T.CheckpointError, train.TrainingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
