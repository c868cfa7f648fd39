"""``phycast`` command line: generate, train, eval, inspect, gradcheck.

Every command takes ``--config PATH`` (JSON) and repeatable ``--set a.b=v``
overrides. Failures print one JSON object on stderr and exit nonzero.
``PHYCAST_THREADS`` caps BLAS threads and generator workers.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .datagen import SPLITS, VptError, generate_split, split_seeds, write_vpt
from .diffops import derivative_pairs, moment_residuals, order_amplitude_profile, profile_to_csv
from .gradcheck import TOLERANCE, run_suite
from .train import Protocol, TrainingDiverged, evaluate, load_data, train


class CliError(Exception):
    def __init__(self, kind: str, message: str, **details):
        self.kind, self.message, self.details = kind, message, details
        super().__init__(message)


def thread_cap() -> int:
    raw = os.environ.get("PHYCAST_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError("env", f"PHYCAST_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError("env", f"PHYCAST_THREADS must be a positive integer, got {raw!r}")
    return n


def _refuse_existing(paths: list[str], force: bool) -> None:
    existing = [p for p in paths if os.path.exists(p)]
    if existing and not force:
        raise CliError("exists", "output exists; pass --force to overwrite", paths=existing)


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


def cmd_generate(args, cfg: RunConfig) -> None:
    if cfg.data.generator is None:
        raise CliError("config", "generate needs data.generator, not data.paths")
    out = args.out or "data"
    targets = {s: os.path.join(out, f"{s}.vpt") for s in SPLITS}
    _refuse_existing(list(targets.values()), args.force)
    os.makedirs(out, exist_ok=True)
    g = cfg.data.generator
    seeds = split_seeds(g.seed)
    sizes = {"train": g.n_train, "val": g.n_val, "test": g.n_test}
    length = cfg.data.T + cfg.data.delta

    def build(split):
        frames = generate_split(g, sizes[split], length, cfg.model.frame_size, seeds[split]).frames
        write_vpt(targets[split], frames.astype(np.float32))
        return split, list(frames.shape)

    with ThreadPoolExecutor(max_workers=thread_cap()) as pool:
        shapes = dict(pool.map(build, SPLITS))
    _emit({"command": "generate", "files": targets, "shapes": shapes, "seeds": seeds})


def cmd_train(args, cfg: RunConfig) -> None:
    out = args.out or "run"
    ckpt = os.path.join(out, "model.ckpt")
    _refuse_existing([ckpt], args.force)
    progress = (lambda row: print(json.dumps(row), file=sys.stderr)) if args.verbose else None
    res = train(cfg, out_dir=out, progress=progress)
    with open(os.path.join(out, "config.json"), "w") as fh:
        fh.write(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    _emit({
        "command": "train",
        "checkpoint": res.checkpoint,
        "log": os.path.join(out, "train_log.csv"),
        "epochs_run": len(res.history),
        "best_epoch": res.best_epoch,
        "best_val_mse": res.best_val_mse,
        "stopped_early": res.stopped_early,
        "skipped_steps": res.skipped_steps,
    })


def _load(args):
    try:
        model, cfg = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise CliError("io", f"no checkpoint at {args.checkpoint}") from None
    if args.set:
        cfg = RunConfig.from_dict(apply_overrides(cfg.to_dict(), args.set))
    return model, cfg


def cmd_eval(args, _cfg) -> None:
    model, cfg = _load(args)
    protocol = Protocol.parse(args.protocol)
    horizon = protocol.horizon if protocol.kind == "longterm" else cfg.data.delta
    test = load_data(cfg, length=cfg.data.T + horizon)["test"]
    report = evaluate(model, test, cfg.data.T, cfg.data.delta, protocol, seed=args.seed)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        name = str(protocol).replace(":", "_")
        csv_path = os.path.join(args.out, f"eval_{name}.csv")
        json_path = os.path.join(args.out, f"eval_{name}.json")
        _refuse_existing([csv_path, json_path], args.force)
        with open(csv_path, "w") as fh:
            fh.write(report.to_csv())
        with open(json_path, "w") as fh:
            fh.write(report.aggregate_json() + "\n")
    else:
        sys.stdout.write(report.to_csv())
    print(report.aggregate_json())


def residual_table(model) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "d", "i", "j", "channel", "residual"])
    for layer, bank in enumerate(model.banks):
        res = moment_residuals(bank)
        for d, (i, j) in enumerate(derivative_pairs(bank.k)):
            for c in range(bank.channels):
                w.writerow([layer, d, i, j, c, repr(float(res[d, c]))])
    return buf.getvalue()


def cmd_inspect(args, _cfg) -> None:
    model, _ = _load(args)
    if not model.banks:
        raise CliError("model", "checkpoint has no PhyCell branch to inspect")
    profiles = [profile_to_csv(order_amplitude_profile(b)) for b in model.banks]
    table = residual_table(model)
    if args.out:
        paths = [os.path.join(args.out, f"order_profile_layer{i}.csv") for i in range(len(profiles))]
        paths.append(os.path.join(args.out, "moment_residuals.csv"))
        _refuse_existing(paths, args.force)
        os.makedirs(args.out, exist_ok=True)
        for path, text in zip(paths, profiles + [table]):
            with open(path, "w") as fh:
                fh.write(text)
        _emit({"command": "inspect", "files": paths})
    else:
        for text in profiles:
            sys.stdout.write(text)
        sys.stdout.write(table)


def cmd_gradcheck(args, _cfg) -> None:
    results = run_suite(max_coords=args.max_coords)
    for r in results:
        _emit({"check": r.name, "max_rel_error": r.error, "passed": r.passed})
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CliError("gradcheck", f"{len(failed)} checks above tolerance {TOLERANCE}", failed=failed)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field by dotted path (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    parser = argparse.ArgumentParser(prog="phycast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write train/val/test VPT files")
    p = sub.add_parser("train", parents=[common], help="train a model and write its checkpoint")
    p.add_argument("-v", "--verbose", action="store_true", help="log each epoch to stderr")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--protocol", default="standard", help="standard | longterm:N | missing:R")
    p.add_argument("--seed", type=int, default=0, help="seed for the missing-frame mask")
    p = sub.add_parser("inspect", parents=[common], help="order profile and moment residuals")
    p.add_argument("checkpoint")
    p = sub.add_parser("gradcheck", parents=[common], help="run the gradient-check suite")
    p.add_argument("--max-coords", type=int, default=12, help="sampled coordinates per tensor")
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = None
        if args.command in ("generate", "train"):
            cfg = load_config(args.config, args.set)
        with threadpool_limits(limits=thread_cap()):
            COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        _fail("config", "invalid configuration", problems=exc.problems)
        return 2
    except CliError as exc:
        _fail(exc.kind, exc.message, **exc.details)
        return 2 if exc.kind in ("config", "exists", "env") else 1
    except TrainingDiverged as exc:
        _fail("diverged", str(exc), report=exc.report)
        return 1
    except (CheckpointError, VptError) as exc:
        _fail("format", str(exc))
        return 1
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        _fail(type(exc).__name__, str(exc))
        return 1
    return 0


def _fail(kind: str, message: str, **details) -> None:
    print(json.dumps({"error": kind, "message": message, **details}, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
