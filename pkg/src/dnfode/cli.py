"""Command-line entry points: simulate, train, predict, evaluate, reproduce.

Errors are reported as one JSON object on stderr,
``{"error": <class name>, "message": ..., "exit_code": n}``, and the process
exits with that class's code (2 usage/contract, 3 config, 4 file, 5 data,
6 numerical, 7 checkpoint, 1 anything else).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import checkpoint, experiments
from .config import ExperimentConfig, config_from_dict, load_config
from .data import ObservationSet, load_csv, save_csv
from .dynamics import TimeGrid
from .errors import ContractViolation, DnfError
from .inference import history_csv, predict
from .metrics import dumps_report, evaluate_ensemble

EXIT_USAGE = 2
EXIT_FILE = 4


class UsageError(DnfError):
    exit_code = EXIT_USAGE


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _atomic_write(path, data):
    """Write via a temporary sibling so a failure never leaves a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def parse_grid(spec: str) -> TimeGrid:
    """``start:stop:n`` for n evenly spaced times, or a comma-separated list of times."""
    try:
        if ":" in spec:
            a, b, n = spec.split(":")
            n = int(n)
            times = np.linspace(float(a), float(b), n) if n > 1 else np.array([float(a)])
        else:
            times = np.array([float(v) for v in spec.split(",")])
    except ValueError:
        raise UsageError(f"cannot parse grid {spec!r}; use start:stop:n or t1,t2,...") from None
    return TimeGrid(times)


def _prediction_csv(times, values) -> str:
    d = values.shape[1]
    lines = [",".join(["t"] + [f"y{j + 1}" for j in range(d)])]
    for t, row in zip(times, values):
        lines.append(",".join(format(float(v), ".17g") for v in (t, *row)))
    return "\n".join(lines) + "\n"


def _load_ckpt(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint {path!r} not found")
    return checkpoint.checkpoint_load(path)


def _config_from_meta(meta) -> ExperimentConfig:
    return config_from_dict(meta.get("config", {}))


def cmd_simulate(args):
    cfg = load_config(args.config)
    ds = experiments.build_dataset(cfg.data, cfg.eval, cfg.model.substeps)
    outputs = [(args.out, ds.train)]
    if args.test_out:
        outputs.append((args.test_out, ds.test))
    for path, obs in outputs:
        tmp = Path(path).with_name(f".{Path(path).name}.part")
        save_csv(obs, tmp)
        os.replace(tmp, path)


def cmd_train(args):
    cfg = load_config(args.config)
    obs = load_csv(args.data, substeps=cfg.model.substeps)
    model, history = experiments.fit(obs, cfg.model, cfg.train)
    out = Path(args.out)
    _atomic_write(out, checkpoint.checkpoint_bytes(model, {"config": cfg.to_dict()}))
    _atomic_write(out.with_name(out.stem + "_history.csv"), history_csv(history))


def cmd_predict(args):
    model, meta = _load_ckpt(args.ckpt)
    cfg = _config_from_meta(meta)
    grid = parse_grid(args.grid)
    n_mc = args.n_mc or cfg.eval.n_mc_eval
    pred = predict(model, grid, n_mc, args.seed if args.seed is not None else cfg.eval.seed)
    if pred.samples.shape[0] == 0:
        raise ContractViolation("every prediction sample diverged")
    out = Path(args.out)
    _atomic_write(out, _prediction_csv(grid.times, pred.mean))
    _atomic_write(out.with_name(out.stem + "_std" + out.suffix), _prediction_csv(grid.times, pred.samples.std(axis=0)))


def cmd_evaluate(args):
    model, meta = _load_ckpt(args.ckpt)
    cfg = _config_from_meta(meta)
    test: ObservationSet = load_csv(args.data, substeps=model.spec.substeps)
    e = cfg.eval
    level = args.level if args.level is not None else e.coverage_level
    mode = args.coverage_mode or e.coverage_mode
    seed = args.seed if args.seed is not None else e.seed
    pred = predict(model, test.grid, args.n_mc or e.n_mc_eval, seed)
    if pred.samples.shape[0] == 0:
        raise ContractViolation("every prediction sample diverged")
    rep = evaluate_ensemble(pred.samples, test.observations, np.asarray(model.params.noise_R), test.mask,
                            level=level, mode=mode, rng=seed, n_divergent=pred.n_divergent)
    _atomic_write(args.out, dumps_report(rep.to_dict()))


def cmd_reproduce(args):
    seeds = tuple(int(s) for s in args.seeds.split(","))
    report = experiments.reproduce(args.experiment, seeds=seeds, steps=args.steps)
    _atomic_write(Path(args.out_dir) / "report.json", dumps_report(report))


def build_parser():
    p = _Parser(prog="dnfode", description="GP-ODE models with double normalizing flows.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a dataset described by a config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="training observations CSV")
    s.add_argument("--test-out", help="noise-free scoring set CSV")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="fit a model; writes the checkpoint and <stem>_history.csv")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="predictive mean and std on a time grid")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--grid", required=True, help="start:stop:n or t1,t2,...")
    pr.add_argument("--out", required=True)
    pr.add_argument("--n-mc", type=int)
    pr.add_argument("--seed", type=int)
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("evaluate", help="score a checkpoint against a test CSV")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--n-mc", type=int)
    ev.add_argument("--seed", type=int)
    ev.add_argument("--level", type=float)
    ev.add_argument("--coverage-mode", choices=("quantile", "stddev"))
    ev.set_defaults(func=cmd_evaluate)

    rp = sub.add_parser("reproduce", help="run a named desk-scale protocol")
    rp.add_argument("--experiment", required=True, choices=("vdp", "fhn", "latent-demo"))
    rp.add_argument("--seeds", default="0,1,2")
    rp.add_argument("--steps", type=int)
    rp.add_argument("--out-dir", default=".")
    rp.set_defaults(func=cmd_reproduce)
    return p


def _fail(exc, code):
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("line", "time", "segment"):
        if getattr(exc, attr, None) is not None:
            record[attr] = getattr(exc, attr)
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except DnfError as exc:
        return _fail(exc, exc.exit_code)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail(exc, EXIT_FILE)
    except Exception as exc:  # noqa: BLE001 - last-resort machine-readable record
        return _fail(exc, 1)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
