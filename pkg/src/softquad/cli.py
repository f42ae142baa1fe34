"""Command-line entry point: training, morphology datasets, evaluation,
analysis, and live policy serving.

Every failure prints a single machine-parsable line `error: <kind>: <detail>`
on stderr and exits with a kind-specific code: 2 for usage errors, 3 for
unreadable inputs, 4 for malformed or mismatched content, 5 for runtime
failures. The `LUART_LOG` environment variable sets log verbosity
(debug/info/warning/error).
"""

from __future__ import annotations

import argparse
import asyncio
import dataclasses
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from .checkpoint import CheckpointError
from .config import Config, ConfigError, load_config
from .dynamics import SimFault
from .evalkit import analyze_log, command_scripts, export_log, load_log, rollout_scripted, write_report
from .morphology import sample_morphologies, save_morphology_dataset
from .ppo import TrainingError
from .serve import PolicyServer, ServeOptions
from .trainer import load_student_policy, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_UNREADABLE = 3
EXIT_SCHEMA = 4
EXIT_RUNTIME = 5

SCRIPT_NAMES = ("forward_ladder", "lateral", "pivot", "omni_grid", "figure_eight")

log = logging.getLogger(__name__)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exceptions, not exits."""

    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="softquad", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train teacher and student policies")
    t.add_argument("--config", help="config file (TOML or JSON); defaults otherwise")
    t.add_argument("--seed", type=int, help="master seed override")
    t.add_argument("--envs", type=int, help="number of vectorized environments")
    t.add_argument("--iters", type=int, help="training iterations")
    t.add_argument("--out", help="output directory for metrics and checkpoints")
    t.add_argument("--resume", help="checkpoint to resume from")

    g = sub.add_parser("gen-morph", help="sample a compliance-parameter dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="config supplying the sampling ranges")

    e = sub.add_parser("eval", help="scripted rollout of a trained student")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--script", required=True, choices=SCRIPT_NAMES)
    e.add_argument("--out", required=True, help="analysis report CSV")
    e.add_argument("--config", help="config override (must match the checkpoint)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--duration", type=float, help="truncate the script (seconds)")
    e.add_argument("--noise", type=float, default=0.0, help="observation noise level")
    e.add_argument("--log", help="also export the trajectory log (csv or json)")

    a = sub.add_parser("analyze", help="tracking analysis of a recorded trajectory")
    a.add_argument("--log", required=True)
    a.add_argument("--report", required=True)
    a.add_argument("--config", help="config supplying the command envelope")

    s = sub.add_parser("serve", help="serve a student policy over a websocket")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--port", type=int, default=8765, help="0 picks a free port")
    s.add_argument("--noise", choices=("on", "off"), default="off")
    s.add_argument("--config", help="config override (must match the checkpoint)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--fast", action="store_true", help="drop real-time pacing")
    return p


def _fail(kind: str, code: int, msg: str) -> int:
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return code


def _read_config(path: str | None) -> Config:
    return load_config(path)


def cmd_train(args) -> int:
    cfg = _read_config(args.config)
    overrides = {}
    for flag, field in (("seed", "seed"), ("envs", "num_envs"),
                        ("iters", "iterations"), ("out", "out_dir")):
        value = getattr(args, flag)
        if value is not None:
            overrides[field] = value
    cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **overrides))
    cfg.validate()

    out = Path(cfg.train.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_meta = {
        "command": "train",
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "config_path": args.config,
        "overrides": overrides,
        "created": datetime.now(timezone.utc).isoformat(),
    }
    (out / "run.json").write_text(json.dumps(run_meta, indent=2, sort_keys=True) + "\n")

    history = train(cfg, resume_from=args.resume)
    print(f"trained {len(history)} iterations -> {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_gen_morph(args) -> int:
    cfg = _read_config(args.config)
    if args.count < 1:
        raise _UsageError(f"--count must be >= 1, got {args.count}")
    params = sample_morphologies(cfg.randomization, args.count, args.seed)
    save_morphology_dataset(args.out, params, cfg.randomization, args.seed)
    print(f"wrote {len(params)} morphologies -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _read_config(args.config) if args.config else None
    policy, cfg, _ = load_student_policy(args.checkpoint, cfg)
    script = command_scripts(cfg)[args.script]
    trajectory = rollout_scripted(
        policy, script, cfg,
        seed=args.seed, duration_s=args.duration, noise_level=args.noise,
    )
    if args.log:
        fmt = "json" if args.log.endswith(".json") else "csv"
        export_log(trajectory, args.log, format=fmt)
    rows = analyze_log(trajectory, cfg)
    write_report(rows, args.out)
    print(f"{args.script}: {trajectory.rows} steps, {len(rows)} segments -> {args.out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    trajectory = load_log(args.log)
    rows = analyze_log(trajectory, _read_config(args.config))
    write_report(rows, args.report)
    print(f"{len(rows)} segments -> {args.report}")
    return EXIT_OK


def cmd_serve(args) -> int:
    cfg = _read_config(args.config) if args.config else None
    policy, cfg, _ = load_student_policy(args.checkpoint, cfg)
    options = ServeOptions(
        host=args.host,
        port=args.port,
        seed=args.seed,
        noise_level=1.0 if args.noise == "on" else 0.0,
        fast=args.fast,
    )
    server = PolicyServer(policy, cfg, options)
    try:
        asyncio.run(server.run())
    except KeyboardInterrupt:
        pass
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "gen-morph": cmd_gen_morph,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "serve": cmd_serve,
}


def _log_level_from_env() -> int:
    name = os.environ.get("LUART_LOG", "warning").strip().lower()
    return {
        "debug": logging.DEBUG,
        "info": logging.INFO,
        "warning": logging.WARNING,
        "error": logging.ERROR,
    }.get(name, logging.WARNING)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(format="%(name)s %(levelname)s %(message)s")
    logging.getLogger("softquad").setLevel(_log_level_from_env())
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        return _fail("usage", EXIT_USAGE, str(e))
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as e:
        return _fail("usage", EXIT_USAGE, str(e))
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        return _fail("unreadable-file", EXIT_UNREADABLE, str(e))
    except CheckpointError as e:
        return _fail("schema-mismatch", EXIT_SCHEMA, str(e))
    except (ConfigError, json.JSONDecodeError) as e:
        return _fail("schema-mismatch", EXIT_SCHEMA, str(e))
    except ValueError as e:
        return _fail("schema-mismatch", EXIT_SCHEMA, str(e))
    except (TrainingError, SimFault) as e:
        return _fail("runtime", EXIT_RUNTIME, str(e))
    except OSError as e:
        return _fail("runtime", EXIT_RUNTIME, str(e))


if __name__ == "__main__":
    sys.exit(main())
