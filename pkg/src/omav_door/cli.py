"""Command line entry point: ``omav-door train | eval | replay``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import yaml

from omav_door import __version__
from omav_door.config import ConfigError, RunConfig, load_config, to_dict
from omav_door.env import REWARD_WEIGHTS, TRACE_COLUMNS, EpisodeConfig, DoorEnv, reward_from_quantities

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
MANIFEST_NAME = "run_manifest.json"

log = logging.getLogger("omav_door")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="omav-door", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--seed", type=int, help="overrides ppo.seed / the sweep seed")
        p.add_argument("--out", required=True, help="output directory")

    train = sub.add_parser("train", help="train a policy with PPO")
    common(train)

    ev = sub.add_parser("eval", help="run a robustness sweep")
    common(ev)
    ev.add_argument("--controller", choices=("policy", "mppi"))
    ev.add_argument("--checkpoint")
    ev.add_argument("--experiment", choices=("initial_distance", "lateral_offset", "vertical_offset",
                                             "door_closing"))
    ev.add_argument("--spec", help="YAML experiment spec (fields of ExperimentSpec)")
    ev.add_argument("--values", type=float, nargs="+")
    ev.add_argument("--trials", type=int)
    ev.add_argument("--timeout", type=float)
    ev.add_argument("--traces", action="store_true", help="write per-trial trace CSVs")

    rp = sub.add_parser("replay", help="re-derive rewards from a trace CSV")
    rp.add_argument("trace")
    rp.add_argument("--config", help="YAML run config (episode thresholds)")
    rp.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")
    rp.add_argument("--tolerance", type=float, default=1e-9)
    rp.add_argument("--verbose", action="store_true", help="print every row")
    return parser


# ----------------------------------------------------------------------------
# Manifest
# ----------------------------------------------------------------------------

def write_manifest(out: Path, command: str, cfg: RunConfig, seed: int, extra: dict | None = None,
                   started: float | None = None, finished: float | None = None) -> Path:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": to_dict(cfg),
        "seed": seed,
        "out_dir": str(out),
        "version": {"omav_door": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "started_at": started,
        "finished_at": finished,
    }
    manifest.update(extra or {})
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------

def cmd_train(args) -> int:
    from omav_door.ppo import train_loop

    cfg = load_config(args.config, args.override)
    if args.seed is not None:
        cfg = replace(cfg, ppo=replace(cfg.ppo, seed=args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    write_manifest(out, "train", cfg, cfg.ppo.seed, started=started)

    def env_factory(n, seed):
        return DoorEnv(n, seed, cfg.episode, cfg.gains, cfg.geometry, cfg.randomization)

    _, rows = train_loop(cfg.ppo, env_factory, out, metadata={"config": to_dict(cfg)})
    write_manifest(out, "train", cfg, cfg.ppo.seed, started=started, finished=time.time())
    if sum(int(r["aborted"]) for r in rows) > 1:
        log.error("training stopped after repeated non-finite updates")
        return EXIT_RUNTIME
    return EXIT_OK


def _experiment_spec(args):
    from omav_door.evaluation import ExperimentSpec

    data = {}
    if args.spec:
        try:
            data = yaml.safe_load(Path(args.spec).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read experiment spec {args.spec}: {exc}") from exc
        names = {f.name for f in fields(ExperimentSpec)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"{args.spec}: unknown experiment keys: {', '.join(unknown)}")
    flags = {"kind": args.experiment, "controller": args.controller, "checkpoint": args.checkpoint,
             "values": tuple(args.values) if args.values else None, "trials_per_value": args.trials,
             "timeout_seconds": args.timeout, "seed": args.seed}
    data.update({k: v for k, v in flags.items() if v is not None})
    if "kind" not in data:
        raise ConfigError("eval needs --experiment or a spec file with 'kind'")
    if "values" in data:
        data["values"] = tuple(data["values"])
    try:
        return ExperimentSpec(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_eval(args) -> int:
    from omav_door.evaluation import EvaluationError, make_controller, run_sweep, write_results

    cfg = load_config(args.config, args.override)
    spec = _experiment_spec(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    extra = {"experiment": {f.name: getattr(spec, f.name) for f in fields(spec)}}
    write_manifest(out, "eval", cfg, spec.seed, extra, started=started)
    try:
        controller = make_controller(spec, cfg.geometry, cfg.gains, cfg.mppi)
    except EvaluationError as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME

    def progress(row):
        log.info("%s value %r: %d/%d successes", row.experiment, row.value, row.successes, row.trials)

    rows = run_sweep(spec, cfg.geometry, cfg.gains, cfg.episode, cfg.randomization, cfg.mppi,
                     controller=controller, trace_dir=out / "traces" if args.traces else None,
                     progress=progress)
    write_results(out / "results.csv", rows)
    write_manifest(out, "eval", cfg, spec.seed, extra, started=started, finished=time.time())
    return EXIT_OK


class TraceError(ValueError):
    pass


def read_trace(path) -> list[tuple[int, dict]]:
    """Rows of a trace CSV keyed by column, with their 1-based line numbers."""
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        if tuple(header) != tuple(TRACE_COLUMNS):
            raise TraceError(f"line 1: unexpected header (expected {len(TRACE_COLUMNS)} trace columns)")
        for fields_ in reader:
            line = reader.line_num
            if not fields_:
                continue
            if len(fields_) != len(TRACE_COLUMNS):
                raise TraceError(f"line {line}: expected {len(TRACE_COLUMNS)} fields, got {len(fields_)}")
            try:
                values = [float(x) for x in fields_]
            except ValueError as exc:
                raise TraceError(f"line {line}: {exc}") from exc
            rows.append((line, dict(zip(TRACE_COLUMNS, values))))
    return rows


def replay_row(row: dict, episode: EpisodeConfig) -> dict:
    """Reward components and total re-derived from one trace row."""
    def vec(prefix):
        return np.array([row[f"{prefix}_{a}"] for a in "xyz"])

    rot = np.array([[row[f"rot_bd_{i}{j}"] for j in range(3)] for i in range(3)])
    wrench = np.concatenate([vec("force"), vec("torque")])
    reward = reward_from_quantities(vec("p_hd"), rot, row["alpha"], row["alpha_target"], vec("lin_vel"),
                                    vec("ang_vel"), wrench, episode)
    out = {k: float(v) for k, v in reward.components().items()}
    out["total"] = float(reward.total)
    return out


def cmd_replay(args) -> int:
    cfg = load_config(args.config, args.override)
    try:
        rows = read_trace(args.trace)
    except OSError as exc:
        raise ConfigError(f"cannot read trace {args.trace}: {exc}") from exc
    except TraceError as exc:
        print(f"{args.trace}: malformed trace: {exc}", file=sys.stderr)
        return EXIT_USAGE
    divergences = 0
    for line, row in rows:
        derived = replay_row(row, cfg.episode)
        bad = [k for k in (*REWARD_WEIGHTS, "total")
               if not abs(derived[k] - row[k]) <= args.tolerance or math.isnan(derived[k]) != math.isnan(row[k])]
        if args.verbose:
            print(f"line {line}: t={row['time']!r} alpha={row['alpha']!r} total={row['total']!r}"
                  f" recomputed={derived['total']!r}")
        if bad:
            if divergences == 0:
                k = bad[0]
                print(f"first divergence at line {line} (t={row['time']!r}): {k} logged {row[k]!r}"
                      f" recomputed {derived[k]!r}")
            divergences += 1
    print(f"{len(rows)} rows checked, {divergences} divergent")
    return EXIT_OK if divergences == 0 else EXIT_RUNTIME


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "replay": cmd_replay}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"omav-door: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"omav-door: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # anything unexpected is a runtime failure, not a usage error
        log.exception("%s failed: %s", args.command, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
