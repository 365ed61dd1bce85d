"""Command-line entry point: generate, validate, diagnose, learn, evaluate.

Exit codes: 0 success, 2 configuration error, 3 I/O error (including
unreadable or malformed input files), 4 missing artifact (summary sidecar
or policy file), 5 protocol violation (invalid log, multi-slot log given to
``learn --strict``).
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import estimators as est
from .data import LoggedData
from .features import Featurizer, parse_crosses
from .learners import METHODS, HyperGrid, LearningError, run_benchmark
from .logformat import (LogFormatError, ParseError, open_log_for_writing, read_log,
                        validate_log)
from .policies import (EpsilonMixturePolicy, Policy, UniformPolicy, policy_from_text,
                       policy_to_text)
from .simulator import (ConfigError, GroundTruthModel, WorldConfig, generate_log,
                        read_key_values)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_MISSING, EXIT_PROTOCOL = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def summary_path(log_path: str) -> str:
    return f"{log_path}.summary"


# ---------------------------------------------------------------------------
# configuration


def _load_config(args) -> dict:
    kv = {}
    if args.config:
        try:
            kv = read_key_values(args.config)
        except OSError as exc:
            raise CliError(EXIT_CONFIG, f"cannot read config {args.config}: {exc}") from None
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    return kv


def _world_config(kv: dict) -> WorldConfig:
    world = {k: v for k, v in kv.items() if not k.startswith(("grid.", "learn.", "eps_grid"))}
    unknown = set(world) - {f.name for f in dataclasses.fields(WorldConfig)}
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return WorldConfig.from_mapping(world)


def _seed(kv: dict) -> int:
    if "seed" not in kv:
        raise ConfigError("seed is mandatory (config key 'seed' or --seed)")
    try:
        return int(kv["seed"])
    except ValueError:
        raise ConfigError(f"seed must be an integer, got {kv['seed']!r}") from None


def _eps_grid(kv: dict) -> tuple:
    if "eps_grid" not in kv:
        return est.DEFAULT_EPS_GRID
    try:
        grid = tuple(float(v) for v in kv["eps_grid"].split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"malformed eps_grid {kv['eps_grid']!r}") from None
    if not grid or any(not 0 <= e <= 1 for e in grid):
        raise ConfigError("eps_grid values must lie in [0, 1]")
    return grid


def _load_world(log_path: str) -> tuple:
    """World config and summary counts from the sidecar next to ``log_path``."""
    path = summary_path(log_path)
    if not os.path.exists(path):
        raise CliError(EXIT_MISSING, f"summary sidecar {path} not found; the logging "
                                     "replica cannot be rebuilt")
    kv = read_key_values(path)
    world = {k[len("world."):]: v for k, v in kv.items() if k.startswith("world.")}
    return WorldConfig.from_mapping(world), kv


def _logging_replica(log_path: str) -> Policy:
    config, _ = _load_world(log_path)
    return GroundTruthModel.from_config(config).logging_policy(config.logging_temperature)


def _read_records(path: str, strict: bool = True) -> list:
    if not os.path.exists(path):
        raise CliError(EXIT_IO, f"log {path} not found")
    errors: list = []
    records = read_log(path, strict=strict, errors=errors)
    for e in errors:
        print(f"warning: skipped impression: {e}", file=sys.stderr)
    return records


def _emit(text: str, output: str | None) -> None:
    if output:
        with open(output, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def load_policy(source: str, log_path: str | None) -> Policy:
    """``uniform``, ``logging`` (replica from the sidecar) or a policy file path.

    A policy file may also say ``kind=logging`` (optionally with
    ``epsilon=``) to refer to the replica of the log being evaluated.
    """
    if source == "uniform":
        return UniformPolicy()
    if source == "logging":
        return _logging_replica(log_path)
    try:
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(EXIT_MISSING, f"cannot read policy file {source}: {exc}") from None
    kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line
              and not line.lstrip().startswith("#"))
    kind = kv.get("kind", "").strip()
    try:
        if kind == "logging":
            return _logging_replica(log_path)
        if kind == "epsilon_mixture" and kv.get("base.kind", "").strip() == "logging":
            return EpsilonMixturePolicy(float(kv["epsilon"]), _logging_replica(log_path))
        return policy_from_text(text)
    except (ValueError, KeyError) as exc:
        raise CliError(EXIT_MISSING, f"unusable policy file {source}: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    kv = _load_config(args)
    _seed(kv)
    config = _world_config(kv)
    if not args.output:
        raise ConfigError("generate needs --output PATH")
    try:
        with open_log_for_writing(args.output) as out:
            summary = generate_log(config, None, out)
        side = "".join(f"world.{line}\n" for line in config.to_text().splitlines())
        with open(summary_path(args.output), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(side + summary.to_text())
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {args.output}: {exc}") from None
    sys.stdout.write(summary.to_text())
    return EXIT_OK


def cmd_validate(args) -> int:
    records = _read_records(args.input, strict=True)
    rep = validate_log(records)
    lines = [f"records={rep.n_records}"]
    lines += [f"slots_{k}={v}" for k, v in sorted(rep.slot_counts.items())]
    lines += [f"min_propensity={rep.min_propensity!r}", f"max_propensity={rep.max_propensity!r}"]
    mismatches = 0
    if os.path.exists(summary_path(args.input)) and records:
        replica = _logging_replica(args.input)
        data = LoggedData.from_records(records, 1.0)
        recomputed = replica.prob(data.contexts, data.rankings)
        mismatches = int(np.sum(np.abs(recomputed - data.propensity) > 1e-12 * data.propensity))
        lines.append(f"propensity_mismatches={mismatches}")
    lines += [f"violation: {v}" for v in rep.violations]
    _emit("\n".join(lines) + "\n", args.output)
    return EXIT_OK if rep.ok and not mismatches else EXIT_PROTOCOL


def cmd_diagnose(args) -> int:
    kv = _load_config(args)
    eps = _eps_grid(kv)
    config, _ = _load_world(args.input)
    records = _read_records(args.input, strict=args.strict)
    if not records:
        raise CliError(EXIT_PROTOCOL, "empty log")
    replica = GroundTruthModel.from_config(config).logging_policy(config.logging_temperature)
    data = LoggedData.from_records(records, config.subsample_keep_prob)
    stats = est.propensity_stats(data, config.subsample_keep_prob)
    reports = est.diagnostic_sweep(data, replica, eps)
    text = est.propensity_table(stats, args.format)
    text += ("\n" if args.format == "tsv" else "") + est.sweep_table(reports, eps, args.format)
    _emit(text, args.output)
    return EXIT_OK


def cmd_learn(args) -> int:
    kv = _load_config(args)
    seed = _seed(kv) if "seed" in kv else 0
    grid = HyperGrid.from_mapping({**kv, "grid.seed": kv.get("grid.seed", str(seed))})
    methods = tuple(m.strip() for m in kv.get("learn.methods", ",".join(METHODS)).split(","))
    if set(methods) - set(METHODS):
        raise ConfigError(f"unknown methods in learn.methods: {methods}")
    bits = int(kv.get("learn.hash_bits", "18"))
    policy_fz = Featurizer(dim=2 ** bits, crosses=parse_crosses(kv.get("learn.crosses", "")))
    reg_fz = Featurizer(dim=2 ** bits,
                        crosses=parse_crosses(kv.get("learn.regression_crosses", "")))
    config, _ = _load_world(args.input)
    records = _read_records(args.input, strict=True)
    multi = sum(r.nb_slots != 1 for r in records)
    if multi and args.strict:
        raise CliError(EXIT_PROTOCOL, f"{multi} multi-slot impressions; learners need a "
                                      "1-slot log (drop --strict to skip them)")
    records = [r for r in records if r.nb_slots == 1]
    if not records:
        raise CliError(EXIT_PROTOCOL, "no 1-slot impressions to learn from")
    replica = GroundTruthModel.from_config(config).logging_policy(config.logging_temperature)
    data = LoggedData.from_records(records, config.subsample_keep_prob)
    try:
        result = run_benchmark(data, replica, policy_fz, reg_fz, grid, split_seed=seed,
                               methods=methods)
    except LearningError as exc:
        raise CliError(EXIT_PROTOCOL, str(exc)) from None
    _emit(result.table(args.format), args.output)
    if args.policy_dir:
        os.makedirs(args.policy_dir, exist_ok=True)
        for r in result.reports:
            if r.method in METHODS:
                with open(os.path.join(args.policy_dir, f"{r.method}.policy"), "w",
                          encoding="utf-8", newline="\n") as fh:
                    fh.write(policy_to_text(r.policy))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if not args.policy:
        raise ConfigError("evaluate needs --policy (a file, 'uniform' or 'logging')")
    kv = _load_config(args) if args.config else {}
    if not os.path.exists(args.input):
        raise CliError(EXIT_IO, f"log {args.input} not found")
    policy = load_policy(args.policy, args.input)
    keep = float(kv.get("subsample_keep_prob", "nan"))
    if np.isnan(keep):
        keep = _load_world(args.input)[0].subsample_keep_prob \
            if os.path.exists(summary_path(args.input)) else 0.1
    records = _read_records(args.input, strict=args.strict)
    if not records:
        raise CliError(EXIT_PROTOCOL, "empty log")
    data = LoggedData.from_records(records, keep)
    report = est.evaluate_policy(data, policy)
    if args.format == "jsonl":
        text = est.format_jsonl([report.as_dict()])
    else:
        text = est.format_tsv(("policy",) + est.SWEEP_COLUMNS[1:],
                              [est.report_row(report.label or "policy", report)])
    _emit(text, args.output)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "validate": cmd_validate, "diagnose": cmd_diagnose,
            "learn": cmd_learn, "evaluate": cmd_evaluate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blbf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key=value configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output", help="output path (tables go to stdout otherwise)")
        sp.add_argument("--format", choices=("tsv", "jsonl"), default="tsv")
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="accepted for interface compatibility; work runs in one thread")
        sp.add_argument("--strict", action="store_true")
        if name != "generate":
            sp.add_argument("--input", required=True, help="log file (.gz for gzip)")
        if name == "evaluate":
            sp.add_argument("--policy", help="policy file, 'uniform' or 'logging'")
        if name == "learn":
            sp.add_argument("--policy-dir", help="write the learned policies here")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, LogFormatError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
