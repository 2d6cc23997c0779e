"""Command-line entry point: ``cavity-teleport <command> [options]``.

Exit status: 0 on success, 2 for configuration errors, 3 when a forced
outcome is impossible, 4 when a round cap is exceeded.
"""

from __future__ import annotations

import argparse
import io
import json
import math
import sys
from typing import Optional, Sequence

import numpy as np

from .config import ECHO_PREFIX, config_items, format_value, load_config, parse_value
from .experiments import SWEEPABLE, TRIAL_STAGES, StatsRow, SweepSpec, run_trials, sweep
from .hilbert import ImpossibleOutcome
from .protocol import (
    STAGES,
    ConfigError,
    ProtocolConfig,
    RoundCapExceeded,
    TrajectoryRecord,
    bell_click_probability,
    bell_fidelities,
    bell_prep_until_success,
    prepare_target,
    teleport_full,
    timing_budget,
)

EXIT_OK, EXIT_CONFIG, EXIT_IMPOSSIBLE, EXIT_ROUND_CAP = 0, 2, 3, 4

OUTCOMES = {
    "bell": ("click", "fail", "g"),
    "entangle": ("click", "fail", "g"),
    "target": ("e", "g", "miss"),
    "b": ("both-a", "fail"),
}

ROUND_COLUMNS = ["round", "stage", "atom", "outcome", "probability", "click"]
BUDGET_COLUMNS = ["value", "tau_coeh", "window_atoms", "expected_atoms", "expected_time",
                  "feasible", "success_probability"]


class Document:
    """Result scalars plus an optional table, rendered as CSV or JSON."""

    def __init__(self, command: str, config: ProtocolConfig, run: Optional[dict] = None):
        self.command = command
        self.config = config
        self.run = run or {}
        self.result: dict = {}
        self.columns: list[str] = []
        self.rows: list[list] = []
        self.table_name = "rows"

    def set_table(self, name: str, columns: list[str], rows: list[list]) -> None:
        self.table_name, self.columns, self.rows = name, columns, rows

    def render(self, fmt: str) -> str:
        return self._nested() if fmt == "nested" else self._table()

    def _table(self) -> str:
        out = io.StringIO()
        out.write(f"# cavity-teleport {self.command}\n")
        for k, v in config_items(self.config):
            out.write(f"{ECHO_PREFIX}{k} = {v}\n")
        for k, v in self.run.items():
            out.write(f"# run: {k} = {_text(v)}\n")
        for k, v in self.result.items():
            out.write(f"# result: {k} = {_text(v)}\n")
        if self.columns:
            out.write(",".join(self.columns) + "\n")
            for row in self.rows:
                out.write(",".join(_text(v) for v in row) + "\n")
        return out.getvalue()

    def _nested(self) -> str:
        doc = {
            "command": self.command,
            "config": dict(config_items(self.config)),
            "run": {k: _json(v) for k, v in self.run.items()},
            "result": {k: _json(v) for k, v in self.result.items()},
        }
        if self.columns:
            doc[self.table_name] = [{c: _json(v) for c, v in zip(self.columns, row)} for row in self.rows]
        return json.dumps(doc, indent=2) + "\n"


def _text(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (complex, np.complexfloating)):
        return format_value(complex(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _json(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (complex, np.complexfloating)):
        return format_value(complex(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def parse_forced(text: Optional[str], default_stage: str) -> Optional[dict]:
    """``"bell=click;b=fail,both-a"`` -> {"bell": [...], "b": [...]}; a bare list goes to ``default_stage``."""
    if not text:
        return None
    forced: dict = {}
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        stage, _, seq = part.rpartition("=")
        stage = stage.strip() or default_stage
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r} in --force-outcomes; choose from {', '.join(STAGES)}")
        outcomes = [s.strip() for s in seq.split(",") if s.strip()]
        for o in outcomes:
            if o not in OUTCOMES[stage]:
                raise ConfigError(f"unknown outcome {o!r} for stage {stage}; "
                                  f"choose from {', '.join(OUTCOMES[stage])}")
        forced.setdefault(stage, []).extend(outcomes)
    return forced


def parse_grid(param: str, text: str) -> tuple:
    values = [parse_value(param, s) for s in text.split(",") if s.strip()]
    if not values:
        raise ConfigError("--grid is empty")
    return tuple(values)


def resolve_config(args) -> ProtocolConfig:
    config = load_config(args.config) if args.config else ProtocolConfig()
    changes = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        changes[key.strip()] = parse_value(key.strip(), value)
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.decoherence is not None:
        changes["decoherence"] = args.decoherence == "on"
    try:
        return config.replace(**changes)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _round_rows(record: TrajectoryRecord) -> list[list]:
    return [[i, e.stage, e.atom, e.outcome, e.probability, e.click]
            for i, e in enumerate(record.entries)]


def _record_result(record: TrajectoryRecord) -> dict:
    out = {
        "censored": record.censored,
        "atoms_used": record.atoms_used,
        "elapsed_time": record.elapsed_time,
        "tau_coeh": record.tau_coeh,
        "succeeded_within_coherence": record.succeeded_within_coherence,
        "final_fidelity": record.final_fidelity,
    }
    for stage, n in record.stage_atoms.items():
        out[f"atoms_{stage}"] = n
    if record.target is not None:
        out.update(target_outcome=record.target.outcome, y1=record.target.y1, y2=record.target.y2)
    return out


def _single_run(doc: Document, run, fill=None) -> None:
    """Fill ``doc`` from one trajectory; a censored run still yields its partial record."""
    try:
        record, extra = run()
    except RoundCapExceeded as exc:
        if exc.record is not None:
            doc.result.update(_record_result(exc.record))
            doc.result["stop_reason"] = str(exc)
            doc.set_table("rounds", ROUND_COLUMNS, _round_rows(exc.record))
            exc.document = doc
        raise
    doc.result.update(_record_result(record))
    if fill is not None:
        fill(extra)
    doc.set_table("rounds", ROUND_COLUMNS, _round_rows(record))


def _stats_table(doc: Document, rows: Sequence[StatsRow]) -> None:
    doc.set_table("stats", StatsRow.columns(), [[getattr(r, c) for c in StatsRow.columns()] for r in rows])


def _check_trials(args, forced) -> None:
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    if forced and args.trials > 1:
        raise ConfigError("--force-outcomes applies to a single trajectory; use --trials 1")


def cmd_bell_prep(args, config: ProtocolConfig) -> Document:
    forced = parse_forced(args.force_outcomes, "bell")
    _check_trials(args, forced)
    doc = Document("bell-prep", config, {"trials": args.trials})
    if args.trials == 1:
        def run():
            state, record = bell_prep_until_success(config, np.random.default_rng([config.seed, 0]), forced)
            return record, state

        def fill(state):
            for kind, f in bell_fidelities(state, config).items():
                doc.result[f"fidelity_{kind}"] = f

        _single_run(doc, run, fill)
        return doc
    res = run_trials(config, args.trials, "bell", args.workers)
    p = bell_click_probability(config.replace(decoherence=False))
    done = [r.atoms_used for r in res.records if not r.censored]
    mean = float(np.mean(done)) if done else math.nan
    se = float(np.std(done, ddof=1) / math.sqrt(len(done))) if len(done) > 1 else math.nan
    doc.result.update(click_probability=p, geometric_mean=1.0 / p if p > 0 else math.inf,
                      mean_atoms=mean, mean_atoms_se=se,
                      geometric_z=(mean - 1.0 / p) / se if p > 0 and se > 0 else math.nan)
    _stats_table(doc, [res.row])
    return doc


def cmd_prepare_target(args, config: ProtocolConfig) -> Document:
    forced = parse_forced(args.force_outcomes, "target")
    doc = Document("prepare-target", config)
    def run():
        _, record = prepare_target(config, np.random.default_rng([config.seed, 0]), forced)
        return record, record

    def fill(record):
        # Born probability of the recorded outcome, without the detector factor
        doc.result["outcome_probability"] = record.entries[-1].probability / config.eta_a

    _single_run(doc, run, fill)
    return doc


def cmd_teleport(args, config: ProtocolConfig) -> Document:
    forced = parse_forced(args.force_outcomes, "bell")
    _check_trials(args, forced)
    doc = Document("teleport", config, {"trials": args.trials})
    if args.trials == 1:
        _single_run(doc, lambda: (teleport_full(config, np.random.default_rng([config.seed, 0]), forced), None))
        return doc
    res = run_trials(config, args.trials, "teleport", args.workers)
    _stats_table(doc, [res.row])
    return doc


def cmd_sweep(args, config: ProtocolConfig) -> Document:
    if args.param not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {args.param!r}; choose one of {', '.join(SWEEPABLE)}")
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    grid = parse_grid(args.param, args.grid)
    try:
        spec = SweepSpec(args.param, grid, args.trials, config, args.stage)
        configs = spec.configs()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    del configs
    doc = Document("sweep", config, {"param": args.param, "trials": args.trials, "stage": args.stage})
    _stats_table(doc, sweep(spec, args.workers).rows)
    return doc


def _budget_row(value, config: ProtocolConfig) -> list:
    rep = timing_budget(config)
    return [value, rep.tau_coeh, rep.window_atoms, rep.expected_atoms, rep.expected_time,
            rep.feasible, rep.success_probability]


def cmd_feasibility(args, config: ProtocolConfig) -> Document:
    doc = Document("feasibility", config)
    if args.param is None:
        if args.grid is not None:
            raise ConfigError("--grid needs --param")
        rep = timing_budget(config)
        doc.result.update(tau_coeh=rep.tau_coeh, window_atoms=rep.window_atoms,
                          expected_atoms=rep.expected_atoms, expected_time=rep.expected_time,
                          feasible=rep.feasible, success_probability=rep.success_probability)
        for stage, n in rep.stage_atoms.items():
            doc.result[f"expected_atoms_{stage}"] = n
        return doc
    if args.param not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {args.param!r}; choose one of {', '.join(SWEEPABLE)}")
    if args.grid is None:
        raise ConfigError("--param needs --grid")
    doc.run["param"] = args.param
    rows = []
    for v in parse_grid(args.param, args.grid):
        rows.append(_budget_row(v, config.replace(**{args.param: v})))
    doc.set_table("budget", BUDGET_COLUMNS, rows)
    return doc


COMMANDS = {
    "bell-prep": cmd_bell_prep,
    "prepare-target": cmd_prepare_target,
    "teleport": cmd_teleport,
    "sweep": cmd_sweep,
    "feasibility": cmd_feasibility,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--decoherence", choices=("on", "off"))
    common.add_argument("--format", choices=("table", "nested"), default="table")
    common.add_argument("--out", help="write the document here instead of stdout")
    common.add_argument("--workers", type=int, default=1, help="worker processes for trials")

    parser = argparse.ArgumentParser(prog="cavity-teleport",
                                     description="Cavity-QED cat-state teleportation simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bell-prep", parents=[common], help="Bell-state preparation loop")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--force-outcomes", help="e.g. 'fail,click' or 'bell=fail,click'")

    p = sub.add_parser("prepare-target", parents=[common], help="prepare the state to teleport in C3")
    p.add_argument("--force-outcomes", help="e.g. 'miss,e' or 'target=g'")

    p = sub.add_parser("teleport", parents=[common], help="full protocol")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--force-outcomes", help="e.g. 'bell=click;target=e;entangle=click;b=fail,both-a'")

    p = sub.add_parser("sweep", parents=[common], help="Monte Carlo statistics over a parameter grid")
    p.add_argument("--param", required=True, help=f"one of {', '.join(SWEEPABLE)}")
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--stage", choices=TRIAL_STAGES, default="teleport")

    p = sub.add_parser("feasibility", parents=[common], help="analytic timing budget")
    p.add_argument("--param", help="optional parameter to tabulate")
    p.add_argument("--grid", help="comma-separated values for --param")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    status = EXIT_OK
    try:
        config = resolve_config(args)
        doc = COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"cavity-teleport: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ImpossibleOutcome as exc:
        print(f"cavity-teleport: impossible forced outcome: {exc}", file=sys.stderr)
        return EXIT_IMPOSSIBLE
    except RoundCapExceeded as exc:
        print(f"cavity-teleport: {exc}", file=sys.stderr)
        doc = getattr(exc, "document", None)
        if doc is None:
            return EXIT_ROUND_CAP
        status = EXIT_ROUND_CAP
    _emit(doc.render(args.format), args.out)
    return status


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


if __name__ == "__main__":
    sys.exit(main())
