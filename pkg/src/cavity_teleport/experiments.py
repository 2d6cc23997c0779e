"""Monte Carlo trials and parameter sweeps over the protocol."""

from __future__ import annotations

import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .protocol import (
    ProtocolCache,
    ProtocolConfig,
    RoundCapExceeded,
    TrajectoryRecord,
    bell_click_probability,
    bell_prep_until_success,
    teleport_full,
    timing_budget,
)

SWEEPABLE = ("alpha", "eta_a", "eta_b", "flux", "tau_cav", "gt", "theta")
TRIAL_STAGES = ("bell", "teleport")


@dataclass(frozen=True)
class SweepSpec:
    param: str
    grid: tuple
    trials: int
    base: ProtocolConfig = field(default_factory=ProtocolConfig)
    stage: str = "teleport"

    def __post_init__(self):
        if self.param not in SWEEPABLE:
            raise ValueError(f"cannot sweep {self.param!r}; choose one of {', '.join(SWEEPABLE)}")
        object.__setattr__(self, "grid", tuple(self.grid))
        if not self.grid:
            raise ValueError("sweep grid is empty")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.stage not in TRIAL_STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    def configs(self) -> list[ProtocolConfig]:
        return [self.base.replace(**{self.param: v}) for v in self.grid]


@dataclass(frozen=True)
class StatsRow:
    value: Optional[float]
    n_trials: int
    n_censored: int
    mean_atoms: float
    mean_elapsed: float
    success_rate: float
    success_rate_se: float
    mean_fidelity: float
    fidelity_se: float
    tau_coeh: float
    expected_atoms: float
    feasible: Optional[bool]

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.columns()}


@dataclass
class StatsTable:
    param: Optional[str]
    rows: list[StatsRow]


@dataclass
class TrialResult:
    row: StatsRow
    records: list[TrajectoryRecord]
    censored: list[int]


def _se(x: np.ndarray) -> float:
    if x.size < 2:
        return 0.0
    return float(np.std(x, ddof=1) / math.sqrt(x.size))


def run_one(config: ProtocolConfig, index: int, stage: str = "teleport",
            cache: Optional[ProtocolCache] = None) -> TrajectoryRecord:
    """Trial ``index`` with its own RNG stream.

    A trial that hits a round cap comes back as its partial record with
    ``censored`` set.
    """
    rng = np.random.default_rng([config.seed, index])
    try:
        if stage == "bell":
            return bell_prep_until_success(config, rng, cache=cache)[1]
        return teleport_full(config, rng, cache=cache)
    except RoundCapExceeded as exc:
        return exc.record


def _run_chunk(config: ProtocolConfig, stage: str, indices: Sequence[int]):
    cache = None if config.decoherence else ProtocolCache(config)
    return [run_one(config, i, stage, cache) for i in indices]


def expected_cost(config: ProtocolConfig, stage: str = "teleport") -> tuple[float, bool]:
    """Analytic (expected atoms, feasible) for a stage run on its own."""
    if stage == "bell":
        p = bell_click_probability(config.replace(decoherence=False))
        atoms = math.inf if p <= 0 else 1.0 / p
        return atoms, atoms / config.flux < config.tau_coeh
    rep = timing_budget(config)
    return rep.expected_atoms, rep.feasible


def aggregate(records: Sequence[TrajectoryRecord], value=None,
              config: Optional[ProtocolConfig] = None, with_budget: bool = True,
              stage: str = "teleport") -> StatsRow:
    """Censored trials count in the rate denominator but not in the means."""
    n = len(records)
    done = [r for r in records if not r.censored]
    atoms = np.array([r.atoms_used for r in done], dtype=float)
    elapsed = np.array([r.elapsed_time for r in done], dtype=float)
    fid = np.array([r.final_fidelity for r in done], dtype=float)
    ok = np.array([1.0 if (not r.censored and r.succeeded_within_coherence) else 0.0 for r in records])
    tau_coeh = expected = math.nan
    feasible = None
    if config is not None:
        tau_coeh = config.tau_coeh
        if with_budget:
            expected, feasible = expected_cost(config, stage)
    return StatsRow(
        value=value,
        n_trials=n,
        n_censored=n - len(done),
        mean_atoms=float(atoms.mean()) if done else math.nan,
        mean_elapsed=float(elapsed.mean()) if done else math.nan,
        success_rate=float(ok.mean()) if n else math.nan,
        success_rate_se=_se(ok),
        mean_fidelity=float(fid.mean()) if done else math.nan,
        fidelity_se=_se(fid),
        tau_coeh=tau_coeh,
        expected_atoms=expected,
        feasible=feasible,
    )


def run_trials(config: ProtocolConfig, n_trials: int, stage: str = "teleport",
               workers: Optional[int] = None, value=None, with_budget: bool = True) -> TrialResult:
    """Independent seeded trajectories; trial i uses the RNG stream (seed, i).

    Results do not depend on ``workers``: each trial owns its stream and the
    records come back in trial order.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if stage not in TRIAL_STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    indices = list(range(n_trials))
    if workers and workers > 1:
        chunks = [indices[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, [config] * workers, [stage] * workers, chunks))
        records: list = [None] * n_trials
        for chunk, part in zip(chunks, parts):
            for i, rec in zip(chunk, part):
                records[i] = rec
    else:
        records = _run_chunk(config, stage, indices)
    censored = [i for i, r in enumerate(records) if r.censored]
    row = aggregate(records, value, config, with_budget, stage)
    return TrialResult(row, records, censored)


def sweep(spec: SweepSpec, workers: Optional[int] = None) -> StatsTable:
    rows = [run_trials(cfg, spec.trials, spec.stage, workers, value=v).row
            for v, cfg in zip(spec.grid, spec.configs())]
    return StatsTable(spec.param, rows)


@dataclass(frozen=True)
class FrequencyCheck:
    """Observed clicks against the sum of the recorded click probabilities.

    Each decision is an independent Bernoulli trial with its own probability q,
    so the click count has mean sum(q) and variance sum(q (1 - q)).
    """

    stage: str
    decisions: int
    clicks: int
    expected: float
    variance: float

    @property
    def frequency(self) -> float:
        return self.clicks / self.decisions

    @property
    def mean_probability(self) -> float:
        return self.expected / self.decisions

    @property
    def standard_error(self) -> float:
        return math.sqrt(self.variance) / self.decisions

    @property
    def z_score(self) -> float:
        if self.variance == 0:
            return 0.0 if self.clicks == round(self.expected) else math.inf
        return (self.clicks - self.expected) / math.sqrt(self.variance)


def click_frequencies(records: Sequence[TrajectoryRecord], eta_a: float,
                      by_probability: bool = False, digits: int = 12) -> list[FrequencyCheck]:
    """Compare click counts with the recorded click probabilities, pooled per stage.

    For target preparation the click probability of an attempt is eta_a; for
    every other stage it is the recorded probability of the click outcome.
    With ``by_probability`` the pools are further split by that probability.
    Censored records are included so that no decision is dropped.
    """
    pools: dict = defaultdict(lambda: [0, 0, 0.0, 0.0])
    for rec in records:
        for e in rec.entries:
            if e.stage == "target":
                q = eta_a
            else:
                q = e.probability if e.click else 1.0 - e.probability
            key = (e.stage, round(q, digits)) if by_probability else (e.stage,)
            pool = pools[key]
            pool[0] += 1
            pool[1] += int(e.click)
            pool[2] += q
            pool[3] += q * (1.0 - q)
    return [FrequencyCheck(key[0], n, c, m, v) for key, (n, c, m, v) in sorted(pools.items())]
