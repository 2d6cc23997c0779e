"""Bell preparation, target preparation and the teleportation stages.

Every round is a deterministic function of the input state and the outcome;
randomness only enters through the outcome draw.  A failed detection traces
the atom (or atom pair) out of the register.

Registers are labeled C1, C2, C3 for the cavities, A for a three-level atom
and B2, B3 for the resonant atoms.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .dynamics import (
    A_UP,
    B_LOW,
    E,
    G,
    DispersiveParams,
    JCParams,
    RamseyParams,
    damping_channel,
    damping_population_map,
    dispersive_phases,
    jc_gate,
    jc_population_maps,
    ramsey_r1,
    ramsey_r3,
)
from .fock import (
    FieldState,
    FockCutoff,
    TruncationError,
    cat_normalization,
    coherent_state,
    displacement_matrix,
    even_cat,
    odd_cat,
    required_n_max,
)
from .hilbert import (
    EPS_PROB,
    DensityMatrix,
    ImpossibleOutcome,
    PureState,
    SubsystemLayout,
    apply_kraus,
    apply_map,
    apply_unitary,
    fidelity,
    partial_trace,
    postselect,
    tensor,
    trace_distance,
)

PROTOCOL_MAX_DIM = 2**21
# Kraus operators of a damping step lighter than this are dropped
DAMPING_KRAUS_TOL = 1e-16
# trace distance below which a failed round is taken to have reached its fixed point
STATIONARY_TOL = 1e-13

A_PLUS = np.array([1.0, 1.0], dtype=complex) / math.sqrt(2.0)
KET_E = np.array([1.0, 0.0], dtype=complex)
KET_G = np.array([0.0, 1.0], dtype=complex)
KET_A = np.eye(2, dtype=complex)[A_UP]
KET_B = np.eye(2, dtype=complex)[B_LOW]

STAGES = ("bell", "target", "entangle", "b")


class ConfigError(ValueError):
    """Invalid protocol or experiment configuration."""


class RoundCapExceeded(RuntimeError):
    """A stage did not succeed within its round cap.

    ``exhausted`` marks a stage stopped early because the probability of any
    later success had dropped below the impossibility threshold.
    """

    def __init__(self, stage: str, cap: int, exhausted: bool = False):
        why = "ran out of success probability after" if exhausted else "exceeded the round cap of"
        super().__init__(f"stage {stage!r} {why} {cap} rounds")
        self.stage = stage
        self.cap = cap
        self.exhausted = exhausted
        # the partial record of the trajectory, attached by the stage drivers
        self.record: Optional[TrajectoryRecord] = None


def _tail_exhausted(q: float, q_prev: Optional[float]) -> bool:
    """True once a geometrically decaying click probability has a tail sum below EPS_PROB."""
    if q_prev is None or q >= q_prev or q_prev <= 0:
        return False
    return q / (1.0 - q / q_prev) < EPS_PROB


# ---------------------------------------------------------------------------
# configuration and records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProtocolConfig:
    """Flat parameter set for one protocol run.

    ``n_max`` is the basis size for cavities holding +/-alpha and
    ``n_max_injected`` the one for C2/C3 after injection; ``None`` means the
    truncation rule for alpha and 2*alpha respectively.  ``gt=None`` selects
    the default B-atom pulse area.
    """

    alpha: complex = 2.0
    n_max: Optional[int] = None
    n_max_injected: Optional[int] = None
    kappa_eh: float = 1.0
    delta_eh: float = 1.0
    tau: float = math.pi
    kappa_eg: float = 0.0
    delta_eg: float = 1.0
    gt: Optional[float] = None
    theta: float = 0.0
    c_e: complex = 1.0
    c_g: complex = 0.0
    eta_a: float = 0.5
    eta_b: float = 0.5
    flux: float = 2500.0
    tau_cav: float = 0.1
    decoherence: bool = False
    seed: int = 42
    round_cap: int = 100_000
    max_dim: int = PROTOCOL_MAX_DIM

    def __post_init__(self):
        alpha = complex(self.alpha)
        object.__setattr__(self, "alpha", alpha.real if alpha.imag == 0 else alpha)
        object.__setattr__(self, "c_e", complex(self.c_e))
        object.__setattr__(self, "c_g", complex(self.c_g))
        if self.alpha == 0:
            raise ConfigError("alpha must be nonzero")
        norm = abs(self.c_e) ** 2 + abs(self.c_g) ** 2
        if abs(norm - 1.0) > 1e-9:
            raise ConfigError(f"|c_e|^2 + |c_g|^2 = {norm!r}, expected 1")
        for name in ("eta_a", "eta_b"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v!r}")
        if self.flux <= 0:
            raise ConfigError(f"flux must be positive, got {self.flux!r}")
        if self.tau_cav <= 0:
            raise ConfigError(f"tau_cav must be positive, got {self.tau_cav!r}")
        if self.round_cap < 1:
            raise ConfigError("round_cap must be >= 1")
        if self.gt is not None and self.gt < 0:
            raise ConfigError("gt must be non-negative")
        if self.delta_eh == 0 or self.delta_eg == 0:
            raise ConfigError("detunings must be nonzero")
        try:
            self.cutoff.check(self.alpha)
            self.injected_cutoff.check(2 * self.alpha)
        except (TruncationError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes) -> ProtocolConfig:
        return dataclasses.replace(self, **changes)

    @property
    def cutoff(self) -> FockCutoff:
        return FockCutoff(self.n_max if self.n_max is not None else required_n_max(self.alpha))

    @property
    def injected_cutoff(self) -> FockCutoff:
        n = self.n_max_injected
        return FockCutoff(n if n is not None else required_n_max(2 * self.alpha))

    @property
    def dispersive(self) -> DispersiveParams:
        return DispersiveParams(self.kappa_eh, self.delta_eh, self.tau, self.kappa_eg, self.delta_eg)

    @property
    def jc(self) -> JCParams:
        if self.gt is None:
            return JCParams.default_for(self.alpha)
        return JCParams.from_area(self.gt)

    @property
    def ramsey(self) -> RamseyParams:
        return RamseyParams(self.theta)

    @property
    def detector_a(self) -> DetectorModel:
        return DetectorModel(self.eta_a, "selective")

    @property
    def detector_b(self) -> DetectorModel:
        return DetectorModel(self.eta_b, "two-outcome")

    @property
    def kappa(self) -> float:
        return 1.0 / self.tau_cav

    @property
    def slot_time(self) -> float:
        return 1.0 / self.flux

    @property
    def tau_coeh(self) -> float:
        return coherence_time(self.tau_cav, self.alpha)


@dataclass(frozen=True)
class DetectorModel:
    """``selective`` clicks only on |e> (A atoms); ``two-outcome`` resolves both levels."""

    efficiency: float
    mode: str = "selective"

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError(f"efficiency must lie in [0, 1], got {self.efficiency!r}")
        if self.mode not in ("selective", "two-outcome"):
            raise ValueError(f"unknown detector mode {self.mode!r}")


@dataclass(frozen=True)
class TargetCoeffs:
    """Logical amplitudes (Y1, Y2) of Y1|E> + Y2|O> and the atom outcome that produced them."""

    y1: complex
    y2: complex
    outcome: str = "e"

    @classmethod
    def from_inputs(cls, c_e: complex, c_g: complex, theta: float, outcome: str) -> TargetCoeffs:
        ph = np.exp(1j * theta)
        s = math.sqrt(2.0)
        if outcome == "e":
            return cls(complex((c_e - 1j * ph * c_g) / s), complex((c_e + 1j * ph * c_g) / s), "e")
        if outcome == "g":
            return cls(complex((-1j / ph * c_e + c_g) / s), complex((-1j / ph * c_e - c_g) / s), "g")
        raise ValueError(f"outcome must be 'e' or 'g', got {outcome!r}")

    def norm_sq(self) -> float:
        return abs(self.y1) ** 2 + abs(self.y2) ** 2

    def cat_weight(self, alpha: complex) -> float:
        """|Y1|^2 N+/2 + |Y2|^2 N-/2, twice the Born probability of the outcome."""
        return (abs(self.y1) ** 2 * cat_normalization(alpha, +1)
                + abs(self.y2) ** 2 * cat_normalization(alpha, -1)) / 2.0

    def logical_state(self, alpha: complex, cutoff: FockCutoff) -> FieldState:
        """Normalized Y1|E> + Y2|O>."""
        return (self.y1 * even_cat(alpha, cutoff) + self.y2 * odd_cat(alpha, cutoff)).normalized()

    def flipped_state(self, alpha: complex, cutoff: FockCutoff) -> FieldState:
        """Normalized Y1|E> - Y2|O>."""
        return (self.y1 * even_cat(alpha, cutoff) - self.y2 * odd_cat(alpha, cutoff)).normalized()


@dataclass(frozen=True)
class RoundEntry:
    stage: str
    atom: str
    outcome: str
    probability: float
    click: bool


@dataclass
class TrajectoryRecord:
    entries: list[RoundEntry] = field(default_factory=list)
    atoms_used: int = 0
    elapsed_time: float = 0.0
    final_fidelity: float = float("nan")
    succeeded_within_coherence: bool = False
    tau_coeh: float = float("nan")
    stage_atoms: dict = field(default_factory=dict)
    target: Optional[TargetCoeffs] = None
    censored: bool = False

    def log(self, stage: str, atom: str, outcome: str, probability: float, click: bool) -> None:
        self.entries.append(RoundEntry(stage, atom, outcome, float(probability), bool(click)))

    def path_probability(self) -> float:
        return float(np.prod([e.probability for e in self.entries]))


class RoundOutcome(NamedTuple):
    state: DensityMatrix
    outcome: str
    probability: float

    @property
    def click(self) -> bool:
        return self.outcome in ("click", "both-a")


def coherence_time(tau_cav: float, alpha: complex) -> float:
    """tau_cav / (2 |alpha|^2)."""
    return tau_cav / (2.0 * abs(alpha) ** 2)


def coherence_window(flux: float, tau_coeh: float) -> float:
    """Number of atom slots that fit in the coherence time."""
    return flux * tau_coeh


# ---------------------------------------------------------------------------
# reference states
# ---------------------------------------------------------------------------


def bell_initial_state(config: ProtocolConfig, signs: tuple[int, int] = (-1, -1)) -> DensityMatrix:
    """|s1 alpha>_1 |s2 alpha>_2 as a density matrix over (C1, C2)."""
    cut = config.cutoff
    return tensor(("C1", coherent_state(signs[0] * config.alpha, cut)),
                  ("C2", coherent_state(signs[1] * config.alpha, cut)),
                  max_dim=config.max_dim).to_density()


def bell_state(kind: str, alpha: complex, cutoff: FockCutoff,
               labels: tuple[str, str] = ("C1", "C2")) -> PureState:
    """One of phi+, phi-, psi+, psi- over the cat-state logical basis."""
    ev = even_cat(alpha, cutoff).amplitudes
    od = odd_cat(alpha, cutoff).amplitudes
    pairs = {
        "phi+": (np.kron(ev, ev), +1, np.kron(od, od)),
        "phi-": (np.kron(ev, ev), -1, np.kron(od, od)),
        "psi+": (np.kron(ev, od), +1, np.kron(od, ev)),
        "psi-": (np.kron(ev, od), -1, np.kron(od, ev)),
    }
    if kind not in pairs:
        raise ValueError(f"unknown Bell state {kind!r}")
    first, sign, second = pairs[kind]
    amps = (first + sign * second) / math.sqrt(2.0)
    n = cutoff.n_max
    return PureState(amps, SubsystemLayout(((labels[0], n), (labels[1], n)), max_dim=PROTOCOL_MAX_DIM))


BELL_KINDS = ("phi+", "phi-", "psi+", "psi-")


def bell_fidelities(rho: DensityMatrix, config: ProtocolConfig) -> dict[str, float]:
    return {k: fidelity(rho, bell_state(k, config.alpha, config.cutoff)) for k in BELL_KINDS}


def entangled_reference(coeffs: TargetCoeffs, config: ProtocolConfig) -> PureState:
    """(Y1|E E E> + Y2|O O O>) normalized, over (C1, C2, C3)."""
    cut = config.cutoff
    ev = even_cat(config.alpha, cut).amplitudes
    od = odd_cat(config.alpha, cut).amplitudes
    amps = coeffs.y1 * np.kron(np.kron(ev, ev), ev) + coeffs.y2 * np.kron(np.kron(od, od), od)
    amps = amps / np.linalg.norm(amps)
    n = cut.n_max
    return PureState(amps, SubsystemLayout((("C1", n), ("C2", n), ("C3", n)), max_dim=config.max_dim))


def teleported_reference(coeffs: TargetCoeffs, config: ProtocolConfig) -> PureState:
    """Y1|E> + Y2|O> on C1, normalized."""
    return PureState.single("C1", coeffs.logical_state(config.alpha, config.cutoff),
                            max_dim=config.max_dim)


# ---------------------------------------------------------------------------
# A-atom rounds
# ---------------------------------------------------------------------------


def _rng(config: ProtocolConfig, rng) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng(config.seed)


def _a_atom_pass(rho: DensityMatrix, cavities: Sequence[str], config: ProtocolConfig) -> DensityMatrix:
    """Attach |A+>, run the dispersive gate on each cavity in order, then the Ramsey zone."""
    atom = PureState.single("A", A_PLUS).to_density()
    reg = tensor(rho, atom, max_dim=config.max_dim)
    for cav in cavities:
        cut = FockCutoff(reg.layout.dim_of(cav))
        reg = apply_unitary(reg, dispersive_phases(config.dispersive, cut), ("A", cav))
    return apply_unitary(reg, ramsey_r1(), ("A",))


def _branch(reg: DensityMatrix, label: str, ket: np.ndarray) -> tuple[Optional[DensityMatrix], float]:
    """Unnormalized contraction with <ket| on ``label``; returns (normalized state or None, p)."""
    st, p = postselect(reg, label, ket, eps_prob=-1.0, normalize=False)
    if p <= 0:
        return None, 0.0
    return DensityMatrix(st.factor / math.sqrt(p * reg.trace()), st.layout), p


def _a_round(rho: DensityMatrix, cavities: Sequence[str], config: ProtocolConfig,
             rng, forced: Optional[str]) -> RoundOutcome:
    reg = _a_atom_pass(rho, cavities, config)
    state_e, p_e = _branch(reg, "A", KET_E)
    q = config.eta_a * p_e
    if forced is None:
        outcome = "click" if _rng(config, rng).random() < q else "fail"
    else:
        outcome = forced
    if outcome == "click":
        if q <= EPS_PROB:
            raise ImpossibleOutcome(f"click probability {q:.3e} is below {EPS_PROB:.0e}", q)
        return RoundOutcome(state_e, "click", q)
    if outcome == "fail":
        if 1.0 - q <= EPS_PROB:
            raise ImpossibleOutcome(f"failure probability {1.0 - q:.3e} is below {EPS_PROB:.0e}", 1.0 - q)
        keep = [lab for lab in reg.layout.labels if lab != "A"]
        return RoundOutcome(partial_trace(reg, keep).normalized(), "fail", 1.0 - q)
    if outcome == "g":
        state_g, p_g = _branch(reg, "A", KET_G)
        if p_g <= EPS_PROB:
            raise ImpossibleOutcome(f"outcome g has probability {p_g:.3e}", p_g)
        return RoundOutcome(state_g, "g", p_g)
    raise ValueError(f"unknown A-round outcome {outcome!r}")


def bell_round(rho: DensityMatrix, config: ProtocolConfig, rng=None,
               forced_outcome: Optional[str] = None) -> RoundOutcome:
    """One A atom through C1 then C2.

    Outcomes: ``click`` (atom detected in |e>), ``fail`` (no click, atom traced
    out) and, only when forced, ``g`` (atom projected on |g>).
    """
    _require_labels(rho, ("C1", "C2"))
    return _a_round(rho, ("C1", "C2"), config, rng, forced_outcome)


def entangle_round(rho: DensityMatrix, config: ProtocolConfig, rng=None,
                   forced_outcome: Optional[str] = None) -> RoundOutcome:
    """One A atom through C2 then C3; same outcome semantics as :func:`bell_round`."""
    _require_labels(rho, ("C1", "C2", "C3"))
    return _a_round(rho, ("C2", "C3"), config, rng, forced_outcome)


def _require_labels(rho, labels):
    if rho.layout.labels != tuple(labels):
        raise ValueError(f"expected a register over {labels}, got {rho.layout.labels}")


# ---------------------------------------------------------------------------
# target preparation
# ---------------------------------------------------------------------------


def target_state_prep(config: ProtocolConfig, rng=None,
                      forced_outcome: Optional[str] = None) -> tuple[FieldState, TargetCoeffs, float]:
    """Atom c_e|e> + c_g|g> through C3 (initially |-alpha>), then R3, then measured.

    Returns the normalized conditional C3 state, the matching (Y1, Y2) and the
    Born probability of the outcome.
    """
    cut = config.cutoff
    c3 = coherent_state(-config.alpha, cut)
    atom = np.array([config.c_e, config.c_g], dtype=complex)
    psi = tensor(("C3", c3), ("A", atom), max_dim=config.max_dim)
    psi = apply_unitary(psi, dispersive_phases(config.dispersive, cut), ("A", "C3"))
    psi = apply_unitary(psi, ramsey_r3(config.ramsey), ("A",))
    amps = psi.amplitudes.reshape(cut.n_max, 2)
    branches = {"e": amps[:, E], "g": amps[:, G]}
    probs = {k: float(np.vdot(v, v).real) for k, v in branches.items()}
    if forced_outcome is None:
        outcome = "e" if _rng(config, rng).random() < probs["e"] / (probs["e"] + probs["g"]) else "g"
    else:
        outcome = forced_outcome
    if outcome not in branches:
        raise ValueError(f"unknown target-prep outcome {outcome!r}")
    p = probs[outcome]
    if p <= EPS_PROB:
        raise ImpossibleOutcome(f"target outcome {outcome} has probability {p:.3e}", p)
    vec = branches[outcome] / math.sqrt(p)
    coeffs = TargetCoeffs.from_inputs(config.c_e, config.c_g, config.theta, outcome)
    return FieldState(vec, cut), coeffs, p


# ---------------------------------------------------------------------------
# injection and B-atom rounds
# ---------------------------------------------------------------------------


def inject_fields(rho: DensityMatrix, config: ProtocolConfig) -> DensityMatrix:
    """Displace C2 and C3 by alpha, first embedding them in the injected basis."""
    big = config.injected_cutoff
    big.check(2 * config.alpha)
    dmat = displacement_matrix(config.alpha, big)
    out = rho
    for cav in ("C2", "C3"):
        d = out.layout.dim_of(cav)
        if d > big.n_max:
            raise TruncationError(f"{cav} has dim {d} > injected cutoff {big.n_max}")
        out = apply_map(out, dmat[:, :d], cav, big.n_max)
    return out


def b_round(rho: DensityMatrix, config: ProtocolConfig, rng=None,
            forced_outcome: Optional[str] = None) -> RoundOutcome:
    """A pair of B atoms in |b> through C2 and C3, then both detectors read out.

    ``both-a`` needs both atoms in |a> and both detectors to click, which
    happens with probability eta_b^2 P(a, a).  Every other case is ``fail``
    and both atoms are traced out.
    """
    _require_labels(rho, ("C1", "C2", "C3"))
    b = PureState.single("B2", KET_B).to_density()
    reg = tensor(rho, b, PureState.single("B3", KET_B).to_density(), max_dim=config.max_dim)
    for atom, cav in (("B2", "C2"), ("B3", "C3")):
        u = jc_gate(config.jc, FockCutoff(reg.layout.dim_of(cav)))
        reg = apply_unitary(reg, u, (atom, cav))
    total = reg.trace()
    pieces = {}
    for x2, k2 in (("a", KET_A), ("b", KET_B)):
        st2, _ = postselect(reg, "B2", k2, eps_prob=-1.0, normalize=False)
        for x3, k3 in (("a", KET_A), ("b", KET_B)):
            st3, _ = postselect(st2, "B3", k3, eps_prob=-1.0, normalize=False)
            pieces[x2 + x3] = st3.factor
    p_aa = float(np.vdot(pieces["aa"], pieces["aa"]).real) / total
    q = config.eta_b**2 * p_aa
    if forced_outcome is None:
        outcome = "both-a" if _rng(config, rng).random() < q else "fail"
    else:
        outcome = forced_outcome
    layout = rho.layout
    if outcome == "both-a":
        if q <= EPS_PROB:
            raise ImpossibleOutcome(f"joint click probability {q:.3e} is below {EPS_PROB:.0e}", q)
        return RoundOutcome(DensityMatrix(pieces["aa"] / math.sqrt(p_aa * total), layout), "both-a", q)
    if outcome == "fail":
        if 1.0 - q <= EPS_PROB:
            raise ImpossibleOutcome(f"failure probability {1.0 - q:.3e}", 1.0 - q)
        cols = [pieces["ab"], pieces["ba"], pieces["bb"]]
        if config.eta_b < 1.0:
            cols.insert(0, math.sqrt(1.0 - config.eta_b**2) * pieces["aa"])
        fail = DensityMatrix(np.hstack(cols), layout).compressed()
        return RoundOutcome(fail.normalized(), "fail", 1.0 - q)
    raise ValueError(f"unknown B-round outcome {outcome!r}")


class PopulationState:
    """Register over (C1, C2, C3) reduced to the Fock populations of C2 and C3.

    ``blocks[i, j, n2, n3] = <i, n2, n3| rho |j, n2, n3>`` with i, j running over
    an orthonormal basis of C1's support.  B-atom Kraus maps and amplitude
    damping both preserve the coherence order of C2 and C3, and the Born
    probabilities and C1's reduced state only read the population part, so
    this reduction is exact for every quantity the B stage reports.
    """

    __slots__ = ("basis", "blocks")

    def __init__(self, basis: np.ndarray, blocks: np.ndarray):
        self.basis = basis
        self.blocks = blocks

    @classmethod
    def from_density(cls, rho: DensityMatrix, tol: float = 1e-14) -> PopulationState:
        _require_labels(rho, ("C1", "C2", "C3"))
        d1, d2, d3 = rho.layout.dims
        w = rho.factor.reshape(d1, d2 * d3 * rho.rank)
        u, s, _ = np.linalg.svd(w, full_matrices=False)
        basis = u[:, s > tol * max(s[0], 1e-300)]
        x = (basis.conj().T @ w).reshape(basis.shape[1], d2, d3, rho.rank)
        blocks = np.einsum("iabk,jabk->ijab", x, x.conj())
        return cls(basis, blocks)

    def trace(self) -> float:
        return float(np.einsum("iiab->", self.blocks).real)

    def _transfer(self, t2: np.ndarray, t3: np.ndarray) -> np.ndarray:
        return t2 @ self.blocks @ t3.T

    def joint_probability(self, t_a: np.ndarray) -> float:
        return float(np.einsum("iiab->", self._transfer(t_a, t_a)).real) / self.trace()

    def after_failure(self, t_a: np.ndarray, t_b: np.ndarray, eta_b: float) -> PopulationState:
        full = t_a + t_b
        blocks = self._transfer(full, full) - eta_b**2 * self._transfer(t_a, t_a)
        out = PopulationState(self.basis, blocks)
        return PopulationState(self.basis, blocks / out.trace())

    def after_success(self, t_a: np.ndarray) -> PopulationState:
        blocks = self._transfer(t_a, t_a)
        out = PopulationState(self.basis, blocks)
        return PopulationState(self.basis, blocks / out.trace())

    def damped(self, pop_map: np.ndarray) -> PopulationState:
        return PopulationState(self.basis, self._transfer(pop_map, pop_map))

    def c1_density(self) -> DensityMatrix:
        m = np.einsum("ijab->ij", self.blocks)
        m = (m + m.conj().T) / 2
        m = m / np.trace(m).real
        w, v = np.linalg.eigh(m)
        keep = w > 1e-15
        factor = self.basis @ (v[:, keep] * np.sqrt(w[keep]))
        return DensityMatrix(factor, SubsystemLayout((("C1", self.basis.shape[0]),)))


def b_round_populations(state: PopulationState, config: ProtocolConfig, rng=None,
                        forced_outcome: Optional[str] = None):
    """:func:`b_round` on a :class:`PopulationState`; returns (state, outcome, probability)."""
    t_a, t_b = jc_population_maps(config.jc, config.injected_cutoff)
    p_aa = state.joint_probability(t_a)
    q = config.eta_b**2 * p_aa
    if forced_outcome is None:
        outcome = "both-a" if _rng(config, rng).random() < q else "fail"
    else:
        outcome = forced_outcome
    if outcome == "both-a":
        if q <= EPS_PROB:
            raise ImpossibleOutcome(f"joint click probability {q:.3e} is below {EPS_PROB:.0e}", q)
        return state.after_success(t_a), "both-a", q
    if outcome == "fail":
        if 1.0 - q <= EPS_PROB:
            raise ImpossibleOutcome(f"failure probability {1.0 - q:.3e}", 1.0 - q)
        return state.after_failure(t_a, t_b, config.eta_b), "fail", 1.0 - q
    raise ValueError(f"unknown B-round outcome {outcome!r}")


# ---------------------------------------------------------------------------
# decoherence bookkeeping
# ---------------------------------------------------------------------------


def _damp(rho: DensityMatrix, labels: Sequence[str], kappa: float, dt: float) -> DensityMatrix:
    if dt <= 0:
        return rho
    for lab in labels:
        ks = damping_channel(kappa, dt, FockCutoff(rho.layout.dim_of(lab)), tol=DAMPING_KRAUS_TOL)
        rho = apply_kraus(rho, ks, (lab,))
    return rho.normalized()


class _Clock:
    """Per-cavity timestamps; cavities are brought up to date lazily before they are touched."""

    def __init__(self, config: ProtocolConfig):
        self.enabled = config.decoherence
        self.kappa = config.kappa
        self.dt = config.slot_time
        self.times: dict[str, float] = {}

    def age(self, rho: DensityMatrix, labels: Sequence[str], slot: int) -> DensityMatrix:
        now = slot * self.dt
        if not self.enabled:
            for lab in labels:
                self.times[lab] = now
            return rho
        for lab in labels:
            rho = _damp(rho, (lab,), self.kappa, now - self.times.get(lab, 0.0))
            self.times[lab] = now
        return rho


# ---------------------------------------------------------------------------
# repeat-until-success drivers
# ---------------------------------------------------------------------------


class ProtocolCache:
    """Memo of states after k consecutive failures, valid when decoherence is off.

    Without damping the state after k failed rounds of a stage does not depend
    on anything random, so trials of the same configuration can share it.
    """

    def __init__(self, config: ProtocolConfig):
        if config.decoherence:
            raise ValueError("ProtocolCache is only valid with decoherence off")
        self.config = config
        self._store: dict = {}
        self.stationary: dict = {}

    def get(self, key, compute):
        if key not in self._store:
            self._store[key] = compute()
        return self._store[key]


def _forced_iter(forced_outcomes, stage: str):
    seq = (forced_outcomes or {}).get(stage, ())
    if isinstance(seq, str):
        seq = [s for s in seq.split(",") if s]
    return iter(list(seq))


def _run_a_stage(rho, stage, round_fn, config, rng, forced, record, clock, cavities,
                 slot0, cache, branch) -> tuple[DensityMatrix, int, Optional[int]]:
    """Repeat ``round_fn`` until a click.

    Returns (success state, rounds used, memo index of the success state).  The
    memo index is None without a cache; downstream memo keys include it so the
    cached bits never depend on the order trials fill the cache.
    """
    k = 0
    while True:
        if k >= config.round_cap:
            raise RoundCapExceeded(stage, config.round_cap)
        rho = clock.age(rho, cavities, slot0 + k + 1)
        f = next(forced, None)
        if cache is not None and f in (None, "click", "fail"):
            # a failed round maps the chain onto a fixed point, after which every index shares one entry
            kk = min(k, cache.stationary.get((stage, branch), k))
            click_state, q = cache.get((stage, branch, kk),
                                       lambda r=rho: _both_branches(r, cavities, config))
            outcome = f or ("click" if _rng(config, rng).random() < q else "fail")
            if outcome == "click":
                if q <= EPS_PROB:
                    raise ImpossibleOutcome(f"click probability {q:.3e}", q)
                record.log(stage, "A", "click", q, True)
                return click_state, k + 1, kk
            if 1.0 - q <= EPS_PROB:
                raise ImpossibleOutcome(f"failure probability {1.0 - q:.3e}", 1.0 - q)
            record.log(stage, "A", "fail", 1.0 - q, False)
            if (stage, branch) not in cache.stationary:
                nxt = cache.get((stage, branch, kk, "fail"),
                                lambda r=rho: round_fn(r, config, None, "fail").state)
                if trace_distance(nxt, rho) < STATIONARY_TOL:
                    cache.stationary[(stage, branch)] = kk
                rho = nxt
        else:
            res = round_fn(rho, config, rng, f)
            record.log(stage, "A", res.outcome, res.probability, res.outcome in ("click", "g"))
            if res.outcome in ("click", "g"):
                return res.state, k + 1, None
            rho = res.state
        k += 1


def _both_branches(rho: DensityMatrix, cavities, config) -> tuple[DensityMatrix, float]:
    """(normalized click state, click probability) for one A atom through ``cavities``."""
    reg = _a_atom_pass(rho, cavities, config)
    state_e, p_e = _branch(reg, "A", KET_E)
    return state_e, config.eta_a * p_e


def bell_click_probability(config: ProtocolConfig) -> float:
    """Click probability of the first Bell-preparation round (the same for every retry)."""
    return _both_branches(bell_initial_state(config), ("C1", "C2"), config)[1]


def bell_prep_until_success(config: ProtocolConfig, rng=None, forced_outcomes=None,
                            record: Optional[TrajectoryRecord] = None,
                            initial: Optional[DensityMatrix] = None,
                            cache: Optional[ProtocolCache] = None) -> tuple[DensityMatrix, TrajectoryRecord]:
    """Send A atoms through C1, C2 until one clicks.

    ``forced_outcomes`` may be a list of outcomes for the first rounds or a
    dict keyed by stage name.  The returned record covers this stage only
    unless an existing record is passed in.
    """
    rng = _rng(config, rng)
    if forced_outcomes is not None and not isinstance(forced_outcomes, dict):
        forced_outcomes = {"bell": forced_outcomes}
    own = record is None
    record = record if record is not None else TrajectoryRecord(tau_coeh=config.tau_coeh)
    rho = initial if initial is not None else bell_initial_state(config)
    clock = _Clock(config)
    try:
        state, n, _ = _run_a_stage(rho, "bell", bell_round, config, rng,
                                _forced_iter(forced_outcomes, "bell"), record, clock,
                                ("C1", "C2"), 0, cache, "bell")
    except RoundCapExceeded as exc:
        record.censored = True
        exc.record = record
        raise
    record.stage_atoms["bell"] = n
    if own:
        record.atoms_used = n
        record.elapsed_time = n / config.flux
        record.final_fidelity = fidelity(state, bell_state("phi+", config.alpha, config.cutoff))
        record.succeeded_within_coherence = record.elapsed_time < config.tau_coeh
    return state, record


def _prepare_target(config, rng, forced, record) -> tuple[FieldState, TargetCoeffs, int]:
    """Target preparation with detector misses; a miss re-prepares C3 and retries."""
    k = 0
    while True:
        if k >= config.round_cap:
            raise RoundCapExceeded("target", config.round_cap)
        f = next(forced, None)
        if f == "miss" or (f is None and rng.random() >= config.eta_a):
            if f == "miss" and 1.0 - config.eta_a <= EPS_PROB:
                raise ImpossibleOutcome("detector miss is impossible at eta_a = 1", 1.0 - config.eta_a)
            record.log("target", "A", "miss", 1.0 - config.eta_a, False)
            k += 1
            continue
        state, coeffs, p = target_state_prep(config, rng, f)
        record.log("target", "A", coeffs.outcome, config.eta_a * p, True)
        return state, coeffs, k + 1


def prepare_target(config: ProtocolConfig, rng=None, forced_outcomes=None
                   ) -> tuple[FieldState, TrajectoryRecord]:
    """Target preparation repeated over detector misses; returns (C3 state, record)."""
    rng = _rng(config, rng)
    if forced_outcomes is not None and not isinstance(forced_outcomes, dict):
        forced_outcomes = {"target": forced_outcomes}
    record = TrajectoryRecord(tau_coeh=config.tau_coeh)
    try:
        state, coeffs, n = _prepare_target(config, rng, _forced_iter(forced_outcomes, "target"), record)
    except RoundCapExceeded as exc:
        record.censored = True
        exc.record = record
        raise
    record.target = coeffs
    record.stage_atoms["target"] = n
    record.atoms_used = n
    record.elapsed_time = n / config.flux
    record.final_fidelity = state.fidelity(coeffs.logical_state(config.alpha, config.cutoff))
    record.succeeded_within_coherence = record.elapsed_time < config.tau_coeh
    return state, record


def teleport_full(config: ProtocolConfig, rng=None, forced_outcomes: Optional[dict] = None,
                  cache: Optional[ProtocolCache] = None) -> TrajectoryRecord:
    """Bell preparation and target preparation in parallel, then the entangling
    A atoms, injection, and B-atom pairs until a joint click.

    ``forced_outcomes`` maps a stage name (bell, target, entangle, b) to the
    outcomes of its first rounds; later rounds are sampled.
    """
    rng = _rng(config, rng)
    if cache is not None and config.decoherence:
        raise ValueError("a ProtocolCache cannot be used with decoherence on")
    record = TrajectoryRecord(tau_coeh=config.tau_coeh)
    try:
        return _teleport(config, rng, forced_outcomes, cache, record)
    except RoundCapExceeded as exc:
        _account_partial(record, config)
        record.censored = True
        exc.record = record
        raise


def _account_partial(record: TrajectoryRecord, config: ProtocolConfig) -> None:
    """Atom counts of an unfinished run, rebuilt from its log."""
    n = {s: sum(e.stage == s for e in record.entries) for s in STAGES}
    record.stage_atoms = {"bell": n["bell"], "target": n["target"], "entangle": n["entangle"],
                          "b": 2 * n["b"]}
    record.atoms_used = max(n["bell"], n["target"]) + n["entangle"] + 2 * n["b"]
    record.elapsed_time = record.atoms_used / config.flux


def _teleport(config, rng, forced_outcomes, cache, record) -> TrajectoryRecord:
    clock = _Clock(config)

    bell, n_bell, bell_kk = _run_a_stage(bell_initial_state(config), "bell", bell_round, config, rng,
                                _forced_iter(forced_outcomes, "bell"), record, clock,
                                ("C1", "C2"), 0, cache, "bell")
    c3, coeffs, n_target = _prepare_target(config, rng, _forced_iter(forced_outcomes, "target"), record)
    record.target = coeffs
    start = max(n_bell, n_target)

    c3_rho = PureState.single("C3", c3, max_dim=config.max_dim).to_density()
    clock.times["C3"] = n_target * config.slot_time
    if config.decoherence:
        c3_rho = clock.age(c3_rho, ("C3",), start)
        bell = clock.age(bell, ("C2",), start)
    reg = tensor(bell, c3_rho, max_dim=config.max_dim)

    # C1 is idle from here on; its damping commutes with everything else and is applied at the end
    branch = ("entangle", coeffs.outcome, bell_kk)
    ghz, n_ent, ent_kk = _run_a_stage(reg, "entangle", entangle_round, config, rng,
                              _forced_iter(forced_outcomes, "entangle"), record, clock,
                              ("C2", "C3"), start, cache, branch)
    slot = start + n_ent
    reg = clock.age(ghz, ("C2", "C3"), slot)
    chain = (coeffs.outcome, bell_kk, ent_kk)

    if cache is not None:
        pops = cache.get(("inject",) + chain,
                         lambda: PopulationState.from_density(inject_fields(reg, config)))
    else:
        pops = PopulationState.from_density(inject_fields(reg, config))

    forced_b = _forced_iter(forced_outcomes, "b")
    pair_map = None
    if config.decoherence:
        pair_map = damping_population_map(config.kappa, 2 * config.slot_time, config.injected_cutoff)
    t_a, _ = jc_population_maps(config.jc, config.injected_cutoff)
    k = 0
    q_prev = None
    while True:
        if k >= config.round_cap:
            raise RoundCapExceeded("b", config.round_cap)
        f = next(forced_b, None)
        if pair_map is not None:
            pops = pops.damped(pair_map)
        if f is None:
            # failed pairs drain photons from C2 and C3, so the click probability can decay to nothing
            q_now = (cache.get(("b",) + chain + (k,),
                               lambda p=pops: config.eta_b**2 * p.joint_probability(t_a))
                     if cache is not None else config.eta_b**2 * pops.joint_probability(t_a))
            if _tail_exhausted(q_now, q_prev):
                raise RoundCapExceeded("b", k, exhausted=True)
            q_prev = q_now
        if cache is not None and f in (None, "both-a", "fail"):
            key = ("b",) + chain + (k,)
            q = cache.get(key, lambda p=pops: config.eta_b**2 * p.joint_probability(t_a))
            outcome = f or ("both-a" if rng.random() < q else "fail")
            if outcome == "both-a":
                if q <= EPS_PROB:
                    raise ImpossibleOutcome(f"joint click probability {q:.3e}", q)
                record.log("b", "B", "both-a", q, True)
                c1 = cache.get(key + ("c1",), lambda p=pops: p.after_success(t_a).c1_density())
                break
            record.log("b", "B", "fail", 1.0 - q, False)
            pops = cache.get(key + ("fail",),
                             lambda p=pops: b_round_populations(p, config, None, "fail")[0])
        else:
            pops, outcome, q = b_round_populations(pops, config, rng, f)
            record.log("b", "B", outcome, q, outcome == "both-a")
            if outcome == "both-a":
                c1 = pops.c1_density()
                break
        k += 1
    n_pairs = k + 1
    atoms = start + n_ent + 2 * n_pairs

    if config.decoherence:
        c1 = _damp(c1, ("C1",), config.kappa, atoms * config.slot_time - n_bell * config.slot_time)

    record.stage_atoms = {"bell": n_bell, "target": n_target, "entangle": n_ent, "b": 2 * n_pairs}
    record.atoms_used = atoms
    record.elapsed_time = atoms / config.flux
    record.final_fidelity = fidelity(c1, teleported_reference(coeffs, config))
    record.succeeded_within_coherence = record.elapsed_time < config.tau_coeh
    return record


# ---------------------------------------------------------------------------
# analytic timing budget
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimingReport:
    """Expected cost of one protocol run.

    Expectations are conditional on the run succeeding; ``success_probability``
    is the chance that the B stage succeeds at all before its click
    probability dies out.
    """

    tau_coeh: float
    window_atoms: float
    expected_atoms: float
    expected_time: float
    feasible: bool
    success_probability: float
    stage_atoms: dict

    def required_tau_cav_for(self, headroom: float, alpha: complex) -> float:
        """Cavity damping time for which the coherence time is ``headroom`` x the expected time."""
        return 2.0 * abs(alpha) ** 2 * headroom * self.expected_time


def _geometric_mean(p: float) -> float:
    return math.inf if p <= 0 else 1.0 / p


def _conditional_rounds(probs) -> tuple[float, float]:
    """(P(success), E[rounds | success]) for per-round success probabilities ``probs``."""
    mass, first_moment, survive = 0.0, 0.0, 1.0
    q_prev = None
    for k, q in enumerate(probs, start=1):
        f = survive * q
        mass += f
        first_moment += k * f
        survive *= 1.0 - q
        if survive < 1e-15 or _tail_exhausted(q, q_prev):
            break
        q_prev = q
    if mass <= 0:
        return 0.0, math.inf
    return mass, first_moment / mass


def timing_budget(config: ProtocolConfig, max_b_rounds: Optional[int] = None) -> TimingReport:
    """Expected atoms and time for the full sequence, without damping.

    Bell preparation and target preparation run in parallel, so their cost is
    the mean of the larger of two geometric variables.  The entangling and B
    stages use the exact decoherence-free Born probabilities of each retry.
    """
    cfg = config.replace(decoherence=False)
    first_bell, p_bell = _both_branches(bell_initial_state(cfg), ("C1", "C2"), cfg)
    p_target = cfg.eta_a
    e_bell = _geometric_mean(p_bell)
    e_target = _geometric_mean(p_target)
    if p_bell > 0 and p_target > 0:
        e_start = e_bell + e_target - 1.0 / (1.0 - (1.0 - p_bell) * (1.0 - p_target))
    else:
        e_start = math.inf

    cap = max_b_rounds or cfg.round_cap
    e_ent = 0.0
    e_b = 0.0
    p_success = 0.0
    for outcome in ("e", "g"):
        try:
            c3, _, w = target_state_prep(cfg, forced_outcome=outcome)
        except ImpossibleOutcome:
            continue
        reg = tensor(first_bell, PureState.single("C3", c3).to_density(), max_dim=cfg.max_dim)
        ghz, q_ent = _both_branches(reg, ("C2", "C3"), cfg)
        # a failed entangling round leaves the parity weights, hence the click probability, unchanged
        p_b, n_b = _expected_b_rounds(ghz, cfg, cap)
        p_success += w * p_b
        e_ent += w * p_b * _geometric_mean(q_ent)
        e_b += w * p_b * n_b
    if p_success > 0:
        e_ent, e_b = e_ent / p_success, e_b / p_success
    else:
        e_ent = e_b = math.inf
    expected = e_start + e_ent + 2.0 * e_b
    tau_coeh = cfg.tau_coeh
    return TimingReport(
        tau_coeh=tau_coeh,
        window_atoms=coherence_window(cfg.flux, tau_coeh),
        expected_atoms=expected,
        expected_time=expected / cfg.flux,
        feasible=expected / cfg.flux < tau_coeh,
        success_probability=p_success,
        stage_atoms={"bell_and_target": e_start, "entangle": e_ent, "b": 2.0 * e_b,
                     "bell": e_bell, "target": e_target},
    )


def _expected_b_rounds(ghz: DensityMatrix, cfg: ProtocolConfig, cap: int) -> tuple[float, float]:
    t_a, t_b = jc_population_maps(cfg.jc, cfg.injected_cutoff)
    pops = PopulationState.from_density(inject_fields(ghz, cfg))

    def probs():
        p = pops
        for _ in range(cap):
            yield cfg.eta_b**2 * p.joint_probability(t_a)
            p = p.after_failure(t_a, t_b, cfg.eta_b)

    return _conditional_rounds(probs())


__all__ = [
    "BELL_KINDS",
    "ConfigError",
    "DetectorModel",
    "PopulationState",
    "ProtocolCache",
    "ProtocolConfig",
    "RoundCapExceeded",
    "RoundEntry",
    "RoundOutcome",
    "TargetCoeffs",
    "TimingReport",
    "TrajectoryRecord",
    "b_round",
    "b_round_populations",
    "bell_click_probability",
    "bell_fidelities",
    "bell_initial_state",
    "bell_prep_until_success",
    "bell_round",
    "bell_state",
    "coherence_time",
    "coherence_window",
    "entangle_round",
    "entangled_reference",
    "inject_fields",
    "prepare_target",
    "target_state_prep",
    "teleport_full",
    "teleported_reference",
    "timing_budget",
]
