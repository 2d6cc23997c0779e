"""Multipartite pure states and density matrices over labeled subsystems.

A :class:`DensityMatrix` is stored as a dense factor ``W`` with ``rho = W W^dag``.
Protocol states are low rank, so this keeps three truncated cavity modes plus
an atom in memory while every operation stays exact.  ``to_dense()`` gives
the full matrix for registers small enough to hold it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .fock import FieldState

DEFAULT_MAX_DIM = 2**14
DENSE_LIMIT = 2**14
EPS_PROB = 1e-12
# eigenvalues of rho below this are dropped when a factor is recompressed
RANK_TOL = 1e-15


class DimensionError(ValueError):
    """Layouts or operators do not fit together."""


class ImpossibleOutcome(RuntimeError):
    """A measurement outcome has probability below the impossibility threshold."""

    def __init__(self, message: str, probability: float):
        super().__init__(message)
        self.probability = probability


@dataclass(frozen=True)
class SubsystemLayout:
    """Ordered (label, dim) pairs; the first subsystem is the most significant index."""

    subsystems: tuple[tuple[str, int], ...]
    max_dim: int = DEFAULT_MAX_DIM

    def __post_init__(self):
        subs = tuple((str(lab), int(d)) for lab, d in self.subsystems)
        object.__setattr__(self, "subsystems", subs)
        labels = [lab for lab, _ in subs]
        if len(set(labels)) != len(labels):
            raise DimensionError(f"duplicate subsystem labels in {labels}")
        if any(d < 2 for _, d in subs):
            raise DimensionError(f"every subsystem needs dim >= 2: {subs}")
        if self.total_dim > self.max_dim:
            raise DimensionError(
                f"total dimension {self.total_dim} exceeds bound {self.max_dim}"
            )

    @classmethod
    def of(cls, *pairs: tuple[str, int], max_dim: int = DEFAULT_MAX_DIM) -> SubsystemLayout:
        return cls(tuple(pairs), max_dim=max_dim)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(lab for lab, _ in self.subsystems)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(d for _, d in self.subsystems)

    @property
    def total_dim(self) -> int:
        return math.prod(self.dims)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise DimensionError(f"unknown subsystem label {label!r}") from None

    def dim_of(self, label: str) -> int:
        return self.dims[self.index(label)]

    def concat(self, other: SubsystemLayout) -> SubsystemLayout:
        return SubsystemLayout(
            self.subsystems + other.subsystems, max_dim=max(self.max_dim, other.max_dim)
        )

    def restrict(self, keep: Iterable[str]) -> SubsystemLayout:
        keep = set(keep)
        for lab in keep:
            self.index(lab)
        return SubsystemLayout(
            tuple(s for s in self.subsystems if s[0] in keep), max_dim=self.max_dim
        )

    def replace_dim(self, label: str, dim: int) -> SubsystemLayout:
        i = self.index(label)
        subs = list(self.subsystems)
        subs[i] = (label, dim)
        return SubsystemLayout(tuple(subs), max_dim=self.max_dim)


# ---------------------------------------------------------------------------
# local operator application on column stacks
# ---------------------------------------------------------------------------


def _apply_local(cols: np.ndarray, layout: SubsystemLayout, op: np.ndarray,
                 targets: Sequence[str]) -> np.ndarray:
    """Apply ``op`` (matrix, or 1-D diagonal) on ``targets`` to every column of ``cols``."""
    axes = [layout.index(t) for t in targets]
    if len(set(axes)) != len(axes):
        raise DimensionError(f"repeated target labels {targets}")
    tdims = [layout.dims[i] for i in axes]
    d = math.prod(tdims)
    op = np.asarray(op)
    if op.ndim == 1:
        if op.shape != (d,):
            raise DimensionError(f"diagonal of length {op.shape[0]} does not fit targets {d}")
    elif op.ndim != 2 or op.shape[1] != d:
        raise DimensionError(f"operator shape {op.shape} does not act on targets of dim {d}")
    r = cols.shape[1]
    t = cols.reshape(layout.dims + (r,))
    t = np.moveaxis(t, axes, range(len(axes)))
    rest = t.shape[len(axes):]
    flat = t.reshape(d, -1)
    if op.ndim == 1:
        out = op[:, None] * flat
        out_dims = tdims
    else:
        out = op @ flat
        if op.shape[0] != d:
            # rectangular maps (e.g. padding a mode into a larger basis) change one dim
            if len(axes) != 1:
                raise DimensionError("rectangular operators must act on a single subsystem")
            out_dims = [op.shape[0]]
        else:
            out_dims = tdims
    out = out.reshape(tuple(out_dims) + rest)
    out = np.moveaxis(out, range(len(axes)), axes)
    return out.reshape(-1, r)


def _compress(cols: np.ndarray, tol: float = RANK_TOL) -> np.ndarray:
    """Smallest factor W' with W' W'^dag equal to cols cols^dag up to eigenvalues < tol."""
    d, r = cols.shape
    if r <= 1:
        return cols
    if d <= r:
        rho = cols @ cols.conj().T
        w, v = np.linalg.eigh(rho)
        keep = w > tol
        return v[:, keep] * np.sqrt(w[keep])
    gram = cols.conj().T @ cols
    w, v = np.linalg.eigh(gram)
    keep = w > tol
    if keep.all() and r <= 2:
        return cols
    return cols @ v[:, keep]


# ---------------------------------------------------------------------------
# states
# ---------------------------------------------------------------------------


class PureState:
    """State vector over a :class:`SubsystemLayout`."""

    __slots__ = ("amplitudes", "layout")

    def __init__(self, amplitudes, layout: SubsystemLayout):
        amps = np.asarray(amplitudes, dtype=complex).reshape(-1)
        if amps.shape[0] != layout.total_dim:
            raise DimensionError(
                f"{amps.shape[0]} amplitudes for layout of dim {layout.total_dim}"
            )
        self.amplitudes = amps
        self.layout = layout

    @classmethod
    def single(cls, label: str, vector, max_dim: int = DEFAULT_MAX_DIM) -> PureState:
        if isinstance(vector, FieldState):
            vector = vector.amplitudes
        vec = np.asarray(vector, dtype=complex).reshape(-1)
        return cls(vec, SubsystemLayout(((label, vec.shape[0]),), max_dim=max_dim))

    def norm_sq(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)

    def normalized(self) -> PureState:
        return PureState(self.amplitudes / math.sqrt(self.norm_sq()), self.layout)

    def to_density(self) -> DensityMatrix:
        return DensityMatrix(self.amplitudes[:, None], self.layout)

    def __add__(self, other: PureState) -> PureState:
        _same_layout(self.layout, other.layout)
        return PureState(self.amplitudes + other.amplitudes, self.layout)

    def __sub__(self, other: PureState) -> PureState:
        _same_layout(self.layout, other.layout)
        return PureState(self.amplitudes - other.amplitudes, self.layout)

    def __mul__(self, c: complex) -> PureState:
        return PureState(c * self.amplitudes, self.layout)

    __rmul__ = __mul__

    def __repr__(self):
        return f"PureState(layout={self.layout.subsystems})"


class DensityMatrix:
    """Density operator ``rho = factor @ factor^dag`` over a :class:`SubsystemLayout`."""

    __slots__ = ("factor", "layout")

    def __init__(self, factor, layout: SubsystemLayout):
        f = np.asarray(factor, dtype=complex)
        if f.ndim == 1:
            f = f[:, None]
        if f.shape[0] != layout.total_dim:
            raise DimensionError(f"factor rows {f.shape[0]} != layout dim {layout.total_dim}")
        self.factor = f
        self.layout = layout

    @classmethod
    def from_matrix(cls, rho, layout: SubsystemLayout, tol: float = 1e-10) -> DensityMatrix:
        """Factor a dense Hermitian positive matrix; rejects non-physical input."""
        rho = np.asarray(rho, dtype=complex)
        if rho.shape != (layout.total_dim, layout.total_dim):
            raise DimensionError(f"matrix shape {rho.shape} does not match layout")
        if np.abs(rho - rho.conj().T).max() > tol:
            raise ValueError("density matrix is not Hermitian")
        w, v = np.linalg.eigh((rho + rho.conj().T) / 2)
        if w.min() < -1e-8:
            raise ValueError(f"density matrix has negative eigenvalue {w.min():.3e}")
        keep = w > RANK_TOL
        return cls(v[:, keep] * np.sqrt(w[keep]), layout)

    @property
    def rank(self) -> int:
        return self.factor.shape[1]

    def to_dense(self) -> np.ndarray:
        if self.layout.total_dim > DENSE_LIMIT:
            raise DimensionError(
                f"dense matrix of dim {self.layout.total_dim} exceeds limit {DENSE_LIMIT}"
            )
        return self.factor @ self.factor.conj().T

    @property
    def data(self) -> np.ndarray:
        return self.to_dense()

    def trace(self) -> float:
        return float(np.vdot(self.factor, self.factor).real)

    def purity(self) -> float:
        g = self.factor.conj().T @ self.factor
        return float(np.vdot(g, g).real) / self.trace() ** 2

    def normalized(self) -> DensityMatrix:
        return DensityMatrix(self.factor / math.sqrt(self.trace()), self.layout)

    def compressed(self, tol: float = RANK_TOL) -> DensityMatrix:
        return DensityMatrix(_compress(self.factor, tol), self.layout)

    def expectation(self, op: np.ndarray, targets: Sequence[str]) -> complex:
        """Tr(rho O) for a local operator O."""
        return complex(np.vdot(self.factor, _apply_local(self.factor, self.layout, op, targets)))

    def __repr__(self):
        return f"DensityMatrix(layout={self.layout.subsystems}, rank={self.rank})"


State = Union[PureState, DensityMatrix]


def _same_layout(a: SubsystemLayout, b: SubsystemLayout) -> None:
    if a.subsystems != b.subsystems:
        raise DimensionError(f"layout mismatch: {a.subsystems} vs {b.subsystems}")


def _cols(state) -> np.ndarray:
    if isinstance(state, PureState):
        return state.amplitudes[:, None]
    if isinstance(state, DensityMatrix):
        return state.factor
    raise TypeError(f"expected PureState or DensityMatrix, got {type(state).__name__}")


def as_density(state: State) -> DensityMatrix:
    return state.to_density() if isinstance(state, PureState) else state


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def tensor(*factors, max_dim: int = DEFAULT_MAX_DIM):
    """Kronecker product in argument order.

    Accepts PureState / DensityMatrix values, or ``(label, vector)`` pairs where
    the vector is a FieldState or array.  The result is a PureState when every
    factor is pure, otherwise a DensityMatrix.
    """
    parts = []
    for f in factors:
        if isinstance(f, tuple):
            f = PureState.single(f[0], f[1], max_dim=max_dim)
        parts.append(f)
    if not parts:
        raise ValueError("tensor() needs at least one factor")
    subs: tuple[tuple[str, int], ...] = ()
    for p in parts:
        subs += p.layout.subsystems
    layout = SubsystemLayout(subs, max_dim=max(max_dim, *(p.layout.max_dim for p in parts)))
    if all(isinstance(p, PureState) for p in parts):
        amps = parts[0].amplitudes
        for p in parts[1:]:
            amps = np.kron(amps, p.amplitudes)
        return PureState(amps, layout)
    cols = _cols(parts[0])
    for p in parts[1:]:
        cols = np.kron(cols, _cols(p))
    return DensityMatrix(cols, layout)


def apply_unitary(state: State, u: np.ndarray, targets: Sequence[str]) -> State:
    """U rho U^dag (or U|psi>) with ``u`` embedded as identity off ``targets``.

    ``u`` may be given as a 1-D array, meaning a diagonal operator.
    """
    if isinstance(targets, str):
        targets = (targets,)
    out = _apply_local(_cols(state), state.layout, u, targets)
    if isinstance(state, PureState):
        return PureState(out[:, 0], state.layout)
    return DensityMatrix(out, state.layout)


def apply_map(state: State, op: np.ndarray, target: str, new_dim: int | None = None) -> State:
    """Apply a (possibly rectangular) linear map on one subsystem, e.g. a basis embedding."""
    cols = _apply_local(_cols(state), state.layout, op, (target,))
    layout = state.layout
    if op.ndim == 2 and op.shape[0] != op.shape[1]:
        layout = layout.replace_dim(target, new_dim or op.shape[0])
    if isinstance(state, PureState):
        return PureState(cols[:, 0], layout)
    return DensityMatrix(cols, layout)


def apply_kraus(state: State, kraus: Sequence[np.ndarray], targets: Sequence[str],
                tol: float = RANK_TOL) -> DensityMatrix:
    """sum_k K rho K^dag on ``targets``."""
    if isinstance(targets, str):
        targets = (targets,)
    cols = _cols(state)
    stacked = np.hstack([_apply_local(cols, state.layout, k, targets) for k in kraus])
    return DensityMatrix(_compress(stacked, tol), state.layout)


def partial_trace(state: State, keep: Iterable[str], tol: float = RANK_TOL) -> DensityMatrix:
    """Reduced state on ``keep`` (returned in layout order)."""
    keep = list(keep) if not isinstance(keep, str) else [keep]
    if not keep:
        raise DimensionError("partial_trace needs a nonempty keep set")
    layout = state.layout
    keep_axes = sorted(layout.index(k) for k in keep)
    sub = SubsystemLayout(tuple(layout.subsystems[i] for i in keep_axes), max_dim=layout.max_dim)
    cols = _cols(state)
    r = cols.shape[1]
    t = cols.reshape(layout.dims + (r,))
    t = np.moveaxis(t, keep_axes, range(len(keep_axes)))
    w = t.reshape(sub.total_dim, -1)
    return DensityMatrix(_compress(w, tol), sub)


def project(state: State, targets: Sequence[str], projector: np.ndarray,
            eps_prob: float = EPS_PROB, check: bool = True) -> tuple[DensityMatrix, float]:
    """Projective measurement outcome: returns (P rho P / p, p) with p = Tr(P rho).

    Raises ImpossibleOutcome when p <= eps_prob.
    """
    if isinstance(targets, str):
        targets = (targets,)
    projector = np.asarray(projector, dtype=complex)
    if check:
        if np.abs(projector - projector.conj().T).max() > 1e-10:
            raise ValueError("projector is not Hermitian")
        if np.abs(projector @ projector - projector).max() > 1e-10:
            raise ValueError("projector is not idempotent")
    rho = as_density(state)
    total = rho.trace()
    pc = _apply_local(rho.factor, rho.layout, projector, targets)
    p = float(np.vdot(pc, pc).real) / total
    if p <= eps_prob:
        raise ImpossibleOutcome(f"outcome probability {p:.3e} <= {eps_prob:.1e}", p)
    return DensityMatrix(pc / math.sqrt(p * total), rho.layout), p


def postselect(state: State, label: str, bra, eps_prob: float = EPS_PROB,
               normalize: bool = True) -> tuple[DensityMatrix, float]:
    """Contract ``<bra|`` on one subsystem and drop it from the layout.

    Equivalent to projecting onto ``|bra>`` and tracing the subsystem out,
    which is how a detected atom leaves the register.
    """
    rho = as_density(state)
    bra = np.asarray(bra, dtype=complex).reshape(1, -1)
    layout = rho.layout
    cols = _apply_local(rho.factor, layout, bra.conj(), (label,))
    sub = layout.restrict([lab for lab in layout.labels if lab != label])
    cols = cols.reshape(sub.total_dim, -1)
    total = rho.trace()
    p = float(np.vdot(cols, cols).real) / total
    if p <= eps_prob:
        raise ImpossibleOutcome(f"outcome probability {p:.3e} <= {eps_prob:.1e}", p)
    if normalize:
        cols = cols / math.sqrt(p * total)
    return DensityMatrix(cols, sub), p


def fidelity(state: State, target: PureState) -> float:
    """<target| rho |target> for a normalized target."""
    _same_layout(state.layout, target.layout)
    rho = as_density(state)
    ov = rho.factor.conj().T @ target.amplitudes
    return float(np.vdot(ov, ov).real) / (rho.trace() * target.norm_sq())


def trace_distance(rho: State, sigma: State) -> float:
    """(1/2) ||rho - sigma||_1, computed on the joint support of the two factors."""
    _same_layout(rho.layout, sigma.layout)
    a = _cols(as_density(rho))
    b = _cols(as_density(sigma))
    basis = np.hstack([a, b])
    if basis.shape[1] >= basis.shape[0]:
        diff = a @ a.conj().T - b @ b.conj().T
    else:
        q, _ = np.linalg.qr(basis)
        qa = q.conj().T @ a
        qb = q.conj().T @ b
        diff = qa @ qa.conj().T - qb @ qb.conj().T
    w = np.linalg.eigvalsh((diff + diff.conj().T) / 2)
    return 0.5 * float(np.abs(w).sum())


def purity(state: State) -> float:
    return as_density(state).purity()
