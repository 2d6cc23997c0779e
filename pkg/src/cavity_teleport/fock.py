"""Single-mode field states and operators on a truncated Fock space."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from scipy.special import gammaln


class TruncationError(ValueError):
    """The Fock cutoff is too small for the amplitudes being represented."""


def required_n_max(beta: complex) -> int:
    """Smallest basis size that keeps the coherent-state tail of ``beta`` below 1e-9."""
    r = abs(beta)
    return max(2, math.ceil(r * r + 6.0 * r + 10.0))


@dataclass(frozen=True)
class FockCutoff:
    """Dimension of the truncated basis {|0>, ..., |n_max - 1>}."""

    n_max: int

    def __post_init__(self):
        if int(self.n_max) != self.n_max or self.n_max < 2:
            raise ValueError(f"n_max must be an integer >= 2, got {self.n_max!r}")

    @classmethod
    def for_amplitude(cls, beta: complex) -> FockCutoff:
        return cls(required_n_max(beta))

    def admits(self, beta: complex) -> bool:
        return self.n_max >= required_n_max(beta)

    def check(self, beta: complex) -> None:
        if not self.admits(beta):
            raise TruncationError(
                f"n_max={self.n_max} too small for amplitude {beta!r}; "
                f"need at least {required_n_max(beta)}"
            )


@dataclass(frozen=True, eq=False)
class FieldState:
    """Complex amplitudes of one cavity mode over a truncated Fock basis."""

    amplitudes: np.ndarray
    cutoff: FockCutoff

    def __post_init__(self):
        amps = np.array(self.amplitudes, dtype=complex)
        if amps.shape != (self.cutoff.n_max,):
            raise ValueError(
                f"expected {self.cutoff.n_max} amplitudes, got shape {amps.shape}"
            )
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @property
    def dim(self) -> int:
        return self.cutoff.n_max

    def norm_sq(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)

    def normalized(self) -> FieldState:
        return FieldState(self.amplitudes / math.sqrt(self.norm_sq()), self.cutoff)

    def mean_photon_number(self) -> float:
        probs = np.abs(self.amplitudes) ** 2
        return float(np.arange(self.dim) @ probs / probs.sum())

    def inner(self, other: FieldState) -> complex:
        """<self|other>."""
        return complex(np.vdot(self.amplitudes, other.amplitudes))

    def fidelity(self, other: FieldState) -> float:
        """|<self|other>|^2 between the normalized states."""
        return abs(self.inner(other)) ** 2 / (self.norm_sq() * other.norm_sq())

    def padded(self, cutoff: FockCutoff) -> FieldState:
        """Embed into a larger basis (zero amplitudes above the old cutoff)."""
        if cutoff.n_max < self.dim:
            raise TruncationError("cannot pad into a smaller basis")
        amps = np.zeros(cutoff.n_max, dtype=complex)
        amps[: self.dim] = self.amplitudes
        return FieldState(amps, cutoff)

    def __add__(self, other: FieldState) -> FieldState:
        _same_cutoff(self, other)
        return FieldState(self.amplitudes + other.amplitudes, self.cutoff)

    def __sub__(self, other: FieldState) -> FieldState:
        _same_cutoff(self, other)
        return FieldState(self.amplitudes - other.amplitudes, self.cutoff)

    def __mul__(self, c: complex) -> FieldState:
        return FieldState(c * self.amplitudes, self.cutoff)

    __rmul__ = __mul__


def _same_cutoff(a: FieldState, b: FieldState) -> None:
    if a.cutoff != b.cutoff:
        raise ValueError(f"cutoff mismatch: {a.cutoff.n_max} vs {b.cutoff.n_max}")


def fock_state(n: int, cutoff: FockCutoff) -> FieldState:
    if not 0 <= n < cutoff.n_max:
        raise TruncationError(f"|{n}> outside basis of size {cutoff.n_max}")
    amps = np.zeros(cutoff.n_max, dtype=complex)
    amps[n] = 1.0
    return FieldState(amps, cutoff)


def vacuum(cutoff: FockCutoff) -> FieldState:
    return fock_state(0, cutoff)


def coherent_amplitudes(alpha: complex, n_max: int) -> np.ndarray:
    """e^{-|alpha|^2/2} alpha^n / sqrt(n!) for n < n_max, evaluated in log space."""
    amps = np.zeros(n_max, dtype=complex)
    if alpha == 0:
        amps[0] = 1.0
        return amps
    n = np.arange(n_max)
    log_mag = -0.5 * abs(alpha) ** 2 + n * math.log(abs(alpha)) - 0.5 * gammaln(n + 1)
    amps[:] = np.exp(log_mag) * np.exp(1j * n * np.angle(alpha))
    return amps


def coherent_state(alpha: complex, cutoff: FockCutoff) -> FieldState:
    cutoff.check(alpha)
    return FieldState(coherent_amplitudes(alpha, cutoff.n_max), cutoff)


def cat_normalization(alpha: complex, sign: int) -> float:
    """N^{+/-} = 2 (1 +/- e^{-2|alpha|^2})."""
    return 2.0 * (1.0 + sign * math.exp(-2.0 * abs(alpha) ** 2))


def even_cat(alpha: complex, cutoff: FockCutoff) -> FieldState:
    """(|alpha> + |-alpha>) / sqrt(N+); only even photon numbers are populated."""
    cutoff.check(alpha)
    amps = coherent_amplitudes(alpha, cutoff.n_max)
    cat = np.zeros_like(amps)
    cat[0::2] = 2.0 * amps[0::2]
    return FieldState(cat / math.sqrt(cat_normalization(alpha, +1)), cutoff)


def odd_cat(alpha: complex, cutoff: FockCutoff) -> FieldState:
    """(|alpha> - |-alpha>) / sqrt(N-); only odd photon numbers are populated."""
    if alpha == 0:
        raise ValueError("odd cat state is undefined at alpha = 0 (N- = 0)")
    cutoff.check(alpha)
    amps = coherent_amplitudes(alpha, cutoff.n_max)
    cat = np.zeros_like(amps)
    cat[1::2] = 2.0 * amps[1::2]
    # -expm1 keeps N- accurate for small |alpha|
    n_minus = -2.0 * math.expm1(-2.0 * abs(alpha) ** 2)
    return FieldState(cat / math.sqrt(n_minus), cutoff)


def annihilation(cutoff: FockCutoff) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, cutoff.n_max, dtype=float)), 1).astype(complex)


def number_operator(cutoff: FockCutoff) -> np.ndarray:
    return np.diag(np.arange(cutoff.n_max, dtype=float)).astype(complex)


def displacement_matrix(beta: complex, cutoff: FockCutoff) -> np.ndarray:
    """D(beta) = exp(beta a^dag - beta* a) restricted to the truncated basis.

    The exponential is taken in a basis padded by the truncation rule for
    ``beta`` and then cut back, so the edge error of the truncated generator
    stays outside the returned block.
    """
    if beta == 0:
        return np.eye(cutoff.n_max, dtype=complex)
    big = cutoff.n_max + required_n_max(beta)
    a = np.diag(np.sqrt(np.arange(1, big, dtype=float)), 1).astype(complex)
    gen = beta * a.conj().T - np.conj(beta) * a
    return np.ascontiguousarray(expm(gen)[: cutoff.n_max, : cutoff.n_max])


def displacement_phase(beta: complex, mu: complex) -> complex:
    """Global phase in D(beta)|mu> = e^{i Im(beta mu*)} |beta + mu>."""
    return complex(np.exp(1j * (beta * np.conj(mu)).imag))


def number_phase_diagonal(phi: float, cutoff: FockCutoff) -> np.ndarray:
    """Diagonal of e^{i phi a^dag a}."""
    return np.exp(1j * phi * np.arange(cutoff.n_max))


def number_phase_matrix(phi: float, cutoff: FockCutoff) -> np.ndarray:
    return np.diag(number_phase_diagonal(phi, cutoff))
