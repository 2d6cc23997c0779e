"""Gate unitaries and channels for the atoms crossing the cavities.

Atom bases: three-level A atoms use (|e>, |g>) as indices (0, 1); resonant B
atoms use (|a>, |b>) as indices (0, 1).  Joint atom-field matrices are ordered
atom (x) field, matching the Kronecker convention of ``hilbert.tensor``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .fock import FockCutoff, number_phase_diagonal, required_n_max

TWO_PI = 2.0 * math.pi

E, G = 0, 1
A_UP, B_LOW = 0, 1


@dataclass(frozen=True)
class DispersiveParams:
    """Far-detuned coupling of a three-level atom to one cavity mode.

    Units are arbitrary but consistent; the defaults are chosen so that the
    derived phases are exactly phi1 = pi and phi2 = 0.
    """

    kappa_eh: float = 1.0
    delta_eh: float = 1.0
    tau: float = math.pi
    kappa_eg: float = 0.0
    delta_eg: float = 1.0

    def __post_init__(self):
        if self.delta_eh == 0:
            raise ValueError("delta_eh must be nonzero")
        if self.delta_eg == 0:
            raise ValueError("delta_eg must be nonzero")

    @property
    def phi1(self) -> float:
        return float(np.mod(self.kappa_eh**2 * self.tau / self.delta_eh, TWO_PI))

    @property
    def phi2(self) -> float:
        return float(np.mod(self.kappa_eg**2 * self.tau / self.delta_eg, TWO_PI))

    @classmethod
    def with_phases(cls, phi1: float, phi2: float = 0.0) -> DispersiveParams:
        """Parameters realizing the given phases with tau = 1 and unit couplings."""
        def split(phi):
            return (0.0, 1.0) if phi == 0 else (1.0, 1.0 / phi)

        k1, d1 = split(phi1)
        k2, d2 = split(phi2)
        return cls(kappa_eh=k1, delta_eh=d1, tau=1.0, kappa_eg=k2, delta_eg=d2)


@dataclass(frozen=True)
class JCParams:
    """Resonant coupling g (rad/s) applied for a time t (s)."""

    g: float
    t: float

    def __post_init__(self):
        if self.g * self.t < 0:
            raise ValueError("g*t must be non-negative")

    @property
    def gt(self) -> float:
        return self.g * self.t

    @classmethod
    def from_area(cls, gt: float) -> JCParams:
        return cls(g=1.0, t=float(gt))

    @classmethod
    def default_for(cls, alpha: complex) -> JCParams:
        """Near pi/2 pulse at the mean photon number of the displaced field |2 alpha>."""
        nbar = math.ceil(abs(2 * alpha) ** 2)
        return cls.from_area(math.pi / (2.0 * math.sqrt(nbar + 1)))


@dataclass(frozen=True)
class RamseyParams:
    theta: float = 0.0


def dispersive_phases(params: DispersiveParams, cutoff: FockCutoff) -> np.ndarray:
    """Diagonal of the dispersive gate on atom (x) field."""
    return np.concatenate([
        number_phase_diagonal(params.phi1, cutoff),
        number_phase_diagonal(params.phi2, cutoff),
    ])


def dispersive_gate(params: DispersiveParams, cutoff: FockCutoff) -> np.ndarray:
    """|e><e| (x) e^{i phi1 n} + |g><g| (x) e^{i phi2 n}."""
    return np.diag(dispersive_phases(params, cutoff))


def ramsey_r1() -> np.ndarray:
    """Maps (|e>+|g>)/sqrt2 to |e> and (|e>-|g>)/sqrt2 to |g>."""
    return np.array([[1.0, 1.0], [1.0, -1.0]], dtype=complex) / math.sqrt(2.0)


ramsey_r2 = ramsey_r1


def ramsey_r3(params: RamseyParams) -> np.ndarray:
    ph = np.exp(1j * params.theta)
    return np.array([[1.0, -1j * ph], [-1j / ph, 1.0]], dtype=complex) / math.sqrt(2.0)


def _jc_angles(gt: float, n_max: int) -> np.ndarray:
    """Rotation angle gt*sqrt(n+1) of block {|a,n>, |b,n+1>} for n = 0..n_max-2."""
    return gt * np.sqrt(np.arange(1, n_max, dtype=float))


def jc_gate(params: JCParams, cutoff: FockCutoff) -> np.ndarray:
    """Resonant exchange on B-atom (x) field.

    |b,n+1> -> cos(th)|b,n+1> - i sin(th)|a,n> and |a,n> -> cos(th)|a,n> - i sin(th)|b,n+1>
    with th = gt sqrt(n+1).  |b,0> and the edge state |a,n_max-1> are left invariant.
    """
    n = cutoff.n_max
    u = np.zeros((2 * n, 2 * n), dtype=complex)
    th = _jc_angles(params.gt, n)
    c, s = np.cos(th), np.sin(th)
    ia = np.arange(n - 1)              # |a,k>
    ib = n + np.arange(1, n)           # |b,k+1>
    u[ia, ia] = c
    u[ib, ib] = c
    u[ia, ib] = -1j * s
    u[ib, ia] = -1j * s
    u[n - 1, n - 1] = 1.0
    u[n, n] = 1.0
    return u


def jc_kraus(params: JCParams, cutoff: FockCutoff) -> tuple[np.ndarray, np.ndarray]:
    """Field operators (M_a, M_b) = (<a|U|b>, <b|U|b>) for a B atom entering in |b>."""
    n = cutoff.n_max
    th = _jc_angles(params.gt, n)
    m_a = np.zeros((n, n), dtype=complex)
    m_a[np.arange(n - 1), np.arange(1, n)] = -1j * np.sin(th)
    m_b = np.diag(np.cos(params.gt * np.sqrt(np.arange(n, dtype=float)))).astype(complex)
    return m_a, m_b


def jc_population_maps(params: JCParams, cutoff: FockCutoff) -> tuple[np.ndarray, np.ndarray]:
    """Action of the two Kraus branches on Fock populations, as column-stochastic pieces.

    Returns (T_a, T_b) with p' = T_a p for the |a> branch and p' = T_b p for |b>.
    """
    m_a, m_b = jc_kraus(params, cutoff)
    return np.abs(m_a) ** 2, np.abs(m_b) ** 2


def damping_loss(kappa: float, dt: float) -> float:
    """Loss parameter 1 - e^{-kappa dt}."""
    if kappa * dt < 0:
        raise ValueError("kappa*dt must be non-negative")
    return -math.expm1(-kappa * dt)


def damping_channel(kappa: float, dt: float, cutoff: FockCutoff,
                    tol: float = 0.0) -> list[np.ndarray]:
    """Amplitude-damping Kraus operators K_l, l = 0..n_max-1.

    K_l = sum_n sqrt(C(n,l)) gamma^{l/2} (1-gamma)^{(n-l)/2} |n-l><n|.  Operators
    whose largest squared entry is at most ``tol`` are dropped.
    """
    gamma = damping_loss(kappa, dt)
    n_max = cutoff.n_max
    if gamma == 0:
        return [np.eye(n_max, dtype=complex)]
    n = np.arange(n_max)
    out = []
    for l in range(n_max):
        src = n[l:]
        if gamma == 1.0:
            amp = np.where(src == l, 1.0, 0.0)
        else:
            log_binom = gammaln(src + 1) - gammaln(l + 1) - gammaln(src - l + 1)
            log_amp = 0.5 * log_binom + 0.5 * l * math.log(gamma) + 0.5 * (src - l) * math.log1p(-gamma)
            amp = np.exp(log_amp)
        if l > 0 and amp.max() ** 2 <= tol:
            continue
        k = np.zeros((n_max, n_max), dtype=complex)
        k[src - l, src] = amp
        out.append(k)
    return out


def damping_population_map(kappa: float, dt: float, cutoff: FockCutoff) -> np.ndarray:
    """Binomial loss acting on Fock populations: P[m, n] = C(n,m) (1-gamma)^m gamma^(n-m)."""
    return sum(np.abs(k) ** 2 for k in damping_channel(kappa, dt, cutoff))


def default_field_cutoff(alpha: complex) -> FockCutoff:
    return FockCutoff(required_n_max(alpha))
