import math

import numpy as np
import pytest

from cavity_teleport.fock import (
    FieldState,
    FockCutoff,
    TruncationError,
    annihilation,
    cat_normalization,
    coherent_state,
    displacement_matrix,
    displacement_phase,
    even_cat,
    fock_state,
    number_phase_matrix,
    odd_cat,
    required_n_max,
    vacuum,
)

from oracles import coherent_vec


def cut(beta):
    return FockCutoff.for_amplitude(beta)


def test_truncation_rule():
    assert required_n_max(0) == 10
    assert required_n_max(2) == math.ceil(4 + 12 + 10)
    assert required_n_max(4) == 50
    with pytest.raises(ValueError):
        FockCutoff(1)


def test_coherent_vacuum():
    psi = coherent_state(0, cut(0))
    assert psi.amplitudes[0] == 1
    assert np.all(psi.amplitudes[1:] == 0)


def test_coherent_mean_photon_number():
    assert coherent_state(3, cut(3)).mean_photon_number() == pytest.approx(9, abs=1e-8)


def test_coherent_ground_amplitude():
    # e^{-2}, frozen from the closed formula
    assert coherent_state(2, cut(2)).amplitudes[0] == pytest.approx(0.1353352832366127, abs=1e-15)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0, 3.0, 1 + 1j, -2.5j])
def test_coherent_matches_recursion_and_norm(alpha):
    c = cut(alpha)
    psi = coherent_state(alpha, c)
    assert np.allclose(psi.amplitudes, coherent_vec(alpha, c.n_max), atol=1e-14)
    assert abs(1 - psi.norm_sq()) <= 1e-9


def test_coherent_rejects_small_cutoff():
    with pytest.raises(TruncationError):
        coherent_state(3, FockCutoff(10))


@pytest.mark.parametrize("alpha", [0.3, 1.0, 2.0, 3.0])
def test_cat_parity_and_norm(alpha):
    c = cut(alpha)
    ev, od = even_cat(alpha, c), odd_cat(alpha, c)
    assert np.all(ev.amplitudes[1::2] == 0)
    assert np.all(od.amplitudes[0::2] == 0)
    assert ev.inner(od) == 0
    assert abs(1 - ev.norm_sq()) <= 1e-9
    assert abs(1 - od.norm_sq()) <= 1e-9


def test_cat_normalization_at_nine_photons():
    assert cat_normalization(3, +1) == pytest.approx(2 * (1 + math.exp(-18)), rel=1e-15)
    assert cat_normalization(3, -1) == pytest.approx(2, abs=1e-7)
    assert math.exp(-18) == pytest.approx(1.5e-8, rel=0.02)


def test_even_cat_alpha_one_has_no_one_photon_amplitude():
    assert even_cat(1, cut(1)).amplitudes[1] == 0


def test_odd_cat_rejects_zero():
    with pytest.raises(ValueError):
        odd_cat(0, cut(0))


def test_displacement_zero_is_identity():
    assert np.array_equal(displacement_matrix(0, FockCutoff(12)), np.eye(12))


@pytest.mark.parametrize("alpha", [1.0, 2.0])
def test_displacement_maps_minus_alpha_to_vacuum(alpha):
    c = cut(2 * alpha)
    d = displacement_matrix(alpha, c)
    out = FieldState(d @ coherent_state(-alpha, c).amplitudes, c)
    assert out.fidelity(vacuum(c)) >= 1 - 1e-8
    # unit phase for real alpha
    assert abs(out.amplitudes[0] - 1) < 1e-8


@pytest.mark.parametrize("alpha", [1.0, 2.0])
def test_displacement_doubles_alpha(alpha):
    c = cut(2 * alpha)
    out = FieldState(displacement_matrix(alpha, c) @ coherent_state(alpha, c).amplitudes, c)
    assert out.fidelity(coherent_state(2 * alpha, c)) >= 1 - 1e-8


def test_displacement_phase_complex():
    beta, mu = 0.7 + 0.4j, -0.3 + 1.1j
    c = cut(abs(beta) + abs(mu))
    out = displacement_matrix(beta, c) @ coherent_state(mu, c).amplitudes
    ref = displacement_phase(beta, mu) * coherent_state(beta + mu, c).amplitudes
    assert np.allclose(out, ref, atol=1e-8)


def _inner_block(beta, n_max):
    """Largest m such that D(-beta)|n> for n < m keeps its spread inside the basis."""
    r = abs(beta)
    return max(n for n in range(n_max) if n + r * r + 4 * r * math.sqrt(2 * n + 1) + 4 <= n_max) + 1


@pytest.mark.parametrize("n_max", [40, 80])
@pytest.mark.parametrize("beta", [0.5, 2.0, 1.5j])
def test_displacement_inverse_on_low_block(beta, n_max):
    c = FockCutoff(n_max)
    prod = displacement_matrix(beta, c) @ displacement_matrix(-beta, c)
    m = _inner_block(beta, n_max)
    assert np.abs(prod[:m, :m] - np.eye(m)).max() < 1e-8


def test_displacement_inverse_fails_near_edge():
    # the truncated product leaks at n close to n_max - 6|beta|; the inner block above is the usable range
    c = FockCutoff(40)
    prod = displacement_matrix(0.5, c) @ displacement_matrix(-0.5, c)
    assert np.abs(prod[:37, :37] - np.eye(37)).max() > 1e-3


def test_number_phase_identity_cases():
    c = FockCutoff(20)
    assert np.array_equal(number_phase_matrix(0, c), np.eye(20))
    assert np.abs(number_phase_matrix(2 * math.pi, c) - np.eye(20)).max() < 1e-12


@pytest.mark.parametrize("alpha", [1.0, 2.0, 3.0])
def test_number_phase_pi_flips_sign(alpha):
    c = cut(alpha)
    out = FieldState(number_phase_matrix(math.pi, c) @ coherent_state(alpha, c).amplitudes, c)
    assert out.fidelity(coherent_state(-alpha, c)) >= 1 - 1e-9


def test_number_phase_pi_conjugates_annihilation():
    c = FockCutoff(15)
    p = number_phase_matrix(math.pi, c)
    a = annihilation(c)
    assert np.abs(p.conj().T @ a @ p + a).max() < 1e-12


def test_field_state_arithmetic():
    c = FockCutoff(4)
    s = fock_state(1, c) + 2 * fock_state(2, c) - fock_state(3, c)
    assert s.norm_sq() == pytest.approx(6)
    assert s.normalized().norm_sq() == pytest.approx(1)
    assert s.padded(FockCutoff(6)).amplitudes[4] == 0
    with pytest.raises(ValueError):
        fock_state(1, c) + fock_state(1, FockCutoff(5))
    with pytest.raises(TruncationError):
        fock_state(4, c)
