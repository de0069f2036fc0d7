import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given
from hypothesis import strategies as st

from ssblab.basis import enumerate_sector
from ssblab.dynamics import diagonalize
from ssblab.gge import (BracketError, ChargeTargets, GgeParameters, InfeasibleTargetsError, commutator_ratio,
                        doublet_block_beta, doublet_block_energy, fit_beta, fit_perturbed, forward_map,
                        gge_density, gge_expectation, invert_single_charge, solve_multipliers)
from ssblab.operators import (HermitianOperator, ModelParameters, build_K, build_magnetization, build_parity,
                              build_perturbed, build_tfim, sign_star)


def charges(n, h, eps=0.0):
    b = enumerate_sector(n)
    ham = build_perturbed(b, ModelParameters(n, 1.1, 2.0, h, eps))
    c = sign_star(build_magnetization(b))
    pi = build_parity(b)
    return b, ham, c, build_K(c, pi), pi


def expm_oracle(ham, c, k, pi, p):
    r = p.beta * ham.toarray() + p.lambda_c * c.toarray() + p.lambda_k * k.toarray() + p.lambda_pi * pi.toarray()
    rho = sla.expm(-r)
    return rho / np.trace(rho)


# ---------------------------------------------------------------- density


@pytest.mark.parametrize("p", [GgeParameters(0.7, -0.4, 0.9, 0.3), GgeParameters(2.0, 1.5, 0.0, -0.2),
                               GgeParameters(0.0, 0.0, -1.1, 0.0), GgeParameters(-0.3, 0.2, 0.2, 0.2)])
@pytest.mark.parametrize("n", [5, 8])
def test_density_matches_expm(n, p):
    b, ham, c, k, pi = charges(n, 0.6)
    want = expm_oracle(ham, c, k, pi, p)
    rho = gge_density(ham, c, k, pi, p)
    assert np.abs(rho.toarray() - want).max() < 1e-13
    for op in (ham, c, k, pi, build_magnetization(b)):
        assert rho.expectation(op) == pytest.approx(np.trace(want @ op.toarray()).real, abs=1e-12)


def test_dense_path_matches_expm():
    # a perturbed Hamiltonian breaks parity, so the general path is used
    b, ham, c, k, pi = charges(7, 0.4, eps=0.05)
    p = GgeParameters(1.2, -0.5, 0.3, 0.1)
    rho = gge_density(ham, c, k, pi, p)
    assert np.abs(rho.toarray() - expm_oracle(ham, c, k, pi, p)).max() < 1e-13


def test_gibbs_and_infinite_temperature():
    b, ham, c, k, pi = charges(6, 0.9)
    rho = gge_density(ham, c, k, pi, GgeParameters(0.0))
    assert np.allclose(rho.toarray(), np.eye(b.dimension) / b.dimension, atol=1e-15)
    beta = 0.8
    rho = gge_density(ham, None, None, None, GgeParameters(beta))
    w, v = np.linalg.eigh(ham.toarray())
    gibbs = (v * np.exp(-beta * (w - w[0]))) @ v.T
    assert np.allclose(rho.toarray(), gibbs / np.trace(gibbs), atol=1e-14)


def test_large_charge_multiplier_polarises():
    b, ham, c, k, pi = charges(7, 0.5)
    rho = gge_density(ham, c, k, pi, GgeParameters(0.0, -50.0))
    assert rho.expectation(c) == pytest.approx(1.0, abs=1e-15)
    rho = gge_density(ham, c, k, pi, GgeParameters(0.0, 0.0, 50.0))
    assert rho.expectation(k) == pytest.approx(-1.0, abs=1e-15)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_density_positive_unit_trace(beta, lc, lk, lp):
    b, ham, c, k, pi = charges(5, 0.3)
    rho = gge_density(ham, c, k, pi, GgeParameters(beta, lc, lk, lp))
    assert rho.weights.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all(rho.weights >= 0)
    dense = rho.toarray()
    assert np.trace(dense).real == pytest.approx(1.0, abs=1e-13)
    assert np.linalg.eigvalsh(dense).min() > -1e-14


def test_density_argument_checks():
    b, ham, c, k, pi = charges(5, 0.3)
    with pytest.raises(ValueError):
        gge_density(ham, c, None, pi, GgeParameters(1.0, 0.1, 0.2))
    other = enumerate_sector(6)
    with pytest.raises(ValueError):
        gge_density(ham, sign_star(build_magnetization(other)), None, None, GgeParameters(1.0, 0.1))
    with pytest.raises(ValueError):
        GgeParameters(delta=0.0)
    with pytest.raises(ValueError):
        GgeParameters(beta=math.inf)


def test_gge_expectation_dense_and_factored():
    b, ham, c, k, pi = charges(5, 0.3)
    p = GgeParameters(0.5, 0.3)
    rho = gge_density(ham, c, k, pi, p)
    assert gge_expectation(rho.toarray(), c) == pytest.approx(gge_expectation(rho, c), abs=1e-14)


def test_commutator_ratio_of_gibbs_is_zero():
    b, ham, c, k, pi = charges(6, 0.5)
    rho = gge_density(ham, None, None, None, GgeParameters(1.3))
    assert commutator_ratio(ham, rho) < 1e-13
    rho = gge_density(ham, c, k, pi, GgeParameters(1.3, -2.0))
    assert commutator_ratio(ham, rho) > 1e-6


# ---------------------------------------------------------------- multipliers


def test_solve_multipliers_examples():
    lam = solve_multipliers(ChargeTargets(0.0, 0.9, 0.0, 0.0))
    assert lam == pytest.approx((0.0, -1.4722194895832204, 0.0), abs=1e-12)
    # a pure doublet superposition at phi = pi/3 has norm one and is capped at 1 - delta
    lam = solve_multipliers(ChargeTargets(0.0, 0.5, math.sqrt(3) / 2, 0.0), delta=2.6e-6)
    assert lam == pytest.approx((0.0, -3.38829, -5.86868), abs=1e-5)
    assert np.linalg.norm(lam) == pytest.approx(6.77657, abs=1e-5)
    assert solve_multipliers(ChargeTargets(0.0, 0.0, 0.0, 1.0)) == (0.0, 0.0, 0.0)
    lam = solve_multipliers(ChargeTargets(-0.9, 0.0, 0.0, 0.0))
    assert lam == pytest.approx((1.4722194895832204, 0.0, 0.0), abs=1e-12)


@given(st.floats(-0.99, 0.99), st.floats(-0.99, 0.99), st.floats(-0.99, 0.99))
def test_multipliers_round_trip(a, b, c):
    v = np.array([a, b, c])
    if not 1e-6 < np.linalg.norm(v) < 0.999:
        return
    lam = solve_multipliers(v)
    assert np.allclose(forward_map(lam), v, atol=1e-12)
    num = solve_multipliers(v, method="numeric")
    assert np.allclose(num, lam, atol=1e-9)


def test_multipliers_infeasible():
    with pytest.raises(InfeasibleTargetsError):
        ChargeTargets(0.8, 0.8, 0.0, 0.0)
    with pytest.raises(InfeasibleTargetsError):
        solve_multipliers(np.array([0.0, 1.1, 0.0]))
    with pytest.raises(ValueError):
        solve_multipliers(np.array([0.0, 0.3, 0.0]), method="other")


def test_forward_map_matches_two_level_expm():
    sig = [np.diag([1.0, -1.0]), np.array([[0, 1.0], [1, 0]]), np.array([[0, -1j], [1j, 0]])]
    lam = np.array([0.3, -1.2, 0.7])
    rho = sla.expm(-sum(l * s for l, s in zip(lam, sig)))
    rho /= np.trace(rho)
    want = [np.trace(rho @ s).real for s in sig]
    assert np.allclose(forward_map(lam), want, atol=1e-14)


def test_invert_single_charge():
    assert invert_single_charge(math.tanh(0.62158)) == pytest.approx(-0.62158, abs=1e-14)
    assert invert_single_charge(0.0) == 0.0
    assert math.tanh(0.55005) == pytest.approx(0.5005, abs=1e-4)
    with pytest.raises(InfeasibleTargetsError):
        invert_single_charge(1.0)


# ---------------------------------------------------------------- beta


def test_fit_beta_two_level():
    h = HermitianOperator(np.diag([0.0, 1.0]), "two", "H")
    assert fit_beta(h, None, None, None, (0.0, 0.0, 0.0), 0.25).beta == pytest.approx(math.log(3), abs=1e-8)
    h = HermitianOperator(np.diag([-1.0, 1.0]), "two", "H", ((1, np.array([0])), (-1, np.array([1]))))
    fit = fit_beta(h, None, None, None, (0.0, 0.0, 0.0), -0.8)
    assert fit.beta == pytest.approx(math.log(3), abs=1e-8)
    fit = fit_beta(h, None, None, None, (0.0, 0.0, 0.0), 0.0)
    assert fit.beta == pytest.approx(0.0, abs=1e-12)
    fit = fit_beta(h, None, None, None, (0.0, 0.0, 0.0), 0.5)
    assert fit.beta == pytest.approx(-math.atanh(0.5), abs=1e-8)


@pytest.mark.parametrize("beta0,lam", [(0.4, (0.0, -0.5, 0.3)), (1.7, (0.2, 1.0, 0.0)), (0.05, (0.0, 0.0, 0.0))])
def test_fit_beta_recovers_known_beta(beta0, lam):
    b, ham, c, k, pi = charges(8, 0.5)
    lp, lc, lk = lam
    energy = gge_density(ham, c, k, pi, GgeParameters(beta0, lc, lk, lp)).expectation(ham)
    fit = fit_beta(ham, c, k, pi, lam, energy, beta_guess=3.0, rtol=1e-13)
    assert fit.beta == pytest.approx(beta0, abs=1e-7)
    assert abs(fit.density.expectation(ham) - energy) < 1e-7


def test_fit_beta_unreachable_energy():
    b, ham, c, k, pi = charges(6, 0.5)
    ground = np.linalg.eigvalsh(ham.toarray())[0]
    with pytest.raises(BracketError):
        fit_beta(ham, c, k, pi, (0.0, 0.0, 0.0), ground - 1.0, beta_limit=200.0)


def test_doublet_model_matches_paired_two_level_blocks():
    ep, em = np.array([-3.0, -1.0, 0.5]), np.array([-2.9, -1.3, 0.9])
    lam = (0.1, -0.4, 0.25)
    beta = 0.7
    total_z = total_e = 0.0
    for a, b_ in zip(ep, em):
        blk = beta * np.diag([a, b_]) + lam[0] * np.diag([1.0, -1.0]) + lam[1] * np.array([[0, 1.0], [1, 0]]) \
            + lam[2] * np.array([[0, 1j], [-1j, 0]])
        rho = sla.expm(-blk)
        total_z += np.trace(rho).real
        total_e += np.trace(rho @ np.diag([a, b_])).real
    assert doublet_block_energy(ep, em, beta, lam) == pytest.approx(total_e / total_z, abs=1e-13)
    target = doublet_block_energy(ep, em, 1.1, lam)
    assert doublet_block_beta(ep, em, lam, target) == pytest.approx(1.1, abs=1e-10)


def test_fit_perturbed_round_trip():
    n, eps = 7, 0.01
    b, ham, c, k, pi = charges(n, 0.4, eps)
    lc0, beta0 = -0.62158, 0.9
    rho = gge_density(ham, c, None, None, GgeParameters(beta0, lc0))
    c_meas, energy = rho.expectation(c), rho.expectation(ham)
    beta, lc, fit = fit_perturbed(ham, c, math.tanh(0.62158), energy)
    assert lc == pytest.approx(lc0, abs=1e-12)
    # with C not commuting with H the tanh relation is approximate, but beta stays close
    assert abs(fit.density.expectation(ham) - energy) < 1e-7
    assert abs(c_meas - math.tanh(0.62158)) < 0.2
    assert beta == pytest.approx(beta0, abs=0.3)


def test_symmetric_gibbs_has_zero_charges():
    b = enumerate_sector(7)
    ham = build_tfim(b, ModelParameters(7, 1.1, 2.0, 0.3))
    c = sign_star(build_magnetization(b))
    pi = build_parity(b)
    rho = gge_density(ham, c, build_K(c, pi), pi, GgeParameters(1.5))
    assert abs(rho.expectation(c)) < 1e-13
    es = diagonalize(ham)
    assert rho.r_values.min() == pytest.approx(1.5 * es.values[0], abs=1e-12)
