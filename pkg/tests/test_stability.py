import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import SIGMOID_2, SIGMOID_4, TANH_2, random_certified_net, random_layer, random_net
from stablegates.rnn import LayerParams, Mode, NetworkParams, init_network, layer_gates, layer_step
from stablegates.stability import (
    CertificateRefused,
    IssGains,
    cascade_matrices,
    divergence_bound,
    empirical_delta_iss_check,
    first_step_below,
    gamma_input,
    inf_norm,
    iss_gains,
    iss_state_bound,
    network_certificate,
    phi_bar_htilde,
    propagate_bound,
    rho,
    sigma_bar_f,
)


def scalar(**kw):
    return LayerParams.zeros(1, 1).replace(**{k: np.array([[v]]) if k[0] in "WR" else np.array([v])
                                              for k, v in kw.items()})


def test_inf_norm_is_max_row_sum():
    assert inf_norm(np.array([[1.0, -2.0], [0.5, 0.5]])) == 3.0
    assert inf_norm(np.array([-4.0, 1.0])) == 4.0
    assert inf_norm(np.zeros((0,))) == 0.0


def test_gate_bounds_for_zero_and_scalar_layers():
    assert sigma_bar_f(LayerParams.zeros(2, 2)) == 0.5
    assert sigma_bar_f(scalar(W_f=1.0)) == pytest.approx(SIGMOID_2, abs=1e-16)
    assert phi_bar_htilde(LayerParams.zeros(2, 2)) == 0.0
    assert phi_bar_htilde(scalar(W_htilde=0.5, b_htilde=1.0)) == pytest.approx(TANH_2, abs=1e-16)


def test_rho_examples():
    assert rho(LayerParams.zeros(3, 2)) == 0.5
    p = scalar(R_f=2.0, W_htilde=0.7)
    assert sigma_bar_f(p) == pytest.approx(SIGMOID_4, abs=1e-16)
    assert rho(p) == pytest.approx(SIGMOID_4 + 0.5, abs=1e-15)
    assert not network_certificate(NetworkParams((p,), np.eye(1), np.zeros(1))).schur_stable


def test_gamma_examples():
    assert gamma_input(LayerParams.zeros(2, 3)) == 0.0
    assert gamma_input(scalar(W_htilde=1.0, W_f=1.0)) == 1.25


def test_iss_gain_examples():
    assert iss_gains(LayerParams.zeros(2, 2)) == IssGains(0.5, 0.0, 2.0)
    assert iss_gains(scalar(W_htilde=1.0)) == IssGains(0.5, 2.0, 2.0)


def test_dgn_rho_equals_forget_bound_exactly(rng):
    for _ in range(50):
        p = random_layer(rng, 4, 3, Mode.DGN, scale=rng.uniform(0.1, 3))
        assert rho(p) == sigma_bar_f(p)


ULP = np.finfo(float).eps


def _grid_layer(rng, n_h, n_in):
    return random_layer(rng, n_h, n_in, Mode.CFN, scale=rng.uniform(0.2, 2.0))


@pytest.mark.parametrize("n_h,n_in", [(1, 1), (1, 2), (2, 1)])
def test_gate_bounds_dominate_grid_maximum(rng, n_h, n_in):
    axis = np.linspace(-2, 2, 21)
    for _ in range(10):
        p = _grid_layer(rng, n_h, n_in)
        pts = np.array(list(itertools.product(axis, repeat=n_h + n_in)))
        g = layer_gates(p, pts[:, :n_in], pts[:, n_in:], Mode.CFN)
        # a few ulps of slack: the grid evaluation sums the same preactivation in another order
        assert np.max(np.abs(g.f)) <= sigma_bar_f(p) * (1 + 4 * ULP)
        assert np.max(np.abs(g.h_tilde)) <= phi_bar_htilde(p) * (1 + 4 * ULP)


def test_one_step_contraction_monte_carlo(rng):
    n = 20000
    for _ in range(5):
        p = scalar(**{k: rng.normal(0, 1.5) for k in ("W_f", "W_i", "W_htilde", "R_f", "R_i", "b_f", "b_i", "b_htilde")})
        ha, hb, ua, ub = (rng.uniform(-2, 2, (n, 1)) for _ in range(4))
        lhs = np.abs(layer_step(p, ha, ua) - layer_step(p, hb, ub))[:, 0]
        rhs = rho(p) * np.abs(ha - hb)[:, 0] + gamma_input(p) * np.abs(ua - ub)[:, 0]
        assert np.all(lhs <= rhs)


def test_iss_bound_holds_along_random_trajectories(rng):
    for _ in range(40):
        p = random_layer(rng, 3, 2, Mode.CFN, scale=rng.uniform(0.1, 2.0))
        h = rng.uniform(-2, 2, 3)
        h0 = inf_norm(h)
        u = rng.uniform(-2, 2, (200, 2))
        umax = float(np.max(np.abs(u)))
        for k in range(200):
            assert inf_norm(h) <= iss_state_bound(p, h0, umax, k) + 1e-12
            h = layer_step(p, h, u[k])


def test_cascade_single_layer():
    p = scalar(W_htilde=1.0, W_f=1.0)
    A, B = cascade_matrices(NetworkParams((p,), np.eye(1), np.zeros(1)))
    np.testing.assert_array_equal(A, [[rho(p)]])
    np.testing.assert_array_equal(B, [gamma_input(p)])


def test_cascade_two_layers_matches_hand_unrolling(rng):
    net = random_net(rng, 2, (3, 4), 1, scale=0.4)
    r1, r2 = (rho(p) for p in net.layers)
    g1, g2 = (gamma_input(p) for p in net.layers)
    A, B = cascade_matrices(net)
    np.testing.assert_allclose(A, [[r1, 0.0], [g2 * r1, r2]], rtol=1e-15)
    np.testing.assert_allclose(B, [g1, g2 * g1], rtol=1e-15)


def test_cascade_three_layers_is_lower_triangular(rng):
    net = random_net(rng, 2, (3, 3, 3), 1, scale=0.4)
    r = [rho(p) for p in net.layers]
    g = [gamma_input(p) for p in net.layers]
    A, B = cascade_matrices(net)
    np.testing.assert_allclose(A[2], [g[2] * g[1] * r[0], g[2] * r[1], r[2]], rtol=1e-14)
    np.testing.assert_allclose(B[2], g[2] * g[1] * g[0], rtol=1e-14)
    assert np.all(np.triu(A, 1) == 0)


def test_certificate_verdicts(rng):
    dgn = init_network(2, (5, 5, 5), 1, Mode.DGN, rng)
    cert = network_certificate(dgn)
    assert cert.schur_stable and cert.verdict == "certified (by design)"
    bad = scalar(R_f=2.0)
    good = LayerParams.zeros(1, 1)
    cfn = NetworkParams((good, bad), np.eye(1), np.zeros(1))
    cert = network_certificate(cfn)
    assert not cert.schur_stable
    assert cert.violating_layers == [2]
    assert "violated at layer(s) 2" in cert.verdict
    assert cert.delta_iss_input_gain is None


def test_zero_dgn_input_gain_is_zero():
    net = NetworkParams.zeros(1, (2,), 1, Mode.DGN)
    assert network_certificate(net).delta_iss_input_gain == 0.0


def test_small_recurrent_cfn_certifies():
    # bias chosen so that bias plus twice the recurrent row sum gives sigma_bar_f = 0.9
    b = np.log(0.9 / 0.1) - 0.02
    p = LayerParams.zeros(2, 1).replace(b_f=np.full(2, b), R_f=np.diag([0.01, 0.01]), R_i=np.diag([0.01, 0.01]),
                                        W_htilde=np.ones((2, 1)))
    net = NetworkParams((p,), np.ones((1, 2)), np.zeros(1))
    cert = network_certificate(net)
    assert cert.per_layer[0].sigma_bar_f == pytest.approx(0.9, abs=1e-12)
    assert cert.per_layer[0].rho < 0.9 + 0.0025 + 0.0025 + 1e-12
    assert cert.schur_stable and cert.verdict == "certified"


def test_marginal_flag():
    b = np.log(1.0 / 1e-12)  # sigma(b) = 1 - 1e-12, inside the marginal band around 1
    net = NetworkParams((scalar(b_f=b),), np.eye(1), np.zeros(1), Mode.DGN)
    cert = network_certificate(net)
    assert cert.marginal_layers == [1]


def test_divergence_bound_edge_cases(rng):
    net = random_certified_net(rng, 2, (3,), 1)
    cert = network_certificate(net)
    assert divergence_bound(cert, [1.7], 0.3, 0) == 1.7
    r = cert.per_layer[0].rho
    assert divergence_bound(cert, [1.3], 0.0, 25) == pytest.approx(r ** 25 * 1.3, rel=1e-12)


def test_divergence_bound_converges_to_input_gain(rng):
    net = random_certified_net(rng, 2, (3, 3), 1)
    cert = network_certificate(net)
    bound = divergence_bound(cert, [0.0, 0.0], 0.05, 10_000)
    assert bound == pytest.approx(cert.delta_iss_input_gain * 0.05, rel=1e-9)


def test_propagation_refused_without_certificate():
    cert = network_certificate(NetworkParams((scalar(R_f=2.0),), np.eye(1), np.zeros(1)))
    with pytest.raises(CertificateRefused):
        propagate_bound(cert, [1.0], [0.0])


def test_identical_pairs_have_zero_difference(rng):
    net = random_certified_net(rng, 2, (3, 2), 1)
    h0 = [rng.uniform(-2, 2, n) for n in net.hidden_sizes]
    u = rng.uniform(-1, 1, (50, 2))
    tr = empirical_delta_iss_check(net, h0, h0, u, u)
    assert not np.any(tr.state_diff) and tr.satisfied


def test_empirical_check_dominated_by_bound(rng):
    for _ in range(60):
        L = int(rng.integers(1, 4))
        net = random_certified_net(rng, 2, tuple(rng.integers(1, 5, L)), 1)
        ha = [rng.uniform(-2, 2, n) for n in net.hidden_sizes]
        hb = [rng.uniform(-2, 2, n) for n in net.hidden_sizes]
        ua = rng.uniform(-1, 1, (120, 2))
        ub = np.clip(ua + rng.uniform(-0.2, 0.2, ua.shape), -1, 1)
        tr = empirical_delta_iss_check(net, ha, hb, ua, ub)
        assert tr.satisfied, tr.verdict
        assert tr.max_utilization <= 1.0


def test_uncertified_network_still_gets_trace():
    net = NetworkParams((scalar(R_f=2.0, W_htilde=1.0),), np.eye(1), np.zeros(1))
    tr = empirical_delta_iss_check(net, [np.array([1.0])], [np.array([-1.0])], np.zeros((10, 1)), np.zeros((10, 1)))
    assert tr.bound is None and "refused" in tr.verdict
    assert tr.state_diff.shape == (11,)


def test_empirical_check_rejects_inputs_out_of_range():
    net = NetworkParams.zeros(1, (1,), 1, Mode.DGN)
    with pytest.raises(ValueError):
        empirical_delta_iss_check(net, [np.zeros(1)], [np.zeros(1)], np.full((3, 1), 1.5), np.zeros((3, 1)))


def test_dgn_forgets_no_later_than_bound(rng):
    net = init_network(2, (4, 4), 1, Mode.DGN, rng)
    cert = network_certificate(net)
    u = rng.uniform(-1, 1, (400, 2))
    tr = empirical_delta_iss_check(net, [np.full(4, 2.0)] * 2, [np.full(4, -2.0)] * 2, u, u, cert)
    k_emp, k_bound = first_step_below(tr.state_diff, 1e-6), first_step_below(tr.bound, 1e-6)
    assert k_emp is not None
    assert k_bound is None or k_emp <= k_bound


def test_first_step_below():
    assert first_step_below([3.0, 1.0, 0.5, 0.1], 0.6) == 2
    assert first_step_below([0.0, 0.0], 1.0) == 0
    assert first_step_below([1.0, 2.0], 0.5) is None
    assert first_step_below([0.1, 2.0, 0.1], 0.5) == 2


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), L=st.integers(1, 3), scale=st.floats(0.05, 2.0))
def test_dgn_always_certified(seed, L, scale):
    rng = np.random.default_rng(seed)
    net = random_net(rng, 2, (3,) * L, 1, Mode.DGN, scale=scale)
    cert = network_certificate(net)
    assert cert.schur_stable
    assert all(c.rho == c.sigma_bar_f for c in cert.per_layer)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_schur_stability_matches_spectral_radius(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, 2, (2, 3, 2), 1, Mode.CFN, scale=rng.uniform(0.05, 1.0))
    cert = network_certificate(net)
    spectral = max(abs(np.linalg.eigvals(cert.A_delta)))
    assert cert.schur_stable == (spectral < 1.0)
