import math

import numpy as np
import pytest

from oracles import dropout_enumeration_loop, fd_grad, gaussian_loglik_scipy, rel_err
from selfalign.core import Rng, TokenSequence
from selfalign.kernels import ALL_KERNELS, Aggregation, Distance, KernelSpec
from selfalign.losses import (
    ContinuousQuadruple,
    DiscretePair,
    DpoConfig,
    cdpo_grad,
    cdpo_loss,
    cdpo_margin,
    dpo_loss_discrete,
    dpo_loss_gaussian,
    dpo_margins,
    enumerate_dropout_oracle,
    gaussian_seq_loglik,
    kcdpo_grad,
    kcdpo_loss,
    kcdpo_loss_and_grad,
    kcdpo_margin,
    mc_predictive_estimate,
)
from selfalign.models import DropoutNet, Mode

LN2 = math.log(2.0)


def quad(gen, shape=(4, 5)):
    return ContinuousQuadruple(*(gen.normal(size=shape) for _ in range(4)))


def tiny_net(rate=0.3, seed=5):
    """Input 4 -> tanh 5 -> tanh 3 (dropout) -> linear 6 reshaped to (2, 3)."""
    g = np.random.default_rng(seed)
    weights = [g.normal(size=(4, 5)), g.normal(size=(5, 3)), g.normal(size=(3, 6))]
    biases = [g.normal(size=5) * 0.1, g.normal(size=3) * 0.1, g.normal(size=6) * 0.1]
    return DropoutNet(weights, biases, (2, 3), (1,), rate)


# -- discrete -------------------------------------------------------------------


def _batch():
    enc = np.zeros(3)
    return [DiscretePair(enc, TokenSequence([1, 2], 4), TokenSequence([2, 1], 4))]


def test_discrete_identical_policy_is_ln2():
    lp = lambda enc, z: -1.7 * z.tokens[0] - 0.3 * z.tokens[1]  # noqa: E731
    loss, margins = dpo_loss_discrete(DpoConfig(), _batch() * 3, lp, lp)
    assert abs(loss - LN2) <= 1e-15
    assert margins == [0.0, 0.0, 0.0]


def test_discrete_worked_example():
    # chosen log-ratio +1, rejected log-ratio -1, beta 0.2 -> margin 0.4
    ref = lambda enc, z: -3.0  # noqa: E731
    pol = lambda enc, z: -2.0 if z.tokens[0] == 1 else -4.0  # noqa: E731
    loss, margins = dpo_loss_discrete(DpoConfig(beta=0.2), _batch(), pol, ref)
    assert abs(margins[0] - 0.4) <= 1e-15
    assert abs(loss - 0.513015) < 5e-7
    assert abs(loss - math.log1p(math.exp(-0.4))) <= 1e-15


def test_discrete_errors():
    lp = lambda enc, z: 0.0  # noqa: E731
    with pytest.raises(ValueError):
        dpo_loss_discrete(DpoConfig(), [], lp, lp)
    same = [DiscretePair(np.zeros(2), TokenSequence([1], 3), TokenSequence([1], 3))]
    with pytest.raises(ValueError):
        dpo_loss_discrete(DpoConfig(), same, lp, lp)
    with pytest.raises(ValueError):
        dpo_loss_discrete(DpoConfig(), _batch(), lambda e, z: float("-inf"), lp)
    with pytest.raises(ValueError):
        dpo_margins(0.2, [np.nan], [0.0], [0.0], [0.0])
    with pytest.raises(ValueError):
        DpoConfig(beta=0.0)
    with pytest.raises(ValueError):
        DpoConfig(sigma_bar=-1.0)


def test_gamma_relation():
    assert DpoConfig(beta=0.2, sigma_bar=1.0).gamma == 0.1
    assert abs(DpoConfig(beta=3.0, sigma_bar=0.5).gamma - 6.0) <= 1e-15


# -- Gaussian likelihood ------------------------------------------------------------------


def test_gaussian_loglik_examples(gen):
    cfg = DpoConfig(sigma_bar=1.0 / math.sqrt(2.0 * math.pi))
    assert abs(gaussian_seq_loglik(cfg, [[0.3]], [[0.3]])) <= 1e-15
    cfg = DpoConfig(sigma_bar=0.7)
    h = gen.normal(size=(3, 4))
    assert abs(gaussian_seq_loglik(cfg, h, h) + 3 * 2 * math.log(2 * math.pi * 0.49)) <= 1e-12


def test_gaussian_loglik_matches_scipy(gen):
    for sigma in (0.3, 1.0, 2.5):
        cfg = DpoConfig(sigma_bar=sigma)
        for _ in range(20):
            h, mu = gen.normal(size=(8, 16)), gen.normal(size=(8, 16))
            assert abs(gaussian_seq_loglik(cfg, h, mu) - gaussian_loglik_scipy(h, mu, sigma)) <= 1e-10


# -- continuous losses --------------------------------------------------------------------


def test_cdpo_cancellations(gen):
    cfg = DpoConfig(beta=0.7, sigma_bar=0.8)
    H, Hr, Hw, Hl = quad(gen)
    assert abs(cdpo_loss(cfg, ContinuousQuadruple(H, H, Hw, Hl)) - LN2) <= 1e-15
    assert abs(cdpo_loss(cfg, ContinuousQuadruple(H, Hr, Hw, Hw)) - LN2) <= 1e-15


def test_equivalence_chain(gen):
    for _ in range(100):
        cfg = DpoConfig(beta=float(gen.uniform(0.05, 2.0)), sigma_bar=float(gen.uniform(0.5, 2.0)))
        q = quad(gen, (8, 16))
        c = cdpo_loss(cfg, q)
        assert abs(c - dpo_loss_gaussian(cfg, q)) <= 1e-9
        spec = KernelSpec(Aggregation.NONE, Distance.EUCLIDEAN, cfg.gamma)
        assert abs(kcdpo_loss(spec, q) - c) <= 1e-12


@pytest.mark.parametrize("spec", ALL_KERNELS, ids=[k.name for k in ALL_KERNELS])
def test_kcdpo_reference_equals_policy_is_ln2(spec, gen):
    H, _, Hw, Hl = quad(gen)
    assert abs(kcdpo_loss(spec, ContinuousQuadruple(H, H, Hw, Hl)) - LN2) <= 1e-12
    assert not kcdpo_grad(spec, ContinuousQuadruple(H, H, Hw, Hw)).any()


@pytest.mark.parametrize("spec", ALL_KERNELS, ids=[k.name for k in ALL_KERNELS])
def test_pair_swap_negates_margin(spec, gen):
    H, Hr, Hw, Hl = quad(gen)
    m = kcdpo_margin(spec, ContinuousQuadruple(H, Hr, Hw, Hl))
    ms = kcdpo_margin(spec, ContinuousQuadruple(H, Hr, Hl, Hw))
    assert abs(m + ms) <= 1e-12
    assert abs(kcdpo_loss(spec, ContinuousQuadruple(H, Hr, Hl, Hw)) - math.log1p(math.exp(m))) <= 1e-12


@pytest.mark.parametrize("spec", ALL_KERNELS, ids=[k.name for k in ALL_KERNELS])
def test_kcdpo_gradient_finite_differences(spec, gen):
    for _ in range(20):
        H, Hr, Hw, Hl = quad(gen)
        g = kcdpo_grad(spec, ContinuousQuadruple(H, Hr, Hw, Hl))
        fd = fd_grad(lambda x: float(kcdpo_loss(spec, ContinuousQuadruple(x, Hr, Hw, Hl))), H)
        assert rel_err(g, fd) <= 1e-5


def test_cdpo_gradient_finite_differences(gen):
    cfg = DpoConfig(beta=0.5, sigma_bar=0.9)
    for _ in range(20):
        H, Hr, Hw, Hl = quad(gen)
        g = cdpo_grad(cfg, ContinuousQuadruple(H, Hr, Hw, Hl))
        fd = fd_grad(lambda x: float(cdpo_loss(cfg, ContinuousQuadruple(x, Hr, Hw, Hl))), H)
        assert rel_err(g, fd) <= 1e-5


def test_gamma_scaling_of_gradient(gen):
    q = quad(gen)
    base = KernelSpec(Aggregation.AVG_POOL, Distance.COSINE, 3.0)
    for c in (0.5, 2.0, 7.0):
        scaled = KernelSpec(base.aggregation, base.distance, 3.0 * c)
        m0, m1 = kcdpo_margin(base, q), kcdpo_margin(scaled, q)
        assert abs(m1 - c * m0) <= 1e-12
        # grad = -sigmoid(-m) * gamma * d(kernel terms); strip the leading factor from both
        g0 = kcdpo_grad(base, q) / (3.0 / (1 + math.exp(m0)))
        g1 = kcdpo_grad(scaled, q) / (3.0 * c / (1 + math.exp(m1)))
        np.testing.assert_allclose(g0, g1, rtol=1e-10, atol=1e-12)


def test_batched_loss_and_grad_match_single(gen):
    spec = KernelSpec()
    qs = [quad(gen) for _ in range(5)]
    stacked = ContinuousQuadruple(*(np.stack([q[i] for q in qs]) for i in range(4)))
    losses, grads = kcdpo_loss_and_grad(spec, stacked)
    for i, q in enumerate(qs):
        assert abs(losses[i] - kcdpo_loss(spec, q)) <= 1e-14
        np.testing.assert_allclose(grads[i], kcdpo_grad(spec, q), atol=1e-14)


def test_losses_non_negative(gen):
    for spec in ALL_KERNELS:
        for _ in range(20):
            assert kcdpo_loss(spec, quad(gen)) >= 0


def test_quadruple_shape_check(gen):
    with pytest.raises(ValueError):
        cdpo_margin(DpoConfig(), ContinuousQuadruple(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2))))


# -- MC dropout -----------------------------------------------------------------------------


def test_mc_needs_two_samples():
    with pytest.raises(ValueError):
        mc_predictive_estimate(tiny_net(), np.ones(4), 1, Rng(0))


def test_mc_rate_zero_is_deterministic():
    net = tiny_net(rate=0.0)
    enc = np.array([0.3, -0.2, 0.8, 0.1])
    mu, var = mc_predictive_estimate(net, enc, 50, Rng(1))
    assert var == 0.0
    np.testing.assert_allclose(mu, net.forward(enc), rtol=0, atol=1e-15)
    exact_mu, exact_var = enumerate_dropout_oracle(net, enc)
    assert exact_var == 0.0
    np.testing.assert_array_equal(exact_mu, net.forward(enc))


def test_enumeration_matches_independent_loop():
    for rate in (0.1, 0.3, 0.6):
        net = tiny_net(rate)
        enc = np.array([0.5, -1.0, 0.25, 2.0])
        mean, var = enumerate_dropout_oracle(net, enc)
        ref_mean, ref_var = dropout_enumeration_loop(
            [w.tolist() for w in net.weights], [b.tolist() for b in net.biases], enc.tolist(), (1,), rate
        )
        np.testing.assert_allclose(mean.ravel(), ref_mean, rtol=0, atol=1e-12)
        assert abs(var - ref_var) <= 1e-12


def test_enumeration_rate_one_zeroes_layer():
    net = tiny_net(rate=1.0)
    enc = np.array([0.5, -1.0, 0.25, 2.0])
    mean, var = enumerate_dropout_oracle(net, enc)
    zeroed = net.forward_with_masks(enc[None], [np.zeros((1, 3))])[0]
    np.testing.assert_array_equal(mean, zeroed)
    np.testing.assert_allclose(mean, net.biases[-1].reshape(2, 3), atol=0)
    assert var == 0.0


def test_enumeration_rejects_wide_nets():
    net = DropoutNet.init(4, out_shape=(2, 2), hidden=16, n_hidden=2, dropout_rate=0.2)
    with pytest.raises(ValueError):
        enumerate_dropout_oracle(net, np.ones(4))


def test_mc_estimate_converges_to_enumeration():
    net = tiny_net(0.3)
    enc = np.array([0.5, -1.0, 0.25, 2.0])
    M = 20000
    mu, var = mc_predictive_estimate(net, enc, M, Rng(3))
    exact_mu, exact_var = enumerate_dropout_oracle(net, enc)
    # per-coordinate exact std, from the same enumeration
    samples_std = np.sqrt(_exact_coord_var(net, enc))
    assert np.all(np.abs(mu - exact_mu) <= 4 * samples_std / math.sqrt(M))
    assert abs(var - exact_var) / exact_var <= 0.05
    assert var >= 0


def _exact_coord_var(net, enc):
    import itertools

    outs, probs = [], []
    p = net.dropout_rate
    for bits in itertools.product((0, 1), repeat=3):
        outs.append(net.forward_with_masks(enc[None], [np.array(bits, dtype=float)[None]])[0])
        probs.append(np.prod([(1 - p) if b else p for b in bits]))
    outs, probs = np.stack(outs), np.array(probs)
    mean = np.tensordot(probs, outs, 1)
    return np.tensordot(probs, (outs - mean) ** 2, 1)


def test_stochastic_mode_draws_masks():
    net = tiny_net(0.5)
    enc = np.ones(4)
    a = net.forward(enc, Mode.STOCHASTIC, np.random.default_rng(0))
    b = net.forward(enc, Mode.STOCHASTIC, np.random.default_rng(0))
    np.testing.assert_array_equal(a, b)
