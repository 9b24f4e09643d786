import json

import numpy as np
import pytest

from lbt_lab import diffcore as dc
from lbt_lab.bilevel import (
    BilevelError,
    InfluencePreconditionError,
    UnrollConfig,
    UnrollError,
    alignment_check,
    hypergradient,
    influence_sensitivity,
    inner_step,
    surrogate_objective,
    unroll,
    unrolled_sensitivity,
)
from lbt_lab.diffcore import Rng
from lbt_lab.distributions import make_dataset
from lbt_lab.models import (
    GaussianEstimator,
    LatentDraw,
    MlpGenerator,
    MoGEstimator,
    ParametricMoGGenerator,
    VaeEstimator,
)
from lbt_lab.training import population_data


class ShiftGenerator:
    """x = z + theta in one dimension."""

    def generate(self, theta, draw):
        t = theta if isinstance(theta, dc.Node) else dc.constant(theta)
        return dc.constant(draw.z) + dc.broadcast(dc.reshape(t, (1, 1)), draw.z.shape)


def test_unroll_config_invariants():
    with pytest.raises(BilevelError):
        UnrollConfig(K=0)
    with pytest.raises(BilevelError):
        UnrollConfig(lr=0.0)
    with pytest.raises(BilevelError):
        UnrollConfig(optimizer="rmsprop")


def test_inner_step_examples():
    est = GaussianEstimator(dim=1)
    x = dc.variable(np.array([[1.0], [3.0]]))
    phi1 = inner_step(est, dc.variable(np.zeros(1)), x, 0.1)
    assert phi1.item() == pytest.approx(0.2)
    (g,) = dc.gradient(dc.sum(phi1), [x])
    np.testing.assert_allclose(g.value, [[0.05], [0.05]])
    same = inner_step(est, dc.variable(np.array([0.7])), x, 1e-300)
    assert same.item() == 0.7


def test_inner_step_non_finite_raises():
    est = GaussianEstimator(dim=1)
    with pytest.raises(UnrollError) as exc:
        inner_step(est, dc.variable(np.zeros(1)), np.array([[np.inf]]), 0.1, step=3)
    assert exc.value.step == 3


def test_unroll_matches_composed_steps():
    est = MoGEstimator(2, 1).reset(Rng(1))
    x = np.random.default_rng(0).normal(size=(6, 1))
    cfg = UnrollConfig(K=3, lr=0.05)
    phi = dc.variable(est.params)
    manual = phi
    for k in range(3):
        manual = inner_step(est, manual, x, 0.05, step=k)
    assert unroll(est, est.params, x, cfg).value.tobytes() == manual.value.tobytes()
    one = unroll(est, est.params, x, UnrollConfig(K=1, lr=0.05))
    np.testing.assert_array_equal(one.value, inner_step(est, dc.variable(est.params), x, 0.05).value)


def test_unroll_noise_count_checked():
    vae = VaeEstimator(hidden=(3,)).reset(Rng(0))
    with pytest.raises(BilevelError):
        unroll(vae, vae.params, np.zeros((2, 2)), UnrollConfig(K=2), noises=[vae.draw_noise(Rng(1), 2)])


def test_population_unroll_contracts_geometrically():
    gen = ParametricMoGGenerator([-1.0, 2.5], stds=1.0)
    draw, w = gen.quadrature_draw()
    est = GaussianEstimator(dim=1)
    target = float(np.sum(w * draw.eps[:, 0]) + np.sum(w * (draw.onehot @ gen.means())[:, 0]))
    x = gen.generate(gen.params, draw).value
    lr = 0.2
    prev = np.inf
    for K in (1, 2, 5, 10, 30):
        phi = unroll(est, np.zeros(1), x, UnrollConfig(K=K, lr=lr), weights=w).item()
        err = abs(phi - target)
        assert err == pytest.approx(abs(target) * (1 - lr) ** K, rel=1e-9)
        assert err < prev
        prev = err


def test_hypergradient_location_shift_example():
    gen = ShiftGenerator()
    g = np.linspace(-10, 10, 20001)
    q = np.exp(-0.5 * g ** 2)
    draw = LatentDraw(z=g.reshape(-1, 1))
    data_x = g.reshape(-1, 1)
    est = GaussianEstimator(dim=1)
    eta, theta = 0.3, 1.7
    hg = hypergradient(gen, np.array([theta]), est, np.zeros(1), data_x, UnrollConfig(K=1, lr=eta), draw,
                       gen_weights=q / q.sum(), data_weights=q / q.sum())
    assert hg.grad[0] == pytest.approx(-eta ** 2 * theta, abs=1e-10)


def test_hypergradient_zero_at_stationary_point():
    data = make_dataset("bimodal1d")
    gen = ParametricMoGGenerator(data.means, stds=1.0)
    draw, w = gen.quadrature_draw()
    data_x, data_w = population_data(data)
    est = GaussianEstimator(dim=1)
    hg = hypergradient(gen, gen.params, est, np.zeros(1), data_x, UnrollConfig(K=5, lr=0.1, population=True),
                       draw, gen_weights=w, data_weights=data_w)
    assert np.linalg.norm(hg.grad) < 1e-6


def _surrogate_fd(gen, est, theta, phi0, data_x, cfg, draw, noises=None, data_noise=None):
    f = lambda th: surrogate_objective(gen, th, est, phi0, data_x, cfg, draw, noises=noises,
                                       data_noise=data_noise)[0]
    return dc.finite_difference_check(f, theta)


@pytest.mark.parametrize("kind", ["gaussian", "mog", "vae"])
@pytest.mark.parametrize("opt", ["sga", "adam"])
def test_hypergradient_matches_finite_differences(kind, opt):
    rng = Rng(11)
    gen = MlpGenerator(latent_dim=2, out_dim=2, hidden=(4,)).reset(rng.spawn(1))
    draw = gen.draw(rng.spawn(2), 5)
    data_x = np.random.default_rng(3).normal(size=(6, 2))
    cfg = UnrollConfig(K=2, lr=0.05, optimizer=opt)
    noises = data_noise = None
    if kind == "gaussian":
        est = GaussianEstimator(dim=2, learn_std=True)
        phi0 = np.array([0.1, -0.2, 0.05, 0.1])
    elif kind == "mog":
        est = MoGEstimator(2, 2).reset(rng.spawn(3))
        phi0 = est.params
    else:
        est = VaeEstimator(hidden=(4,)).reset(rng.spawn(3))
        phi0 = est.params
        noises = [est.draw_noise(rng.spawn(4 + k), 5) for k in range(cfg.K)]
        data_noise = est.draw_noise(rng.spawn(9), 6)
    res = _surrogate_fd(gen, est, gen.params, phi0, data_x, cfg, draw, noises, data_noise)
    assert res.error < 1e-4
    hg = hypergradient(gen, gen.params, est, phi0, data_x, cfg, draw, noises=noises, data_noise=data_noise)
    np.testing.assert_allclose(hg.grad, res.analytic, rtol=1e-12, atol=1e-15)


def test_influence_gaussian_analytic():
    est = GaussianEstimator(dim=2)
    x = np.random.default_rng(0).normal(size=(4, 2))
    res = influence_sensitivity(est, x.mean(axis=0), x)
    expected = np.tile(np.eye(2), (1, 4)) / 4
    np.testing.assert_allclose(res.sensitivity, expected, atol=1e-14)
    one = influence_sensitivity(est, x[:1].mean(axis=0), x[:1])
    np.testing.assert_allclose(one.sensitivity, np.eye(2), atol=1e-14)


def test_influence_full_gaussian_matches_mle_finite_differences():
    x = np.array([[0.3], [-1.1], [2.0]])
    est = GaussianEstimator(dim=1, learn_std=True)

    def mle(xs):
        return np.array([xs.mean(), np.log(xs.std())])

    res = influence_sensitivity(est, mle(x[:, 0]), x)
    h = 1e-6
    fd = np.zeros((2, 3))
    for i in range(3):
        up, dn = x[:, 0].copy(), x[:, 0].copy()
        up[i] += h
        dn[i] -= h
        fd[:, i] = (mle(up) - mle(dn)) / (2 * h)
    np.testing.assert_allclose(res.sensitivity, fd, atol=1e-5)


def test_influence_preconditions():
    est = GaussianEstimator(dim=1)
    x = np.array([[1.0], [2.0]])
    with pytest.raises(InfluencePreconditionError):
        influence_sensitivity(est, np.zeros(1), x)
    big = VaeEstimator(hidden=(16, 16))
    with pytest.raises(InfluencePreconditionError):
        influence_sensitivity(big, np.zeros(big.n_params), np.zeros((2, 2)))


def test_alignment_gaussian_inner_product():
    est = GaussianEstimator(dim=2)
    n, eta = 5, 0.1
    x = np.random.default_rng(1).normal(size=(n, 2))
    rep = alignment_check(est, x.mean(axis=0), x, eta)
    assert rep.inner_product == pytest.approx(eta * 2 / n, rel=1e-12)
    assert rep.positive
    tiny = alignment_check(est, x.mean(axis=0), x, 1e-9)
    assert 0 < tiny.inner_product < 1e-8
    json.dumps(rep.to_dict())


def test_one_step_identity_matches_mixed_derivative():
    est = GaussianEstimator(dim=1)
    x = np.random.default_rng(2).normal(size=(7, 1))
    eta = 0.1
    unrolled = unrolled_sensitivity(est, x.mean(axis=0), x, UnrollConfig(K=1, lr=eta))
    np.testing.assert_allclose(unrolled, np.full((1, 7), eta / 7), atol=1e-12)
