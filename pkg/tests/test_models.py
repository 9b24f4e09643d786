import json

import numpy as np
import pytest

from lbt_lab import diffcore as dc
from lbt_lab.diffcore import Rng
from lbt_lab.distributions import QuadratureGrid, make_dataset, mog_log_density, mog_sample
from lbt_lab.models import (
    Discriminator,
    LatentDraw,
    GaussianEstimator,
    MlpGenerator,
    ModelError,
    MoGEstimator,
    ParametricMoGGenerator,
    VaeEstimator,
    checkpoint,
    discriminate,
    flatten_params,
    gan_objective,
    generator_gan_loss,
    load_params,
    log_likelihood,
)
from lbt_lab.training import AdamState, adam_step


def fd_error(f, p):
    return dc.finite_difference_check(f, p).error


# -- generators ------------------------------------------------------------


def test_parametric_mog_sample_mean():
    gen = ParametricMoGGenerator([-3.0, 3.0])
    assert abs(gen.sample(50000, Rng(0)).mean()) < 0.05


def test_mlp_zero_weights_outputs_bias():
    gen = MlpGenerator(latent_dim=3, out_dim=2, hidden=(8, 8))
    arrays = gen.layout.unpack_array(np.zeros(gen.n_params))
    arrays["b2"][:] = [0.7, -1.1]
    load_params(gen, gen.layout.pack(arrays))
    out = gen.sample(10, Rng(1))
    np.testing.assert_array_equal(out, np.tile([0.7, -1.1], (10, 1)))


def test_parametric_mog_mean_gradient_is_weight():
    gen = ParametricMoGGenerator([[-1.0], [2.0]], weights=np.array([0.3, 0.7]))
    draw, w = gen.quadrature_draw()
    theta = dc.variable(gen.params)
    out = gen.generate(theta, draw)
    (g,) = dc.gradient(dc.sum(out * dc.constant(w.reshape(-1, 1))), [theta])
    np.testing.assert_allclose(g.value, [0.3, 0.7], atol=1e-9)


def test_generator_gradients_pass_fd():
    gen = MlpGenerator(latent_dim=2, out_dim=2, hidden=(5, 4)).reset(Rng(3))
    draw = gen.draw(Rng(4), 6)
    f = lambda th: dc.sum(dc.tanh(gen.generate(th, draw)))
    assert fd_error(f, gen.params) < 1e-6


def test_latent_dimension_mismatch():
    gen = MlpGenerator(latent_dim=2, hidden=(4,))
    with pytest.raises(ModelError):
        gen.generate(gen.params, LatentDraw(z=np.zeros((3, 5))))


# -- estimators ------------------------------------------------------------


def test_gaussian_estimator_examples():
    est = GaussianEstimator(dim=1)
    assert log_likelihood(est, np.zeros((1, 1)), params=np.zeros(1)) == pytest.approx(-0.918939, abs=1e-6)
    phi = dc.variable(np.zeros(1))
    (g,) = dc.gradient(est.log_likelihood(phi, np.array([[1.0], [3.0]])), [phi])
    assert g.item() == pytest.approx(2.0)


def test_gaussian_estimator_fixed_point_is_batch_mean():
    est = GaussianEstimator(dim=2)
    x = np.random.default_rng(0).normal(size=(40, 2))
    phi = np.zeros(2)
    for _ in range(300):
        v = dc.variable(phi)
        (g,) = dc.gradient(est.log_likelihood(v, x), [v])
        phi = phi + 0.5 * g.value
    np.testing.assert_allclose(phi, x.mean(axis=0), atol=1e-8)


def test_mog_estimator_matches_dataset_density():
    data = make_dataset("bimodal1d")
    est = MoGEstimator(2, 1)
    phi = est.params_for(data)
    grid = QuadratureGrid.covering([data])
    w = grid.weights * data.density(grid.nodes)
    ours = est.log_likelihood(phi, grid.nodes, weights=w / w.sum()).item()
    ref = np.sum(w / w.sum() * mog_log_density(data, grid.nodes).value)
    assert ours == pytest.approx(ref, abs=1e-6)


def test_mog_estimator_integrates_to_one():
    est = MoGEstimator(3, 2, init_scale=1.0).reset(Rng(5))
    grid = QuadratureGrid.covering([est.mixture()], spacing=0.02)
    dens = np.exp(est.log_prob(est.params, grid.nodes).value)
    assert abs(np.sum(dens * grid.weights) - 1.0) < 1e-4


@pytest.mark.parametrize("make", [
    lambda: GaussianEstimator(dim=2),
    lambda: GaussianEstimator(dim=2, learn_std=True),
    lambda: MoGEstimator(3, 2),
    lambda: VaeEstimator(dim=2, latent_dim=2, hidden=(6, 5), n_samples=2),
])
def test_log_likelihood_gradients_pass_fd(make):
    est = make().reset(Rng(7))
    if est.layout.size and not np.any(est.params):
        est.params = 0.3 * np.random.default_rng(1).standard_normal(est.n_params)
    x = np.random.default_rng(2).normal(size=(5, 2))
    noise = est.draw_noise(Rng(8), 5)
    f_phi = lambda p: est.log_likelihood(p, x, noise=noise)
    f_x = lambda xv: est.log_likelihood(est.params, dc.reshape(xv, (5, 2)), noise=noise)
    assert fd_error(f_phi, est.params) < 1e-5
    assert fd_error(f_x, x.reshape(-1)) < 1e-5


def test_estimator_dimension_mismatch():
    with pytest.raises(ModelError):
        GaussianEstimator(dim=2).log_likelihood(np.zeros(2), np.zeros((3, 1)))


def test_vae_needs_noise():
    vae = VaeEstimator(hidden=(4,)).reset(Rng(0))
    with pytest.raises(ModelError):
        vae.log_likelihood(vae.params, np.zeros((2, 2)))


def test_vae_elbo_rises_under_training():
    ring = make_dataset("ring8")
    rises = 0
    for seed in range(10):
        rng = Rng(seed)
        batch = mog_sample(ring, 128, rng)
        vae = VaeEstimator(hidden=(16, 16)).reset(rng.spawn(1))
        noise = vae.draw_noise(rng.spawn(2), 128)
        phi = vae.params
        start = vae.log_likelihood(phi, batch, noise=noise).item()
        state = AdamState.zeros_like(phi)
        for _ in range(200):
            v = dc.variable(phi)
            (g,) = dc.gradient(vae.log_likelihood(v, batch, noise=noise), [v])
            phi, state = adam_step(state, phi, g.value, 1e-3, maximize=True)
        end = vae.log_likelihood(phi, batch, noise=noise).item()
        assert np.isfinite(end)
        rises += end >= start
    assert rises >= 8


# -- flattening ------------------------------------------------------------


def test_flatten_round_trip():
    vae = VaeEstimator(hidden=(4, 3)).reset(Rng(1))
    other = VaeEstimator(hidden=(4, 3))
    load_params(other, flatten_params(vae))
    np.testing.assert_array_equal(other.params, vae.params)
    assert GaussianEstimator(dim=2).n_params == 2
    with pytest.raises(ModelError):
        load_params(other, np.zeros(3))


def test_flat_coordinate_touches_one_parameter():
    est = MoGEstimator(2, 2)
    base = est.layout.unpack_array(np.zeros(est.n_params))
    for i in range(est.n_params):
        flat = np.zeros(est.n_params)
        flat[i] = 1.0
        arrays = est.layout.unpack_array(flat)
        changed = sum(int(np.count_nonzero(arrays[k] != base[k])) for k in arrays)
        assert changed == 1


def test_checkpoint_is_json():
    ck = checkpoint(MlpGenerator(hidden=(3,)).reset(Rng(2)))
    back = json.loads(json.dumps(ck))
    assert back["layout"][0] == {"name": "W0", "shape": [2, 3], "offset": 0}
    assert len(back["params"]) == sum(np.prod(e["shape"]) for e in back["layout"])


# -- discriminator ---------------------------------------------------------


def test_zero_discriminator_is_half():
    disc = Discriminator(hidden=(4,))
    np.testing.assert_array_equal(discriminate(disc, np.random.default_rng(0).normal(size=(7, 2))), 0.5)


def test_log_d_stable_at_large_logits():
    disc = Discriminator(dim=1, hidden=(1,))
    arrays = disc.layout.unpack_array(np.zeros(disc.n_params))
    arrays["b1"][:] = 50.0
    psi = disc.layout.pack(arrays)
    x = np.zeros((1, 1))
    assert np.isfinite(disc.log_d(psi, x).item()) and np.isfinite(disc.log_one_minus_d(psi, x).item())
    arrays["b1"][:] = -50.0
    psi = disc.layout.pack(arrays)
    assert np.isfinite(disc.log_d(psi, x).item())


def test_discriminator_gradients_pass_fd():
    disc = Discriminator(hidden=(5, 4)).reset(Rng(3))
    rng = np.random.default_rng(4)
    real, fake = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    assert fd_error(lambda p: gan_objective(disc, p, real, fake), disc.params) < 1e-6
    for ns in (False, True):
        f = lambda xv: generator_gan_loss(disc, disc.params, dc.reshape(xv, (6, 2)), non_saturating=ns)
        assert fd_error(f, fake.reshape(-1)) < 1e-6


def test_generator_loss_forms():
    disc = Discriminator(hidden=(3,)).reset(Rng(1))
    x = np.random.default_rng(2).normal(size=(4, 2))
    d = discriminate(disc, x)
    assert generator_gan_loss(disc, disc.params, x).item() == pytest.approx(np.mean(np.log1p(-d)))
    assert generator_gan_loss(disc, disc.params, x, non_saturating=True).item() == pytest.approx(-np.mean(np.log(d)))
