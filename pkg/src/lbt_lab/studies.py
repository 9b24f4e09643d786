"""Experiment protocols shared by the command line and the test-suite.

Each function runs one study end to end and returns plain data (dicts,
arrays, trajectories) so callers can serialise or assert on it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import diffcore as dc
from .bilevel import (
    UnrollConfig,
    alignment_check,
    estimator_derivatives,
    hypergradient,
    surrogate_objective,
    unroll,
    unrolled_sensitivity,
)
from .diffcore import Rng
from .distributions import (
    GaussianMixture,
    divergence_landscape,
    landscape_descent,
    landscape_grid,
    make_dataset,
)
from .models import (
    Discriminator,
    GaussianEstimator,
    MlpGenerator,
    MoGEstimator,
    ParametricMoGGenerator,
    VaeEstimator,
    gan_objective,
    generator_gan_loss,
)
from .training import (
    DiscriminatorConfig,
    EstimatorConfig,
    GeneratorConfig,
    TrainConfig,
    population_data,
    train,
)

FIRST_ORDER_TOL = 1e-6
SECOND_ORDER_TOL = 1e-4


# --------------------------------------------------------------------------
# preset configurations


def escape_config(algorithm: str, seed: int = 0, iterations: int = 1500) -> TrainConfig:
    """Bimodal 1-D data, two-mean generator started collapsed near -3,
    unit-variance Gaussian estimator, small discriminator."""
    return TrainConfig(
        algorithm=algorithm, dataset="bimodal1d",
        generator=GeneratorConfig(kind="mog", init_means=[-3.0, -3.0], init_jitter=0.5),
        estimator=EstimatorConfig(kind="gaussian"),
        discriminator=DiscriminatorConfig(hidden=[32, 32]),
        unroll=UnrollConfig(K=5, lr=0.1), M=15, lambda_g=1.0,
        lr_theta=1e-2, lr_psi=1e-2, lr_phi=0.1, estimator_optimizer="sga",
        iterations=iterations, eval_every=max(1, iterations // 30), seed=seed,
    ).validate()


def mean_matching_config(seed: int = 0, iterations: int = 400, population: bool = False) -> TrainConfig:
    """LBT with the Gaussian estimator on the bimodal data, both generator
    means started near -3."""
    return TrainConfig(
        algorithm="lbt", dataset="bimodal1d",
        generator=GeneratorConfig(kind="mog", init_means=[-3.0, -3.0], init_jitter=0.5),
        estimator=EstimatorConfig(kind="gaussian"),
        unroll=UnrollConfig(K=5, lr=0.1, population=population), M=15,
        lr_theta=5e-2, lr_phi=0.1, estimator_optimizer="sga",
        iterations=iterations, eval_every=max(1, iterations // 20), seed=seed,
    ).validate()


def ring_config(algorithm: str, seed: int = 0, iterations: int = 2000, hidden: int = 64,
                K: int = 5, M: int = 15, metric_samples: int = 4000) -> TrainConfig:
    """MLP generator, VAE estimator and discriminator on the 8-mode ring.

    Step sizes are larger than Adam's default so that modes sharpen within
    a desk-scale budget; the inner steps use the Adam-shaped unroll because
    plain ascent with the untrained VAE's large gradients diverges.
    """
    h = [hidden, hidden]
    return TrainConfig(
        algorithm=algorithm, dataset="ring8",
        generator=GeneratorConfig(kind="mlp", hidden=h),
        estimator=EstimatorConfig(kind="vae", hidden=h),
        discriminator=DiscriminatorConfig(hidden=h),
        unroll=UnrollConfig(K=K, lr=1e-3, optimizer="adam"), M=M, lambda_g=1.0,
        lr_theta=5e-3, lr_psi=5e-3, lr_phi=3e-3, gan_loss="non_saturating",
        iterations=iterations, eval_every=max(1, iterations // 20),
        metric_samples=metric_samples, seed=seed,
    ).validate()


# --------------------------------------------------------------------------
# gradient checks


@dataclass
class CheckCase:
    name: str
    order: int
    error: float
    tol: float
    index: int | None = None

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tol)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        d["error"] = None if not np.isfinite(self.error) else self.error
        return d


def _case(name, order, result) -> CheckCase:
    tol = FIRST_ORDER_TOL if order == 1 else SECOND_ORDER_TOL
    return CheckCase(name, order, float(result.error), tol, result.index)


def gradcheck_suite(seed: int = 0) -> list[CheckCase]:
    """Central-difference checks of every objective the training loops
    differentiate: f_E per estimator (in phi and in x), the unrolled f_G in
    theta, the GAN objective in psi and theta, and the combined LBT-GAN
    objective. Second-order cases differentiate through one inner step."""
    rng = Rng(seed)
    cases = []
    x2 = rng.standard_normal((6, 2))
    w6 = rng.uniform(6) + 0.5
    w6 /= w6.sum()

    gauss = GaussianEstimator(2, learn_std=True)
    phi_g = 0.3 * rng.standard_normal(gauss.n_params)
    mog = MoGEstimator(3, 2)
    phi_m = mog.init_params(rng)
    phi_m[:3] = 0.2 * rng.standard_normal(3)
    vae = VaeEstimator(2, 2, (8, 8))
    phi_v = vae.init_params(rng)
    phi_v[-2:] = -1.0
    noise_v = vae.draw_noise(rng, 6)
    ests = [("gaussian", gauss, phi_g, None), ("mog", mog, phi_m, None), ("vae", vae, phi_v, noise_v)]

    for name, est, phi, noise in ests:
        label = "ELBO" if name == "vae" else "f_E"
        cases.append(_case(f"{label} {name} d/dphi", 1, dc.finite_difference_check(
            lambda p, est=est, noise=noise: est.log_likelihood(p, x2, None, noise), phi)))
        cases.append(_case(f"{label} {name} d/dx (weighted)", 1, dc.finite_difference_check(
            lambda xf, est=est, phi=phi, noise=noise: est.log_likelihood(phi, dc.reshape(xf, (6, 2)), w6, noise),
            x2)))
        cases.append(_case(f"{label} {name} hessian-vector in phi", 2, dc.second_order_check(
            lambda p, est=est, noise=noise: est.log_likelihood(p, x2, None, noise), phi)))

    # unrolled objective in theta for every estimator kind
    gen = ParametricMoGGenerator(np.array([[-1.0, 0.5], [0.8, 0.2], [0.1, -1.2]]), 0.5)
    draw = gen.draw(rng, 6)
    theta0 = gen.params + 0.1 * rng.standard_normal(gen.n_params)
    data = rng.standard_normal((5, 2))
    for name, est, phi, noise in ests:
        k = 3
        cfg = UnrollConfig(K=k, lr=0.05)
        noises = None if noise is None else [noise] * k
        data_noise = None if noise is None else vae.draw_noise(rng, 5)

        def fg(t, est=est, phi=phi, cfg=cfg, noises=noises, data_noise=data_noise):
            return surrogate_objective(gen, t, est, phi, data, cfg, draw, None, None, noises, data_noise)[0]

        cases.append(_case(f"f_G(unroll K=3) {name} d/dtheta", 1, dc.finite_difference_check(fg, theta0)))

        v = dc.constant(np.linspace(-1.0, 1.0, est.n_params))

        def one_step(t, est=est, phi=phi, noise=noise):
            phi1 = unroll(est, phi, gen.generate(t, draw), UnrollConfig(K=1, lr=0.05),
                          None, None if noise is None else [noise])
            return dc.sum(phi1 * v)

        cases.append(_case(f"inner step {name} d<phi1,v>/dtheta", 2, dc.finite_difference_check(one_step, theta0)))

    # adam-unrolled variant
    def fg_adam(t):
        return surrogate_objective(gen, t, mog, phi_m, data, UnrollConfig(K=3, lr=0.05, optimizer="adam"),
                                   draw)[0]
    cases.append(_case("f_G(adam unroll K=3) mog d/dtheta", 1, dc.finite_difference_check(fg_adam, theta0)))

    # GAN objective and the combined LBT-GAN objective
    disc = Discriminator(2, (8, 8))
    psi = disc.init_params(rng)
    mlp = MlpGenerator(2, 2, (8,))
    theta_mlp = mlp.init_params(rng)
    zdraw = mlp.draw(rng, 6)
    cases.append(_case("f_GAN d/dpsi", 1, dc.finite_difference_check(
        lambda p: gan_objective(disc, p, x2, mlp.generate(theta_mlp, zdraw)), psi)))
    cases.append(_case("f_GAN d/dtheta", 1, dc.finite_difference_check(
        lambda t: gan_objective(disc, psi, x2, mlp.generate(t, zdraw)), theta_mlp)))
    cases.append(_case("f_GAN non-saturating d/dtheta", 1, dc.finite_difference_check(
        lambda t: generator_gan_loss(disc, psi, mlp.generate(t, zdraw), non_saturating=True), theta_mlp)))

    def lbt_gan(t):
        fg, _, xg = surrogate_objective(mlp, t, vae, phi_v, data, UnrollConfig(K=2, lr=0.05), zdraw,
                                        noises=[noise_v] * 2, data_noise=vae.draw_noise(Rng(7), 5))
        return fg - 1.0 * generator_gan_loss(disc, psi, xg)

    cases.append(_case("f_G(unroll) - lambda f_GAN, MLP+VAE d/dtheta", 1,
                       dc.finite_difference_check(lbt_gan, theta_mlp)))
    return cases


# --------------------------------------------------------------------------
# influence function


def gaussian_one_step_identity(n: int = 7, lr: float = 0.1, seed: int = 0) -> dict:
    """K=1 unrolled sensitivity at the optimum against ``lr * d/dx (d f_E/d phi)``
    for the unit-variance Gaussian estimator on a weighted (population) batch."""
    rng = Rng(seed)
    x = 2.0 * rng.standard_normal((n, 1))
    w = rng.uniform(n) + 0.2
    w /= w.sum()
    est = GaussianEstimator(1)
    phi_star = np.array([w @ x[:, 0]])
    unrolled = unrolled_sensitivity(est, phi_star, x, UnrollConfig(K=1, lr=lr), w)
    _, _, mixed = estimator_derivatives(est, phi_star, x, w)
    analytic = lr * w.reshape(1, -1)
    return {
        "max_abs_error_vs_engine": float(np.max(np.abs(unrolled - lr * mixed))),
        "max_abs_error_vs_analytic": float(np.max(np.abs(unrolled - analytic))),
    }


def fit_mog_estimator(est: MoGEstimator, x, phi0, grad_tol: float = 1e-9, max_newton: int = 50):
    """Local maximum of the MoG log-likelihood: BFGS, then Newton polishing
    with a pseudo-inverse (the softmax logits have one flat direction)."""
    def neg(p):
        pv = dc.variable(p)
        f = est.log_likelihood(pv, x)
        (g,) = dc.gradient(f, [pv])
        return -f.item(), -g.value

    res = minimize(neg, phi0, jac=True, method="BFGS", options={"gtol": 1e-10, "maxiter": 5000})
    phi = res.x
    for _ in range(max_newton):
        grad, hess, _ = estimator_derivatives(est, phi, x)
        if np.linalg.norm(grad) < grad_tol:
            break
        phi = phi - np.linalg.pinv(hess, rcond=1e-12) @ grad
    grad, hess, _ = estimator_derivatives(est, phi, x)
    return phi, float(np.linalg.norm(grad)), hess


def influence_sweep(n_instances: int = 20, seed: int = 0, n: int = 24, lr: float = 0.05,
                    max_attempts: int = 200) -> dict:
    """Unrolled/influence inner products on randomised MoG-estimator instances.

    Each instance draws a random two-mode batch, fits a two-component MoG
    estimator to a local maximum and compares the one-step unrolled
    sensitivity with the influence function. Instances whose fit does not
    reach a non-degenerate strict local maximum are redrawn and counted.
    """
    root = Rng(seed)
    instances, rejected = [], 0
    attempt = 0
    while len(instances) < n_instances and attempt < max_attempts:
        rng = root.spawn(attempt)
        attempt += 1
        centres = np.sort(rng.uniform(2) * 6.0 - 3.0)
        comp = rng.categorical([0.5, 0.5], n)
        x = (centres[comp] + (0.3 + rng.uniform(n)) * rng.standard_normal(n)).reshape(-1, 1)
        est = MoGEstimator(2, 1, init_scale=float(np.std(x)))
        phi0 = est.init_params(rng)
        phi0[2:4] += float(np.mean(x))
        phi, gnorm, hess = fit_mog_estimator(est, x, phi0)
        mix = est.mixture(phi)
        eig = np.linalg.eigvalsh(hess)
        degenerate = (gnorm >= 1e-6 or np.min(mix.stds) < 1e-3 or np.min(mix.weights) < 1e-3
                      or np.sort(eig)[-2] >= 0)
        if degenerate:
            rejected += 1
            continue
        rep = alignment_check(est, phi, x, lr)
        instances.append({"attempt": attempt - 1, "inner_product": rep.inner_product,
                          "condition": rep.condition, "damped": rep.damped, "grad_norm": gnorm,
                          "positive": rep.positive})
    products = [i["inner_product"] for i in instances]
    return {
        "instances": instances,
        "n_instances": len(instances),
        "n_positive": int(sum(p > 0 for p in products)),
        "rejected_fits": rejected,
        "min_inner_product": float(min(products)) if products else None,
    }


# --------------------------------------------------------------------------
# stationarity at p_G = p_D


def stationarity_check(iterations: int = 500, K: int = 5, lr: float = 0.1, lr_theta: float = 1e-3) -> dict:
    """Population-mode hypergradient at ``p_G = p_D`` with the estimator at
    its optimum, then ``iterations`` LBT steps from that point."""
    data = make_dataset("bimodal1d")
    gen = ParametricMoGGenerator(data.means[:, 0], 1.0)
    draw, gw = gen.quadrature_draw()
    est = GaussianEstimator(1)
    x_gen = gen.generate(gen.params, draw).value
    phi_star = np.array([gw @ x_gen[:, 0]])
    dx, dw = population_data(data)
    hg = hypergradient(gen, gen.params, est, phi_star, dx, UnrollConfig(K=K, lr=lr, population=True),
                       draw, gw, dw)
    cfg = TrainConfig(algorithm="lbt", dataset="bimodal1d",
                      generator=GeneratorConfig(kind="mog", init_means=[-3.0, 3.0]),
                      estimator=EstimatorConfig(kind="gaussian"),
                      unroll=UnrollConfig(K=K, lr=lr, population=True), M=15, lr_phi=lr,
                      estimator_optimizer="sga", lr_theta=lr_theta, iterations=iterations, eval_every=1)
    traj = train(cfg)
    theta = np.stack([traj.column("theta_0"), traj.column("theta_1")], axis=1)
    drift = np.linalg.norm(theta - theta[0], axis=1)
    return {"hypergradient_norm": float(np.linalg.norm(hg.grad)), "phi_star": phi_star.tolist(),
            "iterations": iterations, "max_theta_drift": float(drift.max()),
            "final_theta": theta[-1].tolist()}


# --------------------------------------------------------------------------
# landscapes


def lattice(low: float = -5.0, high: float = 5.0, step: float = 0.1) -> np.ndarray:
    n = int(round((high - low) / step))
    return low + step * np.arange(n + 1)


def strict_local_min(L: np.ndarray, i: int, j: int) -> bool:
    """True when ``L[i, j]`` is below all of its (up to 8) lattice neighbours."""
    centre = L[i, j]
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == dj == 0:
                continue
            a, b = i + di, j + dj
            if 0 <= a < L.shape[0] and 0 <= b < L.shape[1] and not centre < L[a, b]:
                return False
    return True


def contour_study(low: float = -5.0, high: float = 5.0, step: float = 0.1, starts=((-3.5, -2.5),),
                  lr: float = 1.0, max_steps: int = 5000, tol: float = 1e-9) -> dict:
    data = make_dataset("bimodal1d")
    axis = lattice(low, high, step)
    grid = landscape_grid(axis, axis, data)
    out = {"axis": axis, "grid": {"bounds": grid.bounds, "counts": grid.counts}, "descent": []}
    for kind in ("KL", "JS"):
        out[kind] = divergence_landscape(data, axis, axis, kind, grid)
        for s in starts:
            end, value, gnorm, steps = landscape_descent(data, s, kind, grid, lr, max_steps, tol)
            out["descent"].append({"kind": kind, "start": list(map(float, s)), "end": end.tolist(),
                                   "value": value, "grad_norm": gnorm, "steps": steps})
    return out


def lattice_index(axis: np.ndarray, value: float) -> int:
    i = int(np.argmin(np.abs(axis - value)))
    if abs(axis[i] - value) > 1e-9:
        raise ValueError(f"{value} is not a lattice point")
    return i


# --------------------------------------------------------------------------
# K / M sensitivity


def first_reach(iterations: np.ndarray, values: np.ndarray, threshold: float):
    hit = np.nonzero(values >= threshold)[0]
    return int(iterations[hit[0]]) if hit.size else None


def sensitivity_sweep(base: TrainConfig, Ks=(1, 3, 5, 15), Ms=(5, 10, 15, 50), seeds=(0,), M_fixed: int = 15,
                      K_fixed: int = 5) -> dict:
    """f_G learning curves varying K at fixed M and M at fixed K."""
    curves = {"K": {}, "M": {}}
    for axis, values in (("K", Ks), ("M", Ms)):
        for v in values:
            for seed in seeds:
                d = base.to_dict()
                d["seed"] = seed
                d["unroll"]["K"] = v if axis == "K" else K_fixed
                d["M"] = v if axis == "M" else M_fixed
                traj = train(TrainConfig.from_dict(d))
                curves[axis].setdefault(v, {})[seed] = {
                    "iteration": traj.column("iteration").astype(int).tolist(),
                    "f_G": traj.column("f_G").tolist(),
                }
    return curves
