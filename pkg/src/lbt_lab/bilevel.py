"""Unrolled inner optimisation, hypergradients and the influence-function oracle.

The estimator objective is ``f_E(theta, phi) = E_z[log p_E(G(z; theta); phi)]``
and the generator objective ``f_G(phi) = E_data[log p_E(x; phi)]``. The
optimal ``phi*(theta)`` is replaced by ``phi^K``, K explicit ascent steps on
``f_E`` started from the current estimator parameters, and ``f_G(phi^K)`` is
differentiated w.r.t. ``theta`` through those steps. The generated batch is
drawn once per call and held fixed across the K steps, which makes the
surrogate a deterministic function of ``theta``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Node
from .models import Estimator, LatentDraw

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class BilevelError(ValueError):
    pass


class UnrollError(ArithmeticError):
    """Non-finite value inside the unrolled chain."""

    def __init__(self, step: int, what: str):
        self.step = step
        super().__init__(f"non-finite {what} at unroll step {step}")


@dataclass
class UnrollConfig:
    """K inner steps of size ``lr`` using plain gradient ascent (``"sga"``)
    or Adam (``"adam"``); ``population`` replaces sampled batches by
    quadrature expectations (1-D toy generators only)."""

    K: int = 5
    lr: float = 1e-3
    optimizer: str = "sga"
    population: bool = False

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise BilevelError(f"UnrollConfig invariant violated: K must be an integer >= 1, got {self.K}")
        if not self.lr > 0:
            raise BilevelError(f"UnrollConfig invariant violated: lr must be > 0, got {self.lr}")
        if self.optimizer not in ("sga", "adam"):
            raise BilevelError(f"UnrollConfig: optimizer must be 'sga' or 'adam', got {self.optimizer!r}")
        self.K = int(self.K)


def inner_step(est: Estimator, phi: Node, gen_samples, lr: float, weights=None, noise=None,
               step: int = 0) -> Node:
    """``phi + lr * d f_E / d phi`` as a node (differentiable in samples and phi)."""
    f = est.log_likelihood(phi, gen_samples, weights, noise)
    (g,) = dc.gradient(f, [phi])
    if not np.all(np.isfinite(g.value)):
        raise UnrollError(step, "estimator gradient")
    return phi + lr * g


def _leaf(phi0) -> Node:
    if isinstance(phi0, Node) and phi0.requires_grad:
        return phi0
    return dc.variable(phi0)


def unroll(est: Estimator, phi0, gen_samples, cfg: UnrollConfig, weights=None, noises=None) -> Node:
    """``phi^K``: K inner steps on a frozen generated batch.

    ``noises`` is a list of K estimator noise draws (VAE) or None.
    """
    phi = _leaf(phi0)
    noises = [None] * cfg.K if noises is None else list(noises)
    if len(noises) != cfg.K:
        raise BilevelError(f"unroll needs {cfg.K} noise draws, got {len(noises)}")
    if cfg.optimizer == "sga":
        for k in range(cfg.K):
            phi = inner_step(est, phi, gen_samples, cfg.lr, weights, noises[k], step=k)
        return phi
    m = v = None
    for k in range(cfg.K):
        f = est.log_likelihood(phi, gen_samples, weights, noises[k])
        (g,) = dc.gradient(f, [phi])
        if not np.all(np.isfinite(g.value)):
            raise UnrollError(k, "estimator gradient")
        m = (1 - ADAM_BETA1) * g if m is None else ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        sq = dc.square(g)
        v = (1 - ADAM_BETA2) * sq if v is None else ADAM_BETA2 * v + (1 - ADAM_BETA2) * sq
        m_hat = m * (1.0 / (1 - ADAM_BETA1 ** (k + 1)))
        v_hat = v * (1.0 / (1 - ADAM_BETA2 ** (k + 1)))
        # eps inside the root keeps the map differentiable where v_hat == 0
        phi = phi + cfg.lr * m_hat / dc.sqrt(v_hat + ADAM_EPS ** 2)
    return phi


def surrogate_objective(gen, theta: Node, est: Estimator, phi0, data_x, cfg: UnrollConfig,
                        draw: LatentDraw, gen_weights=None, data_weights=None,
                        noises=None, data_noise=None) -> tuple[Node, Node, Node]:
    """``(f_G(phi^K(theta)), phi^K, generated batch)``."""
    x_gen = gen.generate(theta, draw)
    phi_k = unroll(est, phi0, x_gen, cfg, gen_weights, noises)
    f_g = est.log_likelihood(phi_k, data_x, data_weights, data_noise)
    return f_g, phi_k, x_gen


@dataclass
class Hypergradient:
    grad: np.ndarray
    f_g: float
    phi_k: np.ndarray


def hypergradient(gen, theta, est: Estimator, phi0, data_x, cfg: UnrollConfig, draw: LatentDraw,
                  gen_weights=None, data_weights=None, noises=None, data_noise=None) -> Hypergradient:
    """Exact gradient of the unrolled surrogate ``f_G(phi^K(theta, phi0))``."""
    theta = dc.variable(theta)
    f_g, phi_k, _ = surrogate_objective(gen, theta, est, phi0, data_x, cfg, draw, gen_weights,
                                        data_weights, noises, data_noise)
    if not np.isfinite(f_g.value).all():
        raise UnrollError(cfg.K, "generator objective")
    (g,) = dc.gradient(f_g, [theta])
    if not np.all(np.isfinite(g.value)):
        raise UnrollError(cfg.K, "hypergradient")
    return Hypergradient(g.value.reshape(-1).copy(), f_g.item(), phi_k.value.copy())


# --------------------------------------------------------------------------
# influence-function oracle


class InfluencePreconditionError(BilevelError):
    pass


def _rows(vec: Node, wrt: list[Node]) -> list[list[np.ndarray]]:
    """Jacobian of a vector node, one backward sweep per entry."""
    rows = []
    for i in range(vec.shape[0]):
        grads = dc.gradient(dc.slice(vec, i), wrt)
        rows.append([g.value.reshape(-1) for g in grads])
    return rows


def estimator_derivatives(est: Estimator, phi, x, weights=None, noise=None):
    """``(grad, H, J)``: gradient of f_E in phi, its Hessian in phi and its
    Jacobian in the flattened samples."""
    phi = dc.variable(phi)
    xv = dc.variable(np.asarray(x, dtype=np.float64))
    f = est.log_likelihood(phi, xv, weights, noise)
    (g,) = dc.gradient(f, [phi])
    rows = _rows(g, [phi, xv])
    hess = np.array([r[0] for r in rows])
    mixed = np.array([r[1] for r in rows])
    return g.value.copy(), hess, mixed


@dataclass
class InfluenceResult:
    sensitivity: np.ndarray
    hessian: np.ndarray
    mixed: np.ndarray
    condition: float
    damped: bool


def influence_sensitivity(est: Estimator, phi_star, x, weights=None, noise=None,
                          grad_tol: float = 1e-6, ridge: float = 1e-8,
                          max_params: int = 200) -> InfluenceResult:
    """``d phi*/d x = -H^{-1} d/dx (d f_E / d phi)`` at an inner optimum.

    Hessians with condition number above 1e12 are solved with ``H - ridge*I``
    (H is negative semi-definite at a maximum) and flagged as ``damped``.
    """
    phi_star = np.asarray(phi_star, dtype=np.float64).reshape(-1)
    if phi_star.size > max_params:
        raise InfluencePreconditionError(f"{phi_star.size} parameters exceed the dense-Hessian limit {max_params}")
    grad, hess, mixed = estimator_derivatives(est, phi_star, x, weights, noise)
    gnorm = float(np.linalg.norm(grad))
    if gnorm >= grad_tol:
        raise InfluencePreconditionError(
            f"estimator is not at an inner optimum: |grad f_E| = {gnorm:.3e} >= {grad_tol:g}")
    cond = float(np.linalg.cond(hess))
    damped = not np.isfinite(cond) or cond > 1e12
    h = hess - ridge * np.eye(hess.shape[0]) if damped else hess
    sens = -np.linalg.solve(h, mixed)
    return InfluenceResult(sens, hess, mixed, cond, damped)


def unrolled_sensitivity(est: Estimator, phi0, x, cfg: UnrollConfig, weights=None, noises=None) -> np.ndarray:
    """``d phi^K / d x`` through the actual unrolled graph, shape (|phi|, n*D)."""
    xv = dc.variable(np.asarray(x, dtype=np.float64))
    phi_k = unroll(est, phi0, xv, cfg, weights, noises)
    return np.array([r[0] for r in _rows(phi_k, [xv])])


@dataclass
class SensitivityReport:
    unrolled: np.ndarray
    influence: np.ndarray
    inner_product: float
    condition: float
    damped: bool
    lr: float
    extras: dict = field(default_factory=dict)

    @property
    def positive(self) -> bool:
        return self.inner_product > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unrolled"] = self.unrolled.tolist()
        d["influence"] = self.influence.tolist()
        d["positive"] = self.positive
        return d


def alignment_check(est: Estimator, phi_star, x, lr: float, weights=None, noise=None) -> SensitivityReport:
    """Compare one-step unrolled sensitivity with the influence function.

    Positivity of the Frobenius inner product is reported, not enforced.
    """
    inf = influence_sensitivity(est, phi_star, x, weights, noise)
    unrolled = unrolled_sensitivity(est, phi_star, x, UnrollConfig(K=1, lr=lr), weights,
                                    None if noise is None else [noise])
    inner = float(np.sum(unrolled * inf.sensitivity))
    return SensitivityReport(unrolled, inf.sensitivity, inner, inf.condition, inf.damped, lr)
