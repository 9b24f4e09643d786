"""Gaussian mixtures, quadrature divergences and the synthetic datasets.

All logarithms are natural; the Jensen-Shannon divergence is therefore
bounded by ``ln 2``. Divergences against the data are taken data-first,
``KL(p_data || p_model)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr

from . import diffcore as dc
from .diffcore import Node, Rng

LOG_2PI = float(np.log(2.0 * np.pi))


class DistributionError(ValueError):
    pass


@dataclass
class GaussianMixture:
    """Weighted mixture of diagonal-covariance Gaussians.

    ``weights`` has shape (K,), ``means`` and ``stds`` shape (K, D).
    """

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        stds = np.asarray(self.stds, dtype=np.float64)
        self.stds = np.full(self.means.shape, float(stds)) if stds.ndim == 0 \
            else np.atleast_2d(stds).reshape(-1, self.means.shape[1]) if stds.size == self.means.size \
            else np.atleast_2d(stds)
        k, d = self.means.shape
        if k < 1 or d < 1:
            raise DistributionError(f"mixture needs K >= 1 and D >= 1, got K={k}, D={d}")
        if self.weights.shape != (k,):
            raise DistributionError(f"weights shape {self.weights.shape} does not match K={k}")
        if self.stds.shape != (k, d):
            raise DistributionError(f"stds shape {self.stds.shape} does not match means {self.means.shape}")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise DistributionError("weights must lie on the simplex (sum to 1 within 1e-12)")
        if np.any(self.stds <= 0):
            raise DistributionError("all stds must be positive")

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component(self, k: int) -> "GaussianMixture":
        return GaussianMixture(np.ones(1), self.means[k:k + 1], self.stds[k:k + 1])

    def log_density(self, x) -> np.ndarray:
        return mog_log_density(self, x).value

    def density(self, x) -> np.ndarray:
        return np.exp(self.log_density(x))

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "stds": self.stds.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        return cls(np.array(d["weights"]), np.array(d["means"]), np.array(d["stds"]))


def mixture_log_density(x, log_weights, means, log_stds) -> Node:
    """Differentiable ``log sum_k w_k N(x; mu_k, diag sigma_k^2)``.

    ``x`` is (n, D); ``log_weights`` (K,); ``means`` and ``log_stds`` (K, D).
    Any argument may be a node.
    """
    x = dc.constant(x)
    means = dc.constant(means)
    log_stds = dc.constant(log_stds)
    log_weights = dc.constant(log_weights)
    n, d = x.shape
    k = means.shape[0]
    diff = dc.reshape(x, (n, 1, d)) - dc.reshape(means, (1, k, d))
    inv_std = dc.exp(-log_stds)
    z = diff * dc.reshape(inv_std, (1, k, d))
    comp = -0.5 * dc.sum(dc.square(z), axis=2) - dc.reshape(dc.sum(log_stds, axis=1), (1, k)) \
        - 0.5 * d * LOG_2PI
    return dc.logsumexp(comp + dc.reshape(log_weights, (1, k)), axis=1)


def mog_log_density(mog: GaussianMixture, x) -> Node:
    """Log-density of ``mog`` at the rows of ``x`` (array or node), as a node."""
    xs = x.shape if isinstance(x, Node) else np.shape(x)
    if len(xs) == 1 and mog.dim == 1:
        x = dc.reshape(dc.constant(x), (xs[0], 1))
        xs = (xs[0], 1)
    if len(xs) != 2 or xs[1] != mog.dim:
        raise DistributionError(f"mog_log_density: x has shape {tuple(xs)}, mixture dimension is {mog.dim}")
    return mixture_log_density(x, np.log(mog.weights), mog.means, np.log(mog.stds))


def mog_sample(mog: GaussianMixture, n: int, rng: Rng) -> np.ndarray:
    """Draw ``n`` samples: component index from the weights, then a Gaussian draw."""
    if n < 0:
        raise DistributionError("n must be non-negative")
    idx = rng.categorical(mog.weights, n)
    eps = rng.standard_normal((n, mog.dim))
    return mog.means[idx] + mog.stds[idx] * eps


def gaussian_kl_closed_form(mean_p, std_p, mean_q, std_q) -> float:
    """KL(N(mean_p, diag std_p^2) || N(mean_q, diag std_q^2))."""
    mean_p, std_p, mean_q, std_q = (np.atleast_1d(np.asarray(a, dtype=np.float64))
                                    for a in (mean_p, std_p, mean_q, std_q))
    if np.any(std_p <= 0) or np.any(std_q <= 0):
        raise DistributionError("gaussian_kl_closed_form: stds must be positive")
    ratio = (std_p / std_q) ** 2
    return float(np.sum(np.log(std_q / std_p) + 0.5 * (ratio + ((mean_p - mean_q) / std_q) ** 2 - 1.0)))


@dataclass
class QuadratureGrid:
    """Tensor-product midpoint rule on an axis-aligned box.

    ``bounds`` is a list of (low, high) per dimension, ``counts`` the number
    of cells per dimension. ``nodes`` are the cell midpoints (N, D) and
    ``weights`` the cell volumes (N,).
    """

    bounds: list
    counts: list
    nodes: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.bounds = [(float(lo), float(hi)) for lo, hi in self.bounds]
        self.counts = [int(c) for c in self.counts]
        if len(self.bounds) != len(self.counts):
            raise DistributionError("bounds and counts must have the same length")
        axes = [self.axis(i) for i in range(len(self.bounds))]
        mesh = np.meshgrid(*axes, indexing="ij")
        self.nodes = np.stack([m.reshape(-1) for m in mesh], axis=1)
        vol = np.prod([(hi - lo) / c for (lo, hi), c in zip(self.bounds, self.counts)])
        self.weights = np.full(self.nodes.shape[0], vol)

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @property
    def shape(self) -> tuple:
        return tuple(self.counts)

    def axis(self, i: int) -> np.ndarray:
        lo, hi = self.bounds[i]
        h = (hi - lo) / self.counts[i]
        return lo + h * (np.arange(self.counts[i]) + 0.5)

    def volume(self) -> float:
        return float(np.prod([hi - lo for lo, hi in self.bounds]))

    @classmethod
    def covering(cls, mixtures, n_sigma: float = 8.0, spacing: float = 0.005) -> "QuadratureGrid":
        """Smallest grid (rounded out to whole units) reaching ``n_sigma``
        standard deviations past every component of every mixture."""
        lo = np.min([np.min(m.means - n_sigma * m.stds, axis=0) for m in mixtures], axis=0)
        hi = np.max([np.max(m.means + n_sigma * m.stds, axis=0) for m in mixtures], axis=0)
        lo, hi = np.floor(lo), np.ceil(hi)
        counts = [int(round((h - l) / spacing)) for l, h in zip(lo, hi)]
        return cls(list(zip(lo, hi)), counts)


def default_grid_1d() -> QuadratureGrid:
    return QuadratureGrid([(-10.0, 10.0)], [4001])


def tail_mass(mog: GaussianMixture, grid: QuadratureGrid) -> float:
    """Probability mass of ``mog`` outside the grid's box (union bound over axes)."""
    total = 0.0
    for d, (lo, hi) in enumerate(grid.bounds):
        below = np.exp(log_ndtr((lo - mog.means[:, d]) / mog.stds[:, d]))
        above = np.exp(log_ndtr((mog.means[:, d] - hi) / mog.stds[:, d]))
        total += float(mog.weights @ (below + above))
    return total


@dataclass
class DivergenceResult:
    value: float
    tail_mass: float
    coverage_warning: bool

    def __float__(self) -> float:
        return self.value


def divergence_from_log_densities(log_p, log_q, weights, kind: str):
    """Midpoint-rule KL(p||q) or JS(p, q) from log-densities on grid nodes.

    Arguments may be nodes, which makes the result differentiable.
    """
    log_p, log_q = dc.constant(log_p), dc.constant(log_q)
    w = dc.constant(weights)
    p = dc.exp(log_p)
    if kind == "KL":
        return dc.sum(w * p * (log_p - log_q))
    if kind == "JS":
        q = dc.exp(log_q)
        stacked = dc.concat([dc.reshape(log_p, (1, log_p.shape[0])),
                             dc.reshape(log_q, (1, log_q.shape[0]))], axis=0)
        log_m = dc.logsumexp(stacked, axis=0) - np.log(2.0)
        return 0.5 * dc.sum(w * p * (log_p - log_m)) + 0.5 * dc.sum(w * q * (log_q - log_m))
    raise DistributionError(f"unknown divergence kind {kind!r}; expected 'KL' or 'JS'")


def numeric_divergence(p: GaussianMixture, q: GaussianMixture, grid: QuadratureGrid,
                       kind: str = "KL") -> DivergenceResult:
    if p.dim != grid.dim or q.dim != grid.dim:
        raise DistributionError("mixture and grid dimensions differ")
    value = divergence_from_log_densities(
        mog_log_density(p, grid.nodes), mog_log_density(q, grid.nodes), grid.weights, kind).item()
    tail = max(tail_mass(p, grid), tail_mass(q, grid))
    return DivergenceResult(value, tail, tail > 1e-10)


def two_mode_model(theta1: float, theta2: float, std: float = 1.0) -> GaussianMixture:
    """The 1-D family 0.5 N(theta1, std^2) + 0.5 N(theta2, std^2)."""
    return GaussianMixture(np.array([0.5, 0.5]), np.array([[theta1], [theta2]]),
                           np.full((2, 1), std))


def landscape_grid(theta_axis1, theta_axis2, data: GaussianMixture,
                   spacing: float = 0.005) -> QuadratureGrid:
    """Quadrature grid covering the data and every lattice model by 8 std."""
    corners = [two_mode_model(a, b) for a in (np.min(theta_axis1), np.max(theta_axis1))
               for b in (np.min(theta_axis2), np.max(theta_axis2))]
    return QuadratureGrid.covering([data] + corners, spacing=spacing)


def divergence_landscape(data: GaussianMixture, theta_axis1, theta_axis2, kind: str,
                         grid: QuadratureGrid | None = None) -> np.ndarray:
    """Matrix ``L[i, j] = D(p_data || p_G(theta1=a_i, theta2=b_j))``.

    ``p_G`` is the equal-weight, unit-variance two-mode family.
    """
    if data.dim != 1:
        raise DistributionError("divergence_landscape expects the 1-D two-mode family")
    a1 = np.asarray(theta_axis1, dtype=np.float64)
    a2 = np.asarray(theta_axis2, dtype=np.float64)
    if grid is None:
        grid = landscape_grid(a1, a2, data)
    x = grid.nodes[:, 0]
    w = grid.weights
    log_p = data.log_density(grid.nodes)
    p = np.exp(log_p)
    # log N(x; t, 1) for every lattice coordinate, reused across rows
    log_n1 = -0.5 * (x[None, :] - a1[:, None]) ** 2 - 0.5 * LOG_2PI
    log_n2 = -0.5 * (x[None, :] - a2[:, None]) ** 2 - 0.5 * LOG_2PI
    out = np.empty((a1.size, a2.size))
    for i in range(a1.size):
        log_q = np.logaddexp(log_n1[i][None, :], log_n2) + np.log(0.5)
        if kind == "KL":
            out[i] = (p * (log_p - log_q)) @ w
        elif kind == "JS":
            log_m = np.logaddexp(log_p[None, :], log_q) - np.log(2.0)
            q = np.exp(log_q)
            out[i] = 0.5 * ((p * (log_p - log_m)) @ w) + 0.5 * ((q * (log_q - log_m)) @ w)
        else:
            raise DistributionError(f"unknown divergence kind {kind!r}; expected 'KL' or 'JS'")
    return out


def landscape_value_and_grad(data: GaussianMixture, theta, kind: str,
                             grid: QuadratureGrid) -> tuple[float, np.ndarray]:
    """Divergence of the two-mode model at ``theta`` and its gradient in theta."""
    t = dc.variable(np.asarray(theta, dtype=np.float64).reshape(2, 1))
    log_q = mixture_log_density(grid.nodes, np.log([0.5, 0.5]), t, np.zeros((2, 1)))
    log_p = data.log_density(grid.nodes)
    div = divergence_from_log_densities(log_p, log_q, grid.weights, kind)
    (g,) = dc.gradient(div, [t])
    return div.item(), g.value.reshape(-1)


def landscape_descent(data: GaussianMixture, start, kind: str, grid: QuadratureGrid,
                      lr: float = 1.0, max_steps: int = 5000, tol: float = 1e-9):
    """Plain gradient descent on the divergence landscape.

    Returns ``(endpoint, final_value, final_grad_norm, steps)``.
    """
    theta = np.asarray(start, dtype=np.float64).copy()
    value, g = landscape_value_and_grad(data, theta, kind, grid)
    steps = 0
    while steps < max_steps and np.linalg.norm(g) >= tol:
        theta = theta - lr * g
        value, g = landscape_value_and_grad(data, theta, kind, grid)
        steps += 1
    return theta, value, float(np.linalg.norm(g)), steps


DATASETS = ("ring8", "grid100", "grid25", "bimodal1d")


def make_dataset(kind: str) -> GaussianMixture:
    """Synthetic data mixtures.

    ring8: 8 modes on the unit circle at angles 2 pi k / 8, std 0.1.
    grid100: 10 x 10 lattice centred on the origin, spacing 0.2, std 0.01.
    grid25: reduced 5 x 5 lattice with the same spacing and std.
    bimodal1d: 0.5 N(-3, 1) + 0.5 N(3, 1).
    """
    if kind == "ring8":
        angles = 2.0 * np.pi * np.arange(8) / 8
        means = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return GaussianMixture(np.full(8, 1 / 8), means, np.full((8, 2), 0.1))
    if kind in ("grid100", "grid25"):
        side = 10 if kind == "grid100" else 5
        coords = 0.2 * (np.arange(side) - (side - 1) / 2)
        gx, gy = np.meshgrid(coords, coords, indexing="ij")
        means = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
        k = side * side
        return GaussianMixture(np.full(k, 1 / k), means, np.full((k, 2), 0.01))
    if kind == "bimodal1d":
        return two_mode_model(-3.0, 3.0)
    raise DistributionError(f"unknown dataset {kind!r}; expected one of {DATASETS}")
