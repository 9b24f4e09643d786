"""Generators, density estimators and the discriminator.

Every model stores its parameters as one flat float64 vector (``params``)
described by a :class:`ParamLayout`. The forward functions are pure: they
take the flat vector as a graph node, so the bilevel code can treat the
estimator parameters as a single differentiable quantity.

Flat ordering is the order in which entries are declared in each model's
layout; for MLPs that is ``W0, b0, W1, b1, ...`` with row-major weights of
shape ``(fan_in, fan_out)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Node, Rng
from .distributions import LOG_2PI, GaussianMixture, mixture_log_density


class ModelError(ValueError):
    pass


class ParamLayout:
    def __init__(self, entries):
        self.entries = [(name, tuple(int(s) for s in shape)) for name, shape in entries]
        self.offsets = {}
        start = 0
        for name, shape in self.entries:
            size = int(np.prod(shape, dtype=np.int64))
            self.offsets[name] = (start, start + size, shape)
            start += size
        self.size = start

    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    def unpack(self, flat: Node) -> dict[str, Node]:
        out = {}
        for name, (a, b, shape) in self.offsets.items():
            out[name] = dc.reshape(dc.slice(flat, (slice(a, b),)), shape)
        return out

    def unpack_array(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {name: flat[a:b].reshape(shape) for name, (a, b, shape) in self.offsets.items()}

    def pack(self, arrays: dict) -> np.ndarray:
        flat = np.empty(self.size)
        for name, (a, b, shape) in self.offsets.items():
            flat[a:b] = np.asarray(arrays[name], dtype=np.float64).reshape(-1)
        return flat

    def describe(self) -> list[dict]:
        return [{"name": n, "shape": list(s), "offset": self.offsets[n][0]} for n, s in self.entries]


class Model:
    layout: ParamLayout
    params: np.ndarray

    def init_params(self, rng: Rng) -> np.ndarray:
        raise NotImplementedError

    def reset(self, rng: Rng) -> "Model":
        self.params = self.init_params(rng)
        return self

    @property
    def n_params(self) -> int:
        return self.layout.size


def flatten_params(model: Model) -> np.ndarray:
    return np.array(model.params, dtype=np.float64, copy=True)


def load_params(model: Model, flat) -> Model:
    flat = np.asarray(flat, dtype=np.float64).reshape(-1)
    if flat.size != model.layout.size:
        raise ModelError(f"load_params: expected {model.layout.size} values, got {flat.size}")
    model.params = flat.copy()
    return model


def checkpoint(model: Model) -> dict:
    """Flat-vector checkpoint with ordering metadata (JSON-serialisable)."""
    return {"model": type(model).__name__, "layout": model.layout.describe(),
            "params": model.params.tolist()}


# --------------------------------------------------------------------------
# MLP plumbing


def mlp_layout(prefix: str, sizes) -> list:
    entries = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        entries.append((f"{prefix}W{i}", (fan_in, fan_out)))
        entries.append((f"{prefix}b{i}", (fan_out,)))
    return entries


def xavier_init(layout: ParamLayout, rng: Rng) -> np.ndarray:
    """Xavier-uniform weights, zero biases, drawn in layout order."""
    arrays = {}
    for name, shape in layout.entries:
        if len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = (2.0 * rng.uniform(shape) - 1.0) * limit
        else:
            arrays[name] = np.zeros(shape)
    return layout.pack(arrays)


def mlp_forward(p: dict, prefix: str, x: Node, n_layers: int) -> Node:
    """tanh hidden layers, linear output."""
    h = x
    for i in range(n_layers):
        h = dc.matmul(h, p[f"{prefix}W{i}"]) + p[f"{prefix}b{i}"]
        if i < n_layers - 1:
            h = dc.tanh(h)
    return h


def weighted_mean(values: Node, weights=None) -> Node:
    if weights is None:
        return dc.mean(values)
    return dc.sum(values * dc.constant(weights))


def _as_batch(x, dim: int, who: str) -> Node:
    x = dc.constant(x)
    if x.ndim == 1 and dim == 1:
        x = dc.reshape(x, (x.shape[0], 1))
    if x.ndim != 2 or x.shape[1] != dim:
        raise ModelError(f"{who}: expected batch of shape (n, {dim}), got {x.shape}")
    return x


def _flat(params) -> Node:
    return params if isinstance(params, Node) else dc.constant(params)


# --------------------------------------------------------------------------
# generators


@dataclass
class LatentDraw:
    """Frozen randomness for one generator call.

    For MLP generators ``z`` is the latent batch. For the parametric MoG,
    ``onehot`` selects a component per row and ``eps`` is the standard
    normal noise, so that ``x = onehot @ means + (onehot @ stds) * eps``.
    """

    z: np.ndarray | None = None
    onehot: np.ndarray | None = None
    eps: np.ndarray | None = None

    @property
    def n(self) -> int:
        return (self.z if self.z is not None else self.eps).shape[0]


class MlpGenerator(Model):
    def __init__(self, latent_dim: int = 2, out_dim: int = 2, hidden=(128, 128)):
        self.latent_dim = int(latent_dim)
        self.out_dim = int(out_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.sizes = (self.latent_dim, *self.hidden, self.out_dim)
        self.layout = ParamLayout(mlp_layout("", self.sizes))
        self.params = np.zeros(self.layout.size)

    def init_params(self, rng: Rng) -> np.ndarray:
        return xavier_init(self.layout, rng)

    def draw(self, rng: Rng, n: int) -> LatentDraw:
        return LatentDraw(z=rng.standard_normal((n, self.latent_dim)))

    def generate(self, theta, draw: LatentDraw) -> Node:
        z = draw.z
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ModelError(f"generate: latent batch {z.shape} does not match latent_dim={self.latent_dim}")
        p = self.layout.unpack(_flat(theta))
        return mlp_forward(p, "", dc.constant(z), len(self.sizes) - 1)

    def sample(self, n: int, rng: Rng, params=None) -> np.ndarray:
        params = self.params if params is None else params
        return self.generate(params, self.draw(rng, n)).value


class ParametricMoGGenerator(Model):
    """Mixture of Gaussians whose means are the learnable parameters."""

    def __init__(self, means, stds=1.0, weights=None):
        means = np.asarray(means, dtype=np.float64)
        if means.ndim == 1:
            # a flat list means K one-dimensional components
            means = means.reshape(-1, 1)
        k, d = means.shape
        self.n_components, self.dim = k, d
        self.stds = np.broadcast_to(np.asarray(stds, dtype=np.float64), (k, d)).copy()
        self.weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
        self.layout = ParamLayout([("means", (k, d))])
        self.init_means = means.copy()
        self.params = means.reshape(-1).copy()

    @property
    def out_dim(self) -> int:
        return self.dim

    def init_params(self, rng: Rng) -> np.ndarray:
        return self.init_means.reshape(-1).copy()

    def means(self, params=None) -> np.ndarray:
        params = self.params if params is None else params
        return np.asarray(params).reshape(self.n_components, self.dim)

    def mixture(self, params=None) -> GaussianMixture:
        return GaussianMixture(self.weights, self.means(params), self.stds)

    def draw(self, rng: Rng, n: int) -> LatentDraw:
        idx = rng.categorical(self.weights, n)
        onehot = np.zeros((n, self.n_components))
        onehot[np.arange(n), idx] = 1.0
        return LatentDraw(onehot=onehot, eps=rng.standard_normal((n, self.dim)))

    def quadrature_draw(self, half_width: float = 10.0, cells: int = 4001) -> tuple[LatentDraw, np.ndarray]:
        """Deterministic draw + normalised weights replacing the expectation
        over (component, eps) by a midpoint rule (1-D generators only)."""
        if self.dim != 1:
            raise ModelError("population mode is only available for 1-D generators")
        h = 2.0 * half_width / cells
        e = -half_width + h * (np.arange(cells) + 0.5)
        q = np.exp(-0.5 * e ** 2)
        q /= q.sum()
        k = self.n_components
        onehot = np.repeat(np.eye(k), cells, axis=0)
        eps = np.tile(e, k).reshape(-1, 1)
        weights = np.repeat(self.weights, cells) * np.tile(q, k)
        return LatentDraw(onehot=onehot, eps=eps), weights / weights.sum()

    def generate(self, theta, draw: LatentDraw) -> Node:
        m = dc.reshape(_flat(theta), (self.n_components, self.dim))
        c = dc.constant(draw.onehot)
        return dc.matmul(c, m) + dc.constant((draw.onehot @ self.stds) * draw.eps)

    def sample(self, n: int, rng: Rng, params=None) -> np.ndarray:
        params = self.params if params is None else params
        return self.generate(params, self.draw(rng, n)).value


def generate(gen, theta, draw: LatentDraw) -> Node:
    return gen.generate(theta, draw)


# --------------------------------------------------------------------------
# estimators


class Estimator(Model):
    dim: int

    def log_prob(self, phi, x, noise=None) -> Node:
        """Per-sample (surrogate) log-likelihood, shape (n,)."""
        raise NotImplementedError

    def log_likelihood(self, phi, x, weights=None, noise=None) -> Node:
        """(Weighted) mean log-likelihood of the batch ``x`` as a scalar node."""
        x = _as_batch(x, self.dim, type(self).__name__)
        return weighted_mean(self.log_prob(phi, x, noise), weights)

    def draw_noise(self, rng: Rng, n: int):
        return None


class GaussianEstimator(Estimator):
    """N(mean, I), or N(mean, diag exp(2 log_std)) when ``learn_std``."""

    def __init__(self, dim: int = 1, learn_std: bool = False):
        self.dim = int(dim)
        self.learn_std = bool(learn_std)
        entries = [("mean", (self.dim,))]
        if self.learn_std:
            entries.append(("log_std", (self.dim,)))
        self.layout = ParamLayout(entries)
        self.params = np.zeros(self.layout.size)

    def init_params(self, rng: Rng) -> np.ndarray:
        return np.zeros(self.layout.size)

    def log_prob(self, phi, x, noise=None) -> Node:
        x = _as_batch(x, self.dim, "GaussianEstimator")
        p = self.layout.unpack(_flat(phi))
        diff = x - dc.reshape(p["mean"], (1, self.dim))
        if not self.learn_std:
            return -0.5 * dc.sum(dc.square(diff), axis=1) - 0.5 * self.dim * LOG_2PI
        log_std = p["log_std"]
        z = diff * dc.reshape(dc.exp(-log_std), (1, self.dim))
        return -0.5 * dc.sum(dc.square(z), axis=1) - dc.sum(log_std) - 0.5 * self.dim * LOG_2PI


class MoGEstimator(Estimator):
    """Mixture with softmax weights, free means and exp-parameterised stds."""

    def __init__(self, n_components: int, dim: int, init_scale: float = 1.0, init_log_std: float = 0.0):
        self.n_components = int(n_components)
        self.dim = int(dim)
        self.init_scale = float(init_scale)
        self.init_log_std = float(init_log_std)
        k, d = self.n_components, self.dim
        self.layout = ParamLayout([("logits", (k,)), ("means", (k, d)), ("log_stds", (k, d))])
        self.params = np.zeros(self.layout.size)

    def init_params(self, rng: Rng) -> np.ndarray:
        k, d = self.n_components, self.dim
        return self.layout.pack({
            "logits": np.zeros(k),
            "means": self.init_scale * rng.standard_normal((k, d)),
            "log_stds": np.full((k, d), self.init_log_std),
        })

    def params_for(self, mog: GaussianMixture) -> np.ndarray:
        """Flat parameters reproducing ``mog`` exactly."""
        return self.layout.pack({"logits": np.log(mog.weights), "means": mog.means,
                                 "log_stds": np.log(mog.stds)})

    def mixture(self, params=None) -> GaussianMixture:
        p = self.layout.unpack_array(self.params if params is None else np.asarray(params))
        w = np.exp(p["logits"] - p["logits"].max())
        return GaussianMixture(w / w.sum(), p["means"], np.exp(p["log_stds"]))

    def log_prob(self, phi, x, noise=None) -> Node:
        x = _as_batch(x, self.dim, "MoGEstimator")
        p = self.layout.unpack(_flat(phi))
        log_w = p["logits"] - dc.logsumexp(p["logits"])
        return mixture_log_density(x, log_w, p["means"], p["log_stds"])


class VaeEstimator(Estimator):
    """Small VAE whose ELBO stands in for the log-likelihood.

    Encoder ``x -> (mu_z, logvar_z)`` and decoder ``z -> (mu_x, logvar_x)``
    are tanh MLPs with per-dimension log-variances. ``noise`` has shape
    ``(n_samples, n, latent_dim)``; the ELBO is averaged over its samples.

    The decoder log-variance bias starts at ``decoder_log_var_init``. A small
    starting variance makes reconstruction matter from the first step; a
    unit-variance start lets the decoder explain the data as one broad
    Gaussian and the latent code is never used.
    """

    def __init__(self, dim: int = 2, latent_dim: int = 2, hidden=(128, 128), n_samples: int = 1,
                 decoder_log_var_init: float = float(np.log(1e-2))):
        self.dim = int(dim)
        self.decoder_log_var_init = float(decoder_log_var_init)
        self.latent_dim = int(latent_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_samples = int(n_samples)
        self.enc_sizes = (self.dim, *self.hidden, 2 * self.latent_dim)
        self.dec_sizes = (self.latent_dim, *self.hidden, 2 * self.dim)
        self.layout = ParamLayout(mlp_layout("enc.", self.enc_sizes) + mlp_layout("dec.", self.dec_sizes))
        self.params = np.zeros(self.layout.size)

    def init_params(self, rng: Rng) -> np.ndarray:
        arrays = self.layout.unpack_array(xavier_init(self.layout, rng))
        arrays[f"dec.b{len(self.dec_sizes) - 2}"][self.dim:] = self.decoder_log_var_init
        return self.layout.pack(arrays)

    def draw_noise(self, rng: Rng, n: int) -> np.ndarray:
        return rng.standard_normal((self.n_samples, n, self.latent_dim))

    def log_prob(self, phi, x, noise=None) -> Node:
        x = _as_batch(x, self.dim, "VaeEstimator")
        if noise is None:
            raise ModelError("VaeEstimator.log_prob needs reparameterisation noise (see draw_noise)")
        noise = np.asarray(noise, dtype=np.float64)
        n, zd, d = x.shape[0], self.latent_dim, self.dim
        if noise.ndim == 2:
            noise = noise[None]
        if noise.shape[1:] != (n, zd):
            raise ModelError(f"noise shape {noise.shape} does not match batch ({n}, {zd})")
        p = self.layout.unpack(_flat(phi))
        enc = mlp_forward(p, "enc.", x, len(self.enc_sizes) - 1)
        mu_z = dc.slice(enc, (slice(None), slice(0, zd)))
        lv_z = dc.slice(enc, (slice(None), slice(zd, 2 * zd)))
        kl = 0.5 * dc.sum(dc.square(mu_z) + dc.exp(lv_z) - lv_z - 1.0, axis=1)
        std_z = dc.exp(0.5 * lv_z)
        s = noise.shape[0]
        # stack the samples along the batch axis so the decoder runs once
        z = dc.concat([mu_z + std_z * dc.constant(noise[i]) for i in range(s)], axis=0) if s > 1 \
            else mu_z + std_z * dc.constant(noise[0])
        dec = mlp_forward(p, "dec.", z, len(self.dec_sizes) - 1)
        mu_x = dc.slice(dec, (slice(None), slice(0, d)))
        lv_x = dc.slice(dec, (slice(None), slice(d, 2 * d)))
        xs = dc.concat([x] * s, axis=0) if s > 1 else x
        rec = -0.5 * dc.sum(dc.square(xs - mu_x) * dc.exp(-lv_x) + lv_x, axis=1) - 0.5 * d * LOG_2PI
        if s > 1:
            rec = dc.mean(dc.reshape(rec, (s, n)), axis=0)
        return rec - kl


# --------------------------------------------------------------------------
# discriminator


class Discriminator(Model):
    def __init__(self, dim: int = 2, hidden=(128, 128)):
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.sizes = (self.dim, *self.hidden, 1)
        self.layout = ParamLayout(mlp_layout("", self.sizes))
        self.params = np.zeros(self.layout.size)

    def init_params(self, rng: Rng) -> np.ndarray:
        return xavier_init(self.layout, rng)

    def logit(self, psi, x) -> Node:
        x = _as_batch(x, self.dim, "Discriminator")
        p = self.layout.unpack(_flat(psi))
        return dc.reshape(mlp_forward(p, "", x, len(self.sizes) - 1), (x.shape[0],))

    def log_d(self, psi, x) -> Node:
        """log D(x), stable for large |logit|."""
        return dc.log_sigmoid(self.logit(psi, x))

    def log_one_minus_d(self, psi, x) -> Node:
        return dc.log_sigmoid(-self.logit(psi, x))


def discriminate(disc: Discriminator, x, psi=None) -> np.ndarray:
    """D(x) in (0, 1)."""
    psi = disc.params if psi is None else psi
    return dc.sigmoid(disc.logit(psi, x)).value


def gan_objective(disc: Discriminator, psi, x_real, x_fake, w_real=None, w_fake=None) -> Node:
    """E_data[log D(x)] + E_gen[log(1 - D(G(z)))]."""
    return weighted_mean(disc.log_d(psi, x_real), w_real) + \
        weighted_mean(disc.log_one_minus_d(psi, x_fake), w_fake)


def generator_gan_loss(disc: Discriminator, psi, x_fake, w_fake=None, non_saturating: bool = False) -> Node:
    """Quantity the generator minimises: E log(1 - D(G(z))) (saturating form)
    or -E log D(G(z)) (non-saturating form)."""
    if non_saturating:
        return -weighted_mean(disc.log_d(psi, x_fake), w_fake)
    return weighted_mean(disc.log_one_minus_d(psi, x_fake), w_fake)


def log_likelihood(est: Estimator, x, params=None, weights=None, noise=None) -> float:
    params = est.params if params is None else params
    return est.log_likelihood(params, x, weights, noise).item()
