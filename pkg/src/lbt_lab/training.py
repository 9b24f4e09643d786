"""Training loops: LBT, LBT-GAN and the vanilla GAN baseline.

Each run draws from independent random streams derived from the seed, one
per purpose (model initialisation, estimator batches, generator batches,
data batches, discriminator batches, evaluation). Turning the discriminator
on or off therefore never perturbs the estimator/generator randomness, and
LBT-GAN with ``lambda_g = 0`` replays the LBT run exactly.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffcore as dc
from .bilevel import BilevelError, UnrollConfig, UnrollError, surrogate_objective
from .diffcore import Rng
from .distributions import GaussianMixture, default_grid_1d, make_dataset, mog_sample
from .metrics import ModeSpec, evaluate_samples
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

log = logging.getLogger(__name__)

ALGORITHMS = ("lbt", "lbt_gan", "gan")

# stream keys for Rng.spawn
_INIT_GEN, _INIT_EST, _INIT_DISC = 11, 12, 13
_EST, _GEN, _DATA, _DISC, _EVAL = 21, 22, 23, 24, 25


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, trajectory: "Trajectory", failure: dict):
        self.trajectory = trajectory
        self.failure = failure
        super().__init__(f"training aborted at iteration {failure.get('iteration')}: {failure.get('reason')}")


@dataclass
class GeneratorConfig:
    kind: str = "mlp"
    hidden: list = field(default_factory=lambda: [128, 128])
    latent_dim: int = 2
    init_means: list | None = None
    init_jitter: float = 0.0
    std: float = 1.0

    def validate(self):
        if self.kind not in ("mlp", "mog"):
            raise ConfigError(f"generator.kind must be 'mlp' or 'mog', got {self.kind!r}")
        if self.kind == "mog" and not self.init_means:
            raise ConfigError("generator.init_means is required for a 'mog' generator")


@dataclass
class EstimatorConfig:
    kind: str = "vae"
    hidden: list = field(default_factory=lambda: [128, 128])
    latent_dim: int = 2
    n_samples: int = 1
    learn_std: bool = False
    components: int = 8
    init_scale: float = 1.0
    decoder_log_var_init: float = -4.605170185988091

    def validate(self):
        if self.kind not in ("gaussian", "mog", "vae"):
            raise ConfigError(f"estimator.kind must be 'gaussian', 'mog' or 'vae', got {self.kind!r}")


@dataclass
class DiscriminatorConfig:
    hidden: list = field(default_factory=lambda: [128, 128])
    steps: int = 1

    def validate(self):
        if self.steps < 1:
            raise ConfigError("discriminator.steps must be >= 1")


@dataclass
class TrainConfig:
    """One training run. Defaults follow Adam's default setting with
    learning rates 1e-3, K=5 unrolling steps and M=15 estimator steps."""

    algorithm: str = "lbt"
    dataset: str = "ring8"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    unroll: UnrollConfig = field(default_factory=UnrollConfig)
    M: int = 15
    lambda_g: float = 1.0
    lr_theta: float = 1e-3
    lr_phi: float = 1e-3
    lr_psi: float = 1e-3
    estimator_optimizer: str = "adam"
    gan_loss: str = "saturating"
    batch_size: int = 128
    iterations: int = 1000
    seed: int = 0
    eval_every: int = 50
    eval_size: int = 2048
    metric_samples: int = 0

    def validate(self) -> "TrainConfig":
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.M < 1:
            raise ConfigError(f"M must be >= 1, got {self.M}")
        if self.lambda_g < 0:
            raise ConfigError(f"lambda_g must be >= 0, got {self.lambda_g}")
        if self.iterations < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("iterations >= 0, batch_size >= 1 and eval_every >= 1 are required")
        if self.estimator_optimizer not in ("adam", "sga"):
            raise ConfigError("estimator_optimizer must be 'adam' or 'sga'")
        if self.gan_loss not in ("saturating", "non_saturating"):
            raise ConfigError("gan_loss must be 'saturating' or 'non_saturating'")
        for sub in (self.generator, self.estimator, self.discriminator):
            sub.validate()
        try:
            UnrollConfig(**asdict(self.unroll))
        except BilevelError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"generator": GeneratorConfig, "estimator": EstimatorConfig,
                  "discriminator": DiscriminatorConfig, "unroll": UnrollConfig}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                try:
                    d[key] = typ(**d[key])
                except BilevelError as exc:
                    raise ConfigError(str(exc)) from None
                except TypeError as exc:
                    raise ConfigError(f"{key}: {exc}") from None
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d).validate()


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        params = np.asarray(params)
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64))


def adam_step(state: AdamState, params, grad, lr: float, maximize: bool = False):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError(f"adam_step: shapes differ (params {params.shape}, grad {grad.shape})")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    delta = lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new = params + delta if maximize else params - delta
    return new, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


# --------------------------------------------------------------------------
# trajectory


def fmt(x) -> str:
    """17-significant-digit rendering used by every CSV artifact."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


class Trajectory:
    """Per-iteration records with a fixed column layout.

    Wall-clock times are kept in ``wall_times`` and deliberately left out of
    the CSV so that reruns are byte-identical.
    """

    def __init__(self, columns: list[str]):
        self.columns = list(columns)
        self.rows: list[dict] = []
        self.wall_times: list[float] = []
        self.failure: dict | None = None
        self.final: dict = {}

    def append(self, row: dict, wall: float = 0.0):
        if self.rows and row["iteration"] <= self.rows[-1]["iteration"]:
            raise ValueError("trajectory iterations must be strictly increasing")
        self.rows.append(row)
        self.wall_times.append(wall)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r.get(name) is None else r[name] for r in self.rows], dtype=np.float64)

    def csv_header(self) -> str:
        return ",".join(self.columns) + "\n"

    def csv_row(self, row: dict) -> str:
        return ",".join(fmt(row.get(c)) for c in self.columns) + "\n"

    def to_csv(self, path=None) -> str:
        text = self.csv_header() + "".join(self.csv_row(r) for r in self.rows)
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str) -> "Trajectory":
        reader = csv.DictReader(io.StringIO(text))
        traj = cls(reader.fieldnames)
        for r in reader:
            traj.rows.append({k: (float(v) if v != "" else None) for k, v in r.items()})
        return traj

    def __len__(self) -> int:
        return len(self.rows)


# --------------------------------------------------------------------------
# construction


def build_generator(cfg: TrainConfig, dim: int):
    g = cfg.generator
    if g.kind == "mlp":
        return MlpGenerator(g.latent_dim, dim, g.hidden)
    means = np.asarray(g.init_means, dtype=np.float64)
    if means.ndim == 1:
        means = means.reshape(-1, 1)
    if means.shape[1] != dim:
        raise ConfigError(f"generator.init_means has dimension {means.shape[1]}, data has {dim}")
    return ParametricMoGGenerator(means, g.std)


def build_estimator(cfg: TrainConfig, dim: int):
    e = cfg.estimator
    if e.kind == "gaussian":
        return GaussianEstimator(dim, e.learn_std)
    if e.kind == "mog":
        return MoGEstimator(e.components, dim, e.init_scale)
    return VaeEstimator(dim, e.latent_dim, e.hidden, e.n_samples, e.decoder_log_var_init)


def _init_generator(gen, cfg: TrainConfig, rng: Rng) -> np.ndarray:
    params = gen.init_params(rng)
    if isinstance(gen, ParametricMoGGenerator) and cfg.generator.init_jitter > 0:
        params = params + cfg.generator.init_jitter * (2.0 * rng.uniform(params.shape) - 1.0)
    return params


def population_data(data: GaussianMixture) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature nodes and normalised weights standing in for the data."""
    grid = default_grid_1d()
    w = np.exp(data.log_density(grid.nodes)) * grid.weights
    return grid.nodes, w / w.sum()


# --------------------------------------------------------------------------
# the loop


class _Run:
    def __init__(self, cfg: TrainConfig, use_estimator: bool, use_disc: bool, lam: float):
        cfg.validate()
        self.cfg = cfg
        self.use_estimator = use_estimator
        self.use_disc = use_disc
        self.lam = lam
        self.data = make_dataset(cfg.dataset)
        dim = self.data.dim
        root = Rng(cfg.seed)
        self.rng = {k: root.spawn(k) for k in (_EST, _GEN, _DATA, _DISC, _EVAL)}
        self.population = cfg.unroll.population
        if self.population and (dim != 1 or cfg.generator.kind != "mog"):
            raise ConfigError("population mode needs a 1-D dataset and a 'mog' generator")
        if self.population and use_disc:
            raise ConfigError("population mode is not available with a discriminator")
        if use_estimator and cfg.estimator.kind == "vae" and self.population:
            raise ConfigError("population mode is not available for the VAE estimator")

        self.gen = build_generator(cfg, dim)
        self.gen.params = _init_generator(self.gen, cfg, root.spawn(_INIT_GEN))
        self.est = build_estimator(cfg, dim) if use_estimator else None
        if self.est is not None:
            self.est.reset(root.spawn(_INIT_EST))
            self.est_state = AdamState.zeros_like(self.est.params)
        self.disc = Discriminator(dim, cfg.discriminator.hidden) if use_disc else None
        if self.disc is not None:
            self.disc.reset(root.spawn(_INIT_DISC))
            self.disc_state = AdamState.zeros_like(self.disc.params)
        self.gen_state = AdamState.zeros_like(self.gen.params)

        ev = self.rng[_EVAL]
        n_eval = cfg.eval_size
        if self.population:
            self.pop_draw, self.pop_gen_w = self.gen.quadrature_draw()
            self.pop_data_x, self.pop_data_w = population_data(self.data)
            self.eval_data, self.eval_data_w = self.pop_data_x, self.pop_data_w
            self.eval_draw, self.eval_gen_w = self.pop_draw, self.pop_gen_w
        else:
            self.eval_data, self.eval_data_w = mog_sample(self.data, n_eval, ev), None
            self.eval_draw, self.eval_gen_w = self.gen.draw(ev, n_eval), None
        self.eval_noise = self.est.draw_noise(ev, n_eval) if self.est is not None else None
        self.eval_gen_noise = self.est.draw_noise(ev, n_eval) if self.est is not None else None
        self.metric_draw = self.gen.draw(ev, cfg.metric_samples) if cfg.metric_samples else None
        self.modes = ModeSpec.from_mixture(self.data) if self.data.dim == 2 else None

        self.columns = ["iteration"]
        self.theta_cols = []
        if isinstance(self.gen, ParametricMoGGenerator):
            self.theta_cols = [f"theta_{i}" for i in range(self.gen.n_params)]
        else:
            self.columns.append("theta_norm")
        self.columns += self.theta_cols + ["gen_mean_" + str(d) for d in range(dim)]
        self.columns += ["f_E", "f_G", "f_GAN"]
        if self.metric_draw is not None and self.modes is not None:
            self.columns += ["hq_fraction", "modes_covered", "intra_mode_kl"]
        self.traj = Trajectory(self.columns)
        self.t0 = time.perf_counter()

    # batches -----------------------------------------------------------
    def gen_batch(self, stream: int):
        if self.population:
            return self.pop_draw, self.pop_gen_w
        return self.gen.draw(self.rng[stream], self.cfg.batch_size), None

    def data_batch(self, stream: int):
        if self.population:
            return self.pop_data_x, self.pop_data_w
        return mog_sample(self.data, self.cfg.batch_size, self.rng[stream]), None

    # updates -----------------------------------------------------------
    def estimator_steps(self):
        cfg = self.cfg
        for _ in range(cfg.M):
            draw, w = self.gen_batch(_EST)
            x = self.gen.generate(self.gen.params, draw).value
            noise = self.est.draw_noise(self.rng[_EST], x.shape[0])
            phi = dc.variable(self.est.params)
            f = self.est.log_likelihood(phi, x, w, noise)
            (g,) = dc.gradient(f, [phi])
            self._check(f.value, g.value, "estimator")
            if cfg.estimator_optimizer == "adam":
                self.est.params, self.est_state = adam_step(self.est_state, self.est.params, g.value,
                                                            cfg.lr_phi, maximize=True)
            else:
                self.est.params = self.est.params + cfg.lr_phi * g.value

    def discriminator_steps(self):
        cfg = self.cfg
        for _ in range(cfg.discriminator.steps):
            real, _ = self.data_batch(_DISC)
            draw = self.gen.draw(self.rng[_DISC], cfg.batch_size)
            fake = self.gen.generate(self.gen.params, draw).value
            psi = dc.variable(self.disc.params)
            f = gan_objective(self.disc, psi, real, fake)
            (g,) = dc.gradient(f, [psi])
            self._check(f.value, g.value, "discriminator")
            self.disc.params, self.disc_state = adam_step(self.disc_state, self.disc.params, g.value,
                                                          cfg.lr_psi, maximize=True)

    def generator_step(self):
        cfg = self.cfg
        theta = dc.variable(self.gen.params)
        draw, gw = self.gen_batch(_GEN)
        objective = None
        x_gen = None
        if self.use_estimator:
            data_x, dw = self.data_batch(_DATA)
            n_gen = draw.n
            noises = [self.est.draw_noise(self.rng[_GEN], n_gen) for _ in range(cfg.unroll.K)]
            data_noise = self.est.draw_noise(self.rng[_DATA], data_x.shape[0])
            objective, _, x_gen = surrogate_objective(self.gen, theta, self.est, self.est.params, data_x,
                                                      cfg.unroll, draw, gw, dw, noises, data_noise)
        if self.use_disc:
            if x_gen is None:
                x_gen = self.gen.generate(theta, draw)
            gan_loss = generator_gan_loss(self.disc, self.disc.params, x_gen, gw,
                                          non_saturating=cfg.gan_loss == "non_saturating")
            objective = -gan_loss if objective is None else objective - self.lam * gan_loss
        (g,) = dc.gradient(objective, [theta])
        self._check(objective.value, g.value, "generator")
        self.gen.params, self.gen_state = adam_step(self.gen_state, self.gen.params, g.value,
                                                    cfg.lr_theta, maximize=True)

    def _check(self, value, grad, who):
        if not (np.all(np.isfinite(value)) and np.all(np.isfinite(grad))):
            raise FloatingPointError(f"non-finite {who} objective or gradient")

    # evaluation --------------------------------------------------------
    def record(self, iteration: int, on_record=None):
        row = {"iteration": iteration}
        theta = self.gen.params
        if self.theta_cols:
            row.update({c: float(v) for c, v in zip(self.theta_cols, theta)})
        else:
            row["theta_norm"] = float(np.linalg.norm(theta))
        x_eval = self.gen.generate(theta, self.eval_draw).value
        gen_mean = x_eval.mean(axis=0) if self.eval_gen_w is None else self.eval_gen_w @ x_eval
        row.update({f"gen_mean_{d}": float(v) for d, v in enumerate(gen_mean)})
        if self.est is not None:
            row["f_E"] = self.est.log_likelihood(self.est.params, x_eval, self.eval_gen_w,
                                                 self.eval_gen_noise).item()
            row["f_G"] = self.est.log_likelihood(self.est.params, self.eval_data, self.eval_data_w,
                                                 self.eval_noise).item()
        if self.disc is not None:
            row["f_GAN"] = gan_objective(self.disc, self.disc.params, self.eval_data, x_eval).item()
        if "hq_fraction" in self.columns:
            samples = self.gen.generate(theta, self.metric_draw).value
            rep = evaluate_samples(samples, self.modes)
            row.update(hq_fraction=rep.hq_fraction, modes_covered=rep.modes_covered,
                       intra_mode_kl=rep.intra_mode_kl)
        self.traj.append(row, time.perf_counter() - self.t0)
        if on_record is not None:
            on_record(self.traj, row)

    def run(self, on_record=None) -> Trajectory:
        cfg = self.cfg
        self.record(0, on_record)
        for t in range(1, cfg.iterations + 1):
            try:
                if self.use_estimator:
                    self.estimator_steps()
                if self.use_disc:
                    self.discriminator_steps()
                self.generator_step()
            except (FloatingPointError, UnrollError, dc.DiffError) as exc:
                self.traj.failure = {"iteration": t, "reason": str(exc)}
                log.error("run aborted at iteration %d: %s", t, exc)
                raise TrainingAborted(self.traj, self.traj.failure) from exc
            if t % cfg.eval_every == 0 or t == cfg.iterations:
                self.record(t, on_record)
        self.traj.final = {"generator": self.gen, "estimator": self.est, "discriminator": self.disc}
        return self.traj


def train_lbt(cfg: TrainConfig, on_record=None) -> Trajectory:
    """Per iteration: M estimator ascent steps, then one Adam step on the
    unrolled hypergradient of the generator."""
    return _Run(cfg, True, False, 0.0).run(on_record)


def train_lbt_gan(cfg: TrainConfig, on_record=None) -> Trajectory:
    """LBT plus a discriminator; the generator ascends
    ``f_G(phi^K) - lambda_g * f_GAN`` in one combined Adam step."""
    return _Run(cfg, True, True, cfg.lambda_g).run(on_record)


def train_gan(cfg: TrainConfig, on_record=None) -> Trajectory:
    """Alternating discriminator ascent / generator descent on f_GAN."""
    return _Run(cfg, False, True, 1.0).run(on_record)


def train(cfg: TrainConfig, on_record=None) -> Trajectory:
    return {"lbt": train_lbt, "lbt_gan": train_lbt_gan, "gan": train_gan}[cfg.algorithm](cfg, on_record)
