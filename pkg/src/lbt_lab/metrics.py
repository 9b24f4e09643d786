"""Sample-quality metrics for mixture datasets, plus a KDE grid for plotting.

Three numbers summarise a set of 2-D samples against the true modes:

* high-quality fraction: share of samples within Mahalanobis radius 3 of
  some mode (``per_axis=True`` switches to a per-coordinate 3-sigma box);
* modes covered: modes whose high-quality count exceeds 20% of ``n / K``;
* intra-mode KL: every sample is assigned to its Euclidean-nearest mode, a
  diagonal Gaussian is fitted per mode and ``KL(true || fitted)`` averaged.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .distributions import GaussianMixture, QuadratureGrid, gaussian_kl_closed_form

HQ_RADIUS = 3.0
COVERAGE_FRACTION = 0.2
VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class ModeSpec:
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        stds = np.broadcast_to(np.asarray(self.stds, dtype=np.float64), means.shape).copy()
        if means.shape[0] < 1:
            raise ValueError("ModeSpec needs at least one mode")
        if np.any(stds <= 0):
            raise ValueError("ModeSpec stds must be positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)

    @classmethod
    def from_mixture(cls, mog: GaussianMixture) -> "ModeSpec":
        return cls(mog.means, mog.stds)

    @property
    def n_modes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass
class MetricReport:
    n: int
    hq_fraction: float
    modes_covered: int
    mode_counts: list
    intra_mode_kl: float
    per_mode_kl: list
    excluded_modes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        # JSON has no NaN; an empty average is reported as null
        if not np.isfinite(d["intra_mode_kl"]):
            d["intra_mode_kl"] = None
        d["per_mode_kl"] = [None if v is None or not np.isfinite(v) else v for v in d["per_mode_kl"]]
        return d


def _samples(samples, modes: ModeSpec) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, modes.dim)
    if x.shape[1] != modes.dim:
        raise ValueError(f"samples have dimension {x.shape[1]}, modes have {modes.dim}")
    return x


def _chunks(n: int, size: int = 65536):
    for lo in range(0, n, size):
        yield lo, min(n, lo + size)


def high_quality_mask(samples, modes: ModeSpec, per_axis: bool = False):
    """``(is_hq, mode_index)``; index is -1 for samples that are not HQ.

    Among qualifying modes the one with smallest Mahalanobis distance wins.
    """
    x = _samples(samples, modes)
    n = x.shape[0]
    is_hq = np.zeros(n, dtype=bool)
    idx = np.full(n, -1, dtype=np.int64)
    for lo, hi in _chunks(n):
        z = (x[lo:hi, None, :] - modes.means[None]) / modes.stds[None]
        d2 = np.sum(z * z, axis=2)
        if per_axis:
            ok = np.all(np.abs(z) <= HQ_RADIUS, axis=2)
        else:
            ok = d2 <= HQ_RADIUS ** 2
        d2 = np.where(ok, d2, np.inf)
        hit = ok.any(axis=1)
        is_hq[lo:hi] = hit
        idx[lo:hi] = np.where(hit, np.argmin(d2, axis=1), -1)
    return is_hq, idx


def modes_covered(samples, modes: ModeSpec, per_axis: bool = False) -> tuple[int, np.ndarray]:
    x = _samples(samples, modes)
    n = x.shape[0]
    if n == 0:
        return 0, np.zeros(modes.n_modes, dtype=np.int64)
    _, idx = high_quality_mask(x, modes, per_axis)
    counts = np.bincount(idx[idx >= 0], minlength=modes.n_modes)
    threshold = COVERAGE_FRACTION * n / modes.n_modes
    return int(np.sum(counts > threshold)), counts


def nearest_mode(samples, modes: ModeSpec) -> np.ndarray:
    x = _samples(samples, modes)
    out = np.empty(x.shape[0], dtype=np.int64)
    for lo, hi in _chunks(x.shape[0]):
        diff = x[lo:hi, None, :] - modes.means[None]
        out[lo:hi] = np.argmin(np.sum(diff * diff, axis=2), axis=1)
    return out


def intra_mode_kl(samples, modes: ModeSpec) -> tuple[float, list, list]:
    """``(average, per_mode, excluded)``; modes with fewer than two assigned
    samples get ``nan`` and are listed in ``excluded``."""
    x = _samples(samples, modes)
    assign = nearest_mode(x, modes)
    per_mode, excluded = [], []
    for k in range(modes.n_modes):
        pts = x[assign == k]
        if pts.shape[0] < 2:
            per_mode.append(float("nan"))
            excluded.append(k)
            continue
        mu = pts.mean(axis=0)
        var = np.maximum(pts.var(axis=0), VARIANCE_FLOOR)
        per_mode.append(gaussian_kl_closed_form(modes.means[k], modes.stds[k], mu, np.sqrt(var)))
    kept = [v for v in per_mode if np.isfinite(v)]
    avg = float(np.mean(kept)) if kept else float("nan")
    return avg, per_mode, excluded


def evaluate_samples(samples, modes: ModeSpec, per_axis: bool = False) -> MetricReport:
    x = _samples(samples, modes)
    n = x.shape[0]
    is_hq, _ = high_quality_mask(x, modes, per_axis)
    covered, counts = modes_covered(x, modes, per_axis)
    avg, per_mode, excluded = intra_mode_kl(x, modes)
    return MetricReport(n=n, hq_fraction=float(is_hq.mean()) if n else 0.0, modes_covered=covered,
                        mode_counts=[int(c) for c in counts], intra_mode_kl=avg,
                        per_mode_kl=[float(v) for v in per_mode], excluded_modes=excluded)


def scott_bandwidth(samples) -> np.ndarray:
    """``n^(-1/(d+4)) * std`` per axis."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    return x.shape[0] ** (-1.0 / (x.shape[1] + 4)) * x.std(axis=0)


def kde_grid(samples, grid: QuadratureGrid, bandwidth=None, chunk: int = 4096) -> np.ndarray:
    """Product-Gaussian KDE on a 1-D or 2-D grid, shaped like ``grid.shape``.

    ``bandwidth`` is a scalar or per-axis sequence; default is Scott's rule.
    The kernel is separable, so in 2-D each chunk costs one matrix product.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.shape[1] != grid.dim or grid.dim not in (1, 2):
        raise ValueError("kde_grid needs 1-D or 2-D samples matching the grid dimension")
    if x.shape[0] == 0:
        raise ValueError("kde_grid needs at least one sample")
    d = grid.dim
    h = scott_bandwidth(x) if bandwidth is None else np.broadcast_to(np.asarray(bandwidth, float), (d,))
    if np.any(h <= 0):
        raise ValueError("bandwidth must be positive (Scott's rule fails on constant samples)")
    axes = [grid.axis(i) for i in range(d)]
    out = np.zeros(grid.shape)
    for lo in range(0, x.shape[0], chunk):
        b = x[lo:lo + chunk]
        k = [np.exp(-0.5 * ((axes[i][:, None] - b[None, :, i]) / h[i]) ** 2) for i in range(d)]
        out += k[0].sum(axis=1) if d == 1 else k[0] @ k[1].T
    return out / (x.shape[0] * (2.0 * np.pi) ** (d / 2) * np.prod(h))
