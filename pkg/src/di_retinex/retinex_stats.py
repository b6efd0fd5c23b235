"""Empirical checks of the linear degradation model plus full-reference metrics.

Forward direction regresses the normal-light image on the low-light one,
``I_h = alpha I_l + beta``; the reverse direction regresses ``I_l`` on ``I_h``.
The closed-form moment predictions for the offset live in
:func:`beta_moments_predict`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .sensor_sim import CaptureResult, SceneSpec, capture_pair

DIRECTIONS = ("forward", "reverse")


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


# --- joint histogram ----------------------------------------------------------


@dataclass
class JointHistogram:
    counts: np.ndarray  # bins x bins; row = bin of I_a, column = bin of I_b
    edges: np.ndarray
    saturated: np.ndarray  # bool map, True where either value is 0 or k
    saturated_counts: np.ndarray  # the saturated pixels' share of ``counts``

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _bin_index(v: np.ndarray, bins: int) -> np.ndarray:
    # [0, 1] split into equal bins, the right edge folded into the last bin
    return np.clip((v * bins).astype(np.int64), 0, bins - 1)


def joint_histogram(img_a, img_b, bins: int = 64, k: float = 1.0) -> JointHistogram:
    a, b = _pair(img_a, img_b)
    if bins < 1:
        raise ValueError(f"bins must be positive, got {bins}")
    ia = _bin_index(a.ravel(), bins)
    ib = _bin_index(b.ravel(), bins)
    flat = ia * bins + ib
    counts = np.bincount(flat, minlength=bins * bins).reshape(bins, bins)
    sat = (a <= 0) | (a >= k) | (b <= 0) | (b >= k)
    sat_counts = np.bincount(flat[sat.ravel()], minlength=bins * bins).reshape(bins, bins)
    return JointHistogram(counts=counts, edges=np.linspace(0.0, 1.0, bins + 1),
                          saturated=sat, saturated_counts=sat_counts)


# --- regression ---------------------------------------------------------------


class DegenerateRegression(ValueError):
    pass


@dataclass
class RegressionReport:
    slope: float
    intercept: float
    r2: float
    used: int
    masked_out: int
    direction: str = "forward"

    def to_dict(self) -> dict:
        return asdict(self)


def masked_linear_regression(x, y, mask=None, direction: str = "forward") -> RegressionReport:
    """Ordinary least squares ``y = slope x + intercept`` over pixels with mask == 1."""
    x, y = _pair(x, y)
    m = np.ones(x.shape, bool) if mask is None else np.asarray(mask).astype(bool)
    if m.shape != x.shape:
        raise ValueError(f"mask shape {m.shape} does not match images {x.shape}")
    xs, ys = x[m], y[m]
    n = xs.size
    if n < 2:
        raise DegenerateRegression(f"need at least 2 unmasked points, got {n}")
    xc = xs - xs.mean()
    sxx = np.dot(xc, xc)
    if np.ptp(xs) == 0 or sxx <= 0:
        raise DegenerateRegression("degenerate regression: x is constant over the unmasked pixels")
    yc = ys - ys.mean()
    slope = np.dot(xc, yc) / sxx
    intercept = ys.mean() - slope * xs.mean()
    sst = np.dot(yc, yc)
    resid = ys - (slope * xs + intercept)
    # constant y is fit perfectly by a flat line
    r2 = 1.0 - np.dot(resid, resid) / sst if sst > 0 else 1.0
    return RegressionReport(slope=float(slope), intercept=float(intercept), r2=float(min(max(r2, 0.0), 1.0)),
                            used=int(n), masked_out=int(x.size - n), direction=direction)


def regression_mask(high, k: float = 1.0) -> np.ndarray:
    """Pixels whose normal-light value lies strictly inside (0, k).

    Both directions use the same rule, so forward and reverse fits see the
    same pixel set.
    """
    high = np.asarray(high)
    return (high > 0) & (high < k)


@dataclass
class PairRegression:
    pooled: RegressionReport
    per_channel: list[RegressionReport] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"pooled": self.pooled.to_dict(), "per_channel": [r.to_dict() for r in self.per_channel]}


def regress_pair(low, high, direction: str = "forward", k: float = 1.0) -> PairRegression:
    """Fit the pooled and per-channel linear relation between a low/normal pair."""
    low, high = _pair(low, high)
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    x, y = (low, high) if direction == "forward" else (high, low)
    mask = regression_mask(high, k)
    pooled = masked_linear_regression(x, y, mask, direction)
    chans = []
    if low.ndim == 3:
        chans = [masked_linear_regression(x[..., c], y[..., c], mask[..., c], direction)
                 for c in range(low.shape[2])]
    return PairRegression(pooled=pooled, per_channel=chans)


# --- moments of the offset ----------------------------------------------------


@dataclass
class BetaMoments:
    mean: float
    var: float
    alpha: float
    mu: float
    q: float
    var_dI_low: float = 0.0
    var_dI_high: float = 0.0
    mean_dI_low: float = 0.0
    mean_dI_high: float = 0.0
    direction: str = "forward"

    def to_dict(self) -> dict:
        return asdict(self)


def beta_moments_predict(alpha: float, mu: float, q: float, var_dI_low: float = 0.0,
                         var_dI_high: float = 0.0, mean_dI_low: float = 0.0,
                         mean_dI_high: float = 0.0, direction: str = "forward") -> BetaMoments:
    """Closed-form mean and variance of the offset.

    Forward (``alpha`` >= 1 scales the low image)::

        E[beta]   = mu (1 - alpha) + E[dI_h] - alpha E[dI_l]
        Var(beta) = (1 + alpha^2) q^2 / 12 + Var(dI_h) + alpha^2 Var(dI_l)

    Reverse swaps the roles of the two exposures, with ``alpha`` in [0, 1].
    """
    if direction == "forward":
        d_self, d_other = (mean_dI_high, var_dI_high), (mean_dI_low, var_dI_low)
    elif direction == "reverse":
        d_self, d_other = (mean_dI_low, var_dI_low), (mean_dI_high, var_dI_high)
    else:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    a2 = alpha * alpha
    mean = mu * (1.0 - alpha) + d_self[0] - alpha * d_other[0]
    var = (1.0 + a2) * (q * q / 12.0) + d_self[1] + a2 * d_other[1]
    return BetaMoments(mean=mean, var=var, alpha=alpha, mu=mu, q=q, var_dI_low=var_dI_low,
                       var_dI_high=var_dI_high, mean_dI_low=mean_dI_low, mean_dI_high=mean_dI_high,
                       direction=direction)


# --- ground-truth linear model ------------------------------------------------


@dataclass
class LinearModelCheck:
    direction: str
    max_residual: float
    mean_residual: float
    pixels: int
    alpha: np.ndarray = field(repr=False)
    beta: np.ndarray = field(repr=False)


def linear_coefficients(scene: SceneSpec, low: CaptureResult, high: CaptureResult,
                        direction: str = "forward") -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel alpha and beta assembled from the recorded error terms."""
    r = scene.ratio
    src, dst = (low, high) if direction == "forward" else (high, low)
    alpha = r**scene.gamma if direction == "forward" else r ** (-scene.gamma)
    beta = (scene.mu + dst.quant_error + dst.delta_overflow
            - alpha * (scene.mu + src.quant_error + src.delta_overflow))
    return alpha, beta


def verify_linear_model(scene: SceneSpec, direction: str = "forward",
                        rng: np.random.Generator | None = None) -> LinearModelCheck:
    """Capture a pair and measure how far it strays from ``alpha I + beta``.

    Without noise the relation is exact up to rounding; noise contributes the
    only residual. Pixels clipped in either capture are excluded.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    rng = np.random.default_rng() if rng is None else rng
    low, high = capture_pair(scene, rng)
    alpha, beta = linear_coefficients(scene, low, high, direction)
    src, dst = (low, high) if direction == "forward" else (high, low)
    keep = (low.delta_overflow == 0) & (high.delta_overflow == 0) & (scene.illum_low > 0)
    resid = np.abs(dst.image - (alpha * src.image + beta))[keep]
    if resid.size == 0:
        return LinearModelCheck(direction, 0.0, 0.0, 0, alpha, beta)
    return LinearModelCheck(direction=direction, max_residual=float(resid.max()),
                            mean_residual=float(resid.mean()), pixels=int(resid.size),
                            alpha=alpha, beta=beta)


# --- metrics ------------------------------------------------------------------

PSNR_CAP = 99.0


def metric_mse_psnr(x, y) -> tuple[float, float]:
    x, y = _pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    psnr = PSNR_CAP if mse < 1e-10 else 10.0 * math.log10(1.0 / mse)
    return mse, psnr


SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gauss_window() -> np.ndarray:
    half = SSIM_WIN // 2
    t = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(t * t) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation keeping only fully covered windows
    n = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ g


def _ssim_channel(x: np.ndarray, y: np.ndarray, g: np.ndarray, L: float) -> float:
    c1 = (SSIM_K1 * L) ** 2
    c2 = (SSIM_K2 * L) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def metric_ssim(x, y, data_range: float = 1.0) -> float:
    """Single-scale SSIM: Gaussian window (11, sigma 1.5), channel-averaged."""
    x, y = _pair(x, y)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if x.ndim != 3:
        raise ValueError(f"expected H x W or H x W x C images, got {x.shape}")
    if x.shape[0] < SSIM_WIN or x.shape[1] < SSIM_WIN:
        raise ValueError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {x.shape[:2]}")
    g = _gauss_window()
    return float(np.mean([_ssim_channel(x[..., c], y[..., c], g, data_range) for c in range(x.shape[2])]))
