"""Digital-imaging forward model: noise, gamma response, quantization, clipping.

A capture of irradiance ``L * R`` is

    I = G(L * R + eps) + delta + dI,        G(x) = mu + lam * x ** gamma

realized stage by stage (noise, gamma, quantize, clamp) so that every
error term is recorded and ``I`` reassembles exactly from its parts.
Intensities are normalized so the clamp ceiling is k = 1.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


@dataclass
class SceneSpec:
    reflectance: np.ndarray
    illum_low: np.ndarray
    illum_high: np.ndarray
    mu: float = -0.05
    lam: float = 1.1
    gamma: float = 1 / 2.2
    sigma_read: float = 0.0
    sigma_shot: float = 0.0
    bits: int | None = 8  # None disables quantization
    k: float = 1.0
    noise_model: str = "gaussian"

    def __post_init__(self):
        if self.reflectance.shape != self.illum_low.shape or self.illum_low.shape != self.illum_high.shape:
            raise ValueError("reflectance and illumination maps must share a shape")
        if np.any(self.reflectance < 0) or np.any(self.reflectance > 1):
            raise ValueError("reflectance must lie in [0, 1]")
        if np.any(self.illum_low < 0) or np.any(self.illum_high < self.illum_low):
            raise ValueError("illumination must satisfy 0 <= L_low <= L_high")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.bits is not None and self.bits < 1:
            raise ValueError(f"bit depth must be >= 1, got {self.bits}")

    @property
    def ratio(self) -> np.ndarray:
        """r = L_high / L_low, with r = 1 where both are dark."""
        with np.errstate(divide="ignore", invalid="ignore"):
            r = self.illum_high / self.illum_low
        return np.where(self.illum_low > 0, r, 1.0)

    @property
    def q(self) -> float:
        return 0.0 if self.bits is None else 1.0 / (2**self.bits - 1)


@dataclass
class CaptureResult:
    image: np.ndarray
    delta_overflow: np.ndarray
    quant_error: np.ndarray
    noise: np.ndarray
    pre_clamp: np.ndarray


def gamma_encode(x, mu: float, lam: float, gamma: float):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("gamma_encode needs non-negative input")
    return mu + lam * np.power(x, gamma)


def clamp_range(x, k: float = 1.0):
    """Return (clipped, dI) with clipped = x + dI in [0, k]."""
    if k <= 0:
        raise ValueError(f"clamp ceiling must be positive, got {k}")
    x = np.asarray(x, dtype=np.float64)
    clipped = np.clip(x, 0.0, k)
    return clipped, clipped - x


def quantize(x, bits: int | None):
    """Round to the N-bit grid; returns (discrete, delta). ``bits=None`` is a no-op."""
    x = np.asarray(x, dtype=np.float64)
    if bits is None:
        return x.copy(), np.zeros_like(x)
    levels = 2**bits - 1
    disc = np.round(x * levels) / levels
    return disc, disc - x


def add_sensor_noise(signal, sigma_read: float, sigma_shot: float, rng: np.random.Generator,
                     model: str = "gaussian"):
    """Add zero-mean noise with variance sigma_read**2 + sigma_shot * signal; floor at 0.

    ``model="poisson"`` draws a scaled Poisson count (scale sigma_shot) for the
    signal-dependent part instead of its Gaussian surrogate.
    """
    signal = np.asarray(signal, dtype=np.float64)
    if np.any(signal < 0):
        raise ValueError("signal must be non-negative")
    if sigma_read == 0 and sigma_shot == 0:
        return signal.copy()
    if model == "gaussian":
        std = np.sqrt(sigma_read**2 + sigma_shot * signal)
        noisy = signal + std * rng.standard_normal(signal.shape)
    elif model == "poisson":
        noisy = signal.copy()
        if sigma_shot > 0:
            noisy = rng.poisson(signal / sigma_shot) * sigma_shot
        if sigma_read > 0:
            noisy = noisy + sigma_read * rng.standard_normal(signal.shape)
    else:
        raise ValueError(f"unknown noise model {model!r}")
    return np.maximum(noisy, 0.0)


def capture(illum: np.ndarray, scene: SceneSpec, rng: np.random.Generator) -> CaptureResult:
    clean = illum * scene.reflectance
    noisy = add_sensor_noise(clean, scene.sigma_read, scene.sigma_shot, rng, scene.noise_model)
    encoded = gamma_encode(noisy, scene.mu, scene.lam, scene.gamma)
    disc, delta = quantize(encoded, scene.bits)
    image, d_over = clamp_range(disc, scene.k)
    return CaptureResult(image=image, delta_overflow=d_over, quant_error=delta,
                         noise=noisy - clean, pre_clamp=disc)


def capture_pair(scene: SceneSpec, rng: np.random.Generator) -> tuple[CaptureResult, CaptureResult]:
    low = capture(scene.illum_low, scene, rng)
    high = capture(scene.illum_high, scene, rng)
    return low, high


# --- scene generation -------------------------------------------------------


@dataclass
class SceneConfig:
    """JSON-configurable generator of synthetic scenes.

    Reflectance is a smooth random texture per channel; the high exposure
    illumination is a gentle gradient scaled so that the normally exposed
    capture averages around ``target_high_mean``; the low exposure divides
    it by a ratio drawn uniformly from ``ratio_range`` (one ratio per scene).
    """

    height: int = 64
    width: int = 64
    ratio_range: tuple[float, float] = (2.0, 10.0)
    target_high_mean: float = 0.5
    reflectance_range: tuple[float, float] = (0.05, 1.0)
    texture_scale: int = 8
    illum_variation: float = 0.3
    mu: float = -0.05
    lam: float = 1.1
    gamma: float = 1 / 2.2
    sigma_read: float = 5e-4
    sigma_shot: float = 1e-4
    bits: int | None = 8
    noise_model: str = "gaussian"
    seed: int = 0

    @classmethod
    def from_json(cls, path: str | Path) -> SceneConfig:
        raw = json.loads(Path(path).read_text())
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> SceneConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        raw = dict(raw)
        for key in ("ratio_range", "reflectance_range"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)


def _smooth_texture(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    # bilinear upsampling of a coarse random grid, per channel
    gh, gw = max(2, h // cells + 2), max(2, w // cells + 2)
    coarse = rng.random((gh, gw, 3))
    ys = np.linspace(0, gh - 1.001, h)
    xs = np.linspace(0, gw - 1.001, w)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)


def make_scene(cfg: SceneConfig, rng: np.random.Generator, ratio: float | None = None) -> SceneSpec:
    h, w = cfg.height, cfg.width
    lo, hi = cfg.reflectance_range
    refl = lo + (hi - lo) * _smooth_texture(rng, h, w, cfg.texture_scale)
    yy = np.linspace(-1, 1, h)[:, None, None]
    xx = np.linspace(-1, 1, w)[None, :, None]
    angle = rng.uniform(0, 2 * np.pi)
    shade = 1.0 + cfg.illum_variation * (np.cos(angle) * xx + np.sin(angle) * yy)
    shade = np.broadcast_to(shade, (h, w, 3))
    # invert the mean response so the high capture lands near the target mean
    target = (cfg.target_high_mean - cfg.mu) / cfg.lam
    level = target ** (1.0 / cfg.gamma) / np.mean(refl * shade)
    illum_high = level * shade
    if ratio is None:
        ratio = rng.uniform(*cfg.ratio_range)
    illum_low = illum_high / ratio
    return SceneSpec(reflectance=refl, illum_low=np.ascontiguousarray(illum_low),
                     illum_high=np.ascontiguousarray(illum_high), mu=cfg.mu, lam=cfg.lam,
                     gamma=cfg.gamma, sigma_read=cfg.sigma_read, sigma_shot=cfg.sigma_shot,
                     bits=cfg.bits, noise_model=cfg.noise_model)


def simulate_pairs(cfg: SceneConfig, n: int, seed: int | None = None):
    """Yield (scene, low, high) for ``n`` scenes from one seeded stream."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    for _ in range(n):
        scene = make_scene(cfg, rng)
        low, high = capture_pair(scene, rng)
        yield scene, low, high
