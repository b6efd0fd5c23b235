"""Zero-reference training objectives.

Reverse degradation: a low-light image is, in linear (gamma-removed) space,
approximately a scaled copy of its normally exposed counterpart. With a target
exposure ``E ~ N(eta, sigma2)`` this gives

    L_RD = mean over unsaturated pixels of | I_l**(1/g) - r' * I_h**(1/g) |,
    r'   = (mean(I_l) / E) ** (1/g)

Variance suppression penalizes spatial variance of the offset term
``t = a b - a + b + 1`` per channel. The overall loss is their sum.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import diffgraph as dg
from .adjust import EnhancerConfig, NetworkParams, enhance_graph
from .diffgraph import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 1 / 2.2
    eta: float = 0.5
    sigma2: float = 0.001
    k: float = 1.0
    norm: str = "l1"  # L_RD residual: "l1" (mean absolute) or "l2" (mean square)
    vs_norm: str = "l1"  # L_VS over channel variances: "l1" (sum) or "l2" (euclidean)
    use_rd: bool = True
    use_vs: bool = True
    use_mask: bool = True

    def __post_init__(self):
        if not 0 < self.eta < 1:
            raise ValueError(f"eta must lie in (0, 1), got {self.eta}")
        if self.sigma2 <= 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.norm not in ("l1", "l2") or self.vs_norm not in ("l1", "l2"):
            raise ValueError("norms must be 'l1' or 'l2'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossTerms:
    total: Tensor
    rd: float
    vs: float
    exposure: float
    saturated: bool = False


def mask_dynamic_range(x, k: float = 1.0) -> np.ndarray:
    """1 where x < k, else 0. A constant: no gradient flows through it."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return (data < k).astype(np.float64)


def reverse_ratio(mean_low: float, exposure: float, gamma: float) -> float:
    if mean_low <= 0 or exposure <= 0:
        raise ValueError(f"reverse ratio needs positive mean and exposure, got {mean_low}, {exposure}")
    return (mean_low / exposure) ** (1.0 / gamma)


def sample_exposure(cfg: LossConfig, rng: np.random.Generator) -> float:
    """E ~ N(eta, sigma2), redrawn until it falls in (0, 1]."""
    sd = np.sqrt(cfg.sigma2)
    while True:
        e = rng.normal(cfg.eta, sd)
        if 0 < e <= 1:
            return float(e)


def loss_reverse_degradation(low: np.ndarray, enhanced, exposure: float, cfg: LossConfig,
                             use_mask: bool | None = None) -> tuple[Tensor, bool]:
    """Masked reverse-degradation loss; returns (loss, fully_saturated)."""
    low = np.asarray(low, dtype=np.float64)
    enh = dg.as_tensor(enhanced)
    if low.shape != enh.shape:
        raise dg.ShapeError(f"low image {low.shape} and enhanced {enh.shape} differ")
    p = 1.0 / cfg.gamma
    r = reverse_ratio(float(low.mean()), exposure, cfg.gamma)
    target = np.power(low, p)
    resid = target - r * dg.power(dg.relu(enh), p)
    resid = dg.absolute(resid) if cfg.norm == "l1" else resid * resid
    use_mask = cfg.use_mask if use_mask is None else use_mask
    mask = mask_dynamic_range(enh, cfg.k) if use_mask else np.ones(enh.shape)
    saturated = not mask.any()
    if saturated:
        log.warning("every enhanced pixel is at or above the ceiling; L_RD is 0")
    return dg.masked_mean(resid, mask), saturated


def loss_variance_suppression(a, b, norm: str = "l1") -> Tensor:
    at, bt = dg.as_tensor(a), dg.as_tensor(b)
    t = at * bt - at + bt + 1.0
    var = dg.channel_var(t)
    if norm == "l1":
        return var.sum()
    if norm == "l2":
        return dg.power((var * var).sum(), 0.5)
    raise ValueError(f"unknown norm {norm!r}")


def loss_overall(low: np.ndarray, params: NetworkParams, enh_cfg: EnhancerConfig, cfg: LossConfig,
                 rng: np.random.Generator | None = None, exposure: float | None = None) -> LossTerms:
    """L_RD + L_VS for one image. Pass ``exposure`` to fix E instead of sampling it."""
    if exposure is None:
        if rng is None:
            raise ValueError("need an rng to sample the exposure factor")
        exposure = sample_exposure(cfg, rng)
    enhanced, coeffs = enhance_graph(low, params, enh_cfg)
    total = Tensor(0.0)
    rd_val = vs_val = 0.0
    saturated = False
    if cfg.use_rd:
        rd, saturated = loss_reverse_degradation(low, enhanced, exposure, cfg)
        total = total + rd
        rd_val = rd.item()
    if cfg.use_vs:
        vs = loss_variance_suppression(coeffs.a, coeffs.b, cfg.vs_norm)
        total = total + vs
        vs_val = vs.item()
    return LossTerms(total=total, rd=rd_val, vs=vs_val, exposure=exposure, saturated=saturated)
