"""Contrast-brightness enhancement driven by predicted coefficient maps.

The enhancer maps a low-light image ``I`` to

    f(I; a, b) = a * I + (k / 2) * (a * b - a + b + 1)

where ``b`` and ``c`` come from a three-layer 3x3 conv network (final tanh,
so both lie in [-1, 1]) and ``a = g(c)`` is a monotone map onto (0, inf).

Functions here accept either numpy arrays or :class:`~di_retinex.diffgraph.Tensor`
and return the same kind, so one code path serves inference and training.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from . import diffgraph as dg
from .diffgraph import ShapeError, Tensor

MAPPINGS = ("g", "g1", "g2", "g3")
GUARD = 1e-8


@dataclass(frozen=True)
class EnhancerConfig:
    c_int: int = 64
    c_out: int = 6
    tau: float = 0.2
    k: float = 1.0
    mapping: str = "g"
    use_offset: bool = True  # False forces b = 0
    scalar_b: bool = False  # spatial mean of b instead of a per-pixel map
    scalar_c: bool = False

    def __post_init__(self):
        if self.c_out % 2 or self.c_out // 2 not in (1, 3):
            raise ValueError(f"c_out must be 2 or 6, got {self.c_out}")
        if self.c_int < 1:
            raise ValueError(f"c_int must be positive, got {self.c_int}")
        if not 0 < self.tau < 45:
            raise ValueError(f"tau must lie in (0, 45), got {self.tau}")
        if self.mapping not in MAPPINGS:
            raise ValueError(f"mapping must be one of {MAPPINGS}, got {self.mapping!r}")

    @classmethod
    def small(cls, **kw) -> EnhancerConfig:
        return cls(c_int=4, c_out=2, **kw)

    def layer_shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        chans = [3, self.c_int, self.c_int, self.c_out]
        return [((co, ci, 3, 3), (co,)) for ci, co in zip(chans[:-1], chans[1:])]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NetworkParams:
    weights: list[Tensor]
    biases: list[Tensor]

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.tensors()]

    def copy(self) -> NetworkParams:
        return NetworkParams([Tensor(w.data.copy(), True) for w in self.weights],
                             [Tensor(b.data.copy(), True) for b in self.biases])


@dataclass
class CoeffMaps:
    b: Tensor
    c: Tensor
    a: Tensor

    def numpy(self) -> dict[str, np.ndarray]:
        return {"b": self.b.data, "c": self.c.data, "a": self.a.data}


def init_params(cfg: EnhancerConfig, rng: np.random.Generator, zero_final: bool = True) -> NetworkParams:
    """Uniform(-s, s), s = sqrt(1 / fan_in), zero biases.

    With ``zero_final`` the last layer starts at exactly zero so the network
    predicts b = c = 0 and the enhancement is the identity.
    """
    weights, biases = [], []
    shapes = cfg.layer_shapes()
    for i, (wshape, bshape) in enumerate(shapes):
        if zero_final and i == len(shapes) - 1:
            weights.append(Tensor(np.zeros(wshape), requires_grad=True))
        else:
            weights.append(dg.init_uniform(wshape, wshape[1] * 9, rng))
        biases.append(Tensor(np.zeros(bshape), requires_grad=True))
    return NetworkParams(weights, biases)


def _same_kind(result: Tensor, like):
    return result if isinstance(like, Tensor) else result.data


def _check_unit_range(c) -> None:
    data = c.data if isinstance(c, Tensor) else np.asarray(c)
    # NaN passes through so that training reports it as a non-finite loss
    if np.any(data < -1.0) or np.any(data > 1.0):
        raise ValueError("mapping input must lie in [-1, 1]")


def map_g(c, tau: float = 0.2):
    """a = tan(((45 + (45 - tau) c) / 180) pi), evaluated as tan(pi/4 + x).

    The addition form is exact at c = 0 (a == 1.0) and better conditioned
    near c = 1 than calling tan on an angle close to 90 degrees.
    """
    _check_unit_range(c)
    if not 0 < tau < 45:
        raise ValueError(f"tau must lie in (0, 45), got {tau}")
    slope = (45.0 - tau) * math.pi / 180.0
    if isinstance(c, np.ndarray) and c.ndim:
        # same operations as the graph branch, computed in place
        t = np.multiply(c, slope)
        np.tan(t, out=t)
        num = 1.0 + t
        np.subtract(1.0, t, out=t)
        return np.divide(num, t, out=num)
    t = dg.tan(dg.mul(c, slope))
    return _same_kind((1.0 + t) / (1.0 - t), c)


def map_alt(c, variant: str, tau: float = 0.2):
    """Alternative contrast mappings used in the ablations."""
    ct = dg.as_tensor(c)
    if variant == "g1":
        a = (1.0 + ct) / (1.0 - ct + GUARD)
    elif variant == "g2":
        a = 1.5 * dg.log((3.0 + ct) / (1.0 - ct + GUARD))
    elif variant == "g3":
        _check_unit_range(ct)
        a = 3.0 * dg.log(map_g(ct, tau) + 1.0)
    else:
        raise ValueError(f"unknown mapping variant {variant!r}")
    return _same_kind(a, c)


def contrast_map(c, mapping: str = "g", tau: float = 0.2):
    return map_g(c, tau) if mapping == "g" else map_alt(c, mapping, tau)


def apply_adjustment(image, a, b, k: float = 1.0):
    """f = a I + (k/2)(a b - a + b + 1), not clamped.

    ``a`` and ``b`` may carry one channel (broadcast over RGB) or one per channel.
    """
    shapes = [np.shape(x.data if isinstance(x, Tensor) else x) for x in (image, a, b)]
    try:
        out_shape = np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"cannot broadcast image {shapes[0]} with a {shapes[1]} and b {shapes[2]}") from None
    if out_shape != shapes[0]:
        raise ShapeError(f"coefficients {shapes[1]}, {shapes[2]} would reshape image {shapes[0]}")
    it, at, bt = dg.as_tensor(image), dg.as_tensor(a), dg.as_tensor(b)
    # I + (a - 1)(I - (k/2)(1 - b)) + k b: same value, but exact both at the
    # identity (a = 1, b = 0) and at the midpoint I = k/2 when b = 0
    out = it + (at - 1.0) * (it - (k / 2.0) * (1.0 - bt)) + k * bt
    any_tensor = any(isinstance(x, Tensor) for x in (image, a, b))
    return out if any_tensor else out.data


def reduce_to_scalar(m):
    """Spatial-and-channel mean, kept as a 1 x 1 x 1 map so it broadcasts."""
    mt = dg.as_tensor(m)
    if mt.size == 0:
        raise ShapeError("cannot reduce an empty map")
    keep = tuple(range(mt.data.ndim))
    return _same_kind(dg.mean(mt, axis=keep, keepdims=True), m)


def _check_image(image) -> None:
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got {data.shape}")
    # one min/max pass; NaN makes both comparisons fail
    if data.size and not (data.min() >= 0 and data.max() <= 1):
        raise ValueError("image intensities must lie in [0, 1]")


def net_forward(image, params: NetworkParams, cfg: EnhancerConfig) -> CoeffMaps:
    _check_image(image)
    if dg.is_recording():
        h = dg.as_tensor(image)
        n = len(params.weights)
        for i, (w, b) in enumerate(zip(params.weights, params.biases)):
            h = dg.conv2d(h, w, b)
            h = dg.tanh(h) if i == n - 1 else dg.relu(h)
    else:
        # inference: same network on the planar fast path, nothing to record
        data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        pre = _kernels.conv_stack(data, [w.data for w in params.weights], [b.data for b in params.biases])
        h = Tensor(np.tanh(pre, out=pre))
    half = cfg.c_out // 2
    b_map = h[..., :half]
    c_map = h[..., half:]
    if cfg.scalar_b:
        b_map = reduce_to_scalar(b_map)
    if cfg.scalar_c:
        c_map = reduce_to_scalar(c_map)
    if not cfg.use_offset:
        b_map = Tensor(np.zeros(b_map.shape))
    if dg.is_recording():
        a_map = contrast_map(c_map, cfg.mapping, cfg.tau)
    else:
        a_map = dg.as_tensor(contrast_map(c_map.data, cfg.mapping, cfg.tau))
    return CoeffMaps(b=b_map, c=c_map, a=a_map)


def enhance_graph(image, params: NetworkParams, cfg: EnhancerConfig) -> tuple[Tensor, CoeffMaps]:
    """Unclamped enhancement plus the coefficients, as graph tensors."""
    coeffs = net_forward(image, params, cfg)
    out = apply_adjustment(dg.as_tensor(image), coeffs.a, coeffs.b, cfg.k)
    return out, coeffs


def _fused_ok(cfg: EnhancerConfig) -> bool:
    return not (cfg.scalar_b or cfg.scalar_c) and not dg.is_recording()


def enhance(image, params: NetworkParams, cfg: EnhancerConfig, clamp_output: bool = False) -> np.ndarray:
    if _fused_ok(cfg):
        # inference: whole-image arrays straight through, no graph bookkeeping
        coeffs = net_forward(image, params, cfg)
        data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        return _kernels.adjust_fused(data, coeffs.a.data, coeffs.b.data, cfg.k, clamp_output)
    out, _ = enhance_graph(image, params, cfg)
    data = out.data
    return np.clip(data, 0.0, cfg.k) if clamp_output else data
