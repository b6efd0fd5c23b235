"""Zero-shot training loop and checkpoint persistence."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffgraph as dg
from .adjust import EnhancerConfig, NetworkParams, init_params
from .diffgraph import AdamState, Tape, Tensor
from .objectives import LossConfig, loss_overall

# ablation switch -> (enhancer overrides, loss overrides)
ABLATIONS: dict[str, tuple[dict, dict]] = {
    "no-offset-b": ({"use_offset": False}, {}),
    "no-vs": ({}, {"use_vs": False}),
    "no-rd": ({}, {"use_rd": False}),
    "no-mask": ({}, {"use_mask": False}),
    "map-g1": ({"mapping": "g1"}, {}),
    "map-g2": ({"mapping": "g2"}, {}),
    "map-g3": ({"mapping": "g3"}, {}),
    "scalar-b": ({"scalar_b": True}, {}),
    "scalar-c": ({"scalar_c": True}, {}),
}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    enhancer: EnhancerConfig = field(default_factory=EnhancerConfig)
    ablations: tuple[str, ...] = ()

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        bad = [a for a in self.ablations if a not in ABLATIONS]
        if bad:
            raise ValueError(f"unknown ablation flags {bad}; choose from {sorted(ABLATIONS)}")

    def resolved(self) -> tuple[EnhancerConfig, LossConfig]:
        """Enhancer and loss configs with the ablation switches applied."""
        enh, loss = self.enhancer, self.loss
        for flag in self.ablations:
            e_over, l_over = ABLATIONS[flag]
            enh = replace(enh, **e_over)
            loss = replace(loss, **l_over)
        return enh, loss

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablations"] = list(self.ablations)
        return d


@dataclass
class EpochStats:
    epoch: int
    total: float
    rd: float
    vs: float

    def line(self) -> str:
        return f"epoch {self.epoch:5d}  L_RD {self.rd:.6e}  L_VS {self.vs:.6e}  total {self.total:.6e}"


@dataclass
class TrainResult:
    params: NetworkParams
    enhancer: EnhancerConfig
    history: list[EpochStats]
    optimizer: AdamState


def _check_dataset(dataset: Sequence[np.ndarray]) -> None:
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    for i, img in enumerate(dataset):
        img = np.asarray(img)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"image {i} is not H x W x 3: {img.shape}")
        if np.any(img < 0) or np.any(img > 1):
            raise ValueError(f"image {i} has intensities outside [0, 1]")


def train_zero_shot(dataset: Sequence[np.ndarray], cfg: TrainConfig,
                    progress: Callable[[EpochStats], None] | None = None,
                    params: NetworkParams | None = None) -> TrainResult:
    """Train on low-light images only, one full image per step.

    Images are shuffled each epoch; the exposure target E is redrawn every
    step. All randomness derives from ``cfg.seed``.
    """
    _check_dataset(dataset)
    enh_cfg, loss_cfg = cfg.resolved()
    init_ss, order_ss, exp_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    if params is None:
        params = init_params(enh_cfg, np.random.default_rng(init_ss))
    tensors = params.tensors()
    state = AdamState.for_params(tensors, lr=cfg.lr, weight_decay=cfg.weight_decay)
    order_rng = np.random.default_rng(order_ss)
    exp_rng = np.random.default_rng(exp_ss)
    images = [np.asarray(img, dtype=np.float64) for img in dataset]
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(3)
        for idx in order_rng.permutation(len(images)):
            with Tape() as tape:
                terms = loss_overall(images[idx], params, enh_cfg, loss_cfg, rng=exp_rng)
            value = terms.total.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step} (epoch {epoch}, image {idx}): "
                                    f"L_RD={terms.rd}, L_VS={terms.vs}, E={terms.exposure}")
            grads = tape.backward(terms.total, tensors)
            try:
                dg.adam_step(tensors, grads, state)
            except dg.NumericError as exc:
                raise TrainingError(f"step {step} (epoch {epoch}, image {idx}): {exc}; "
                                    f"L_RD={terms.rd}, L_VS={terms.vs}") from exc
            sums += (value, terms.rd, terms.vs)
            step += 1
        sums /= len(images)
        stats = EpochStats(epoch, *sums)
        history.append(stats)
        if progress is not None:
            progress(stats)
    return TrainResult(params=params, enhancer=enh_cfg, history=history, optimizer=state)


# --- checkpoints --------------------------------------------------------------

MAGIC = b"DIRTXCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: NetworkParams
    enhancer: EnhancerConfig
    optimizer: AdamState | None = None
    meta: dict = field(default_factory=dict)


def _expected_shapes(cfg: EnhancerConfig) -> list[tuple[int, ...]]:
    out = []
    for wshape, bshape in cfg.layer_shapes():
        out += [wshape, bshape]
    return out


def save_checkpoint(path: str | Path, params: NetworkParams, enhancer: EnhancerConfig,
                    optimizer: AdamState | None = None, meta: dict | None = None) -> None:
    """Little-endian: magic, u32 version, u32 header length, JSON header, f64 payload."""
    shapes = params.shapes()
    if shapes != _expected_shapes(enhancer):
        raise CheckpointError(f"parameter shapes {shapes} do not match config {_expected_shapes(enhancer)}")
    header = {"enhancer": enhancer.to_dict(), "shapes": [list(s) for s in shapes], "meta": meta or {}}
    arrays = [t.data for t in params.tensors()]
    if optimizer is not None:
        header["optimizer"] = {k: getattr(optimizer, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "t")}
        arrays += list(optimizer.m) + list(optimizer.v)
    blob = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    Path(path).write_bytes(MAGIC + struct.pack("<II", VERSION, len(blob)) + blob + payload)


def load_checkpoint(path: str | Path, expected: EnhancerConfig | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    pos += 8
    if len(raw) < pos + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pos:pos + hlen])
        enhancer = EnhancerConfig(**header["enhancer"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    pos += hlen
    shapes = [tuple(s) for s in header["shapes"]]
    if shapes != _expected_shapes(enhancer):
        raise CheckpointError(f"{path}: shape table {shapes} inconsistent with stored config")
    if expected is not None:
        want = _expected_shapes(expected)
        if want != shapes:
            raise CheckpointError(f"{path}: shape mismatch: checkpoint has {shapes}, requested config needs {want}")
    opt = header.get("optimizer")
    all_shapes = shapes + (shapes + shapes if opt else [])
    need = sum(int(np.prod(s)) for s in all_shapes) * 8
    if len(raw) - pos != need:
        raise CheckpointError(f"{path}: payload is {len(raw) - pos} bytes, expected {need} (truncated or corrupt)")
    arrays = []
    for s in all_shapes:
        n = int(np.prod(s))
        arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(s))
        pos += n * 8
    k = len(shapes)
    tensors = [Tensor(a, requires_grad=True) for a in arrays[:k]]
    params = NetworkParams(tensors[0::2], tensors[1::2])
    state = None
    if opt:
        state = AdamState(**opt)
        state.m = arrays[k:2 * k]
        state.v = arrays[2 * k:]
    return Checkpoint(params=params, enhancer=enhancer, optimizer=state, meta=header.get("meta", {}))
