"""Deterministic manifests for unpaired training and paired evaluation folders."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from PIL import Image


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Pair:
    name: str
    low: Path
    high: Path


def _pngs(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() == ".png")


def _size(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as img:
            return img.size
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read image ({exc})") from exc


def scan_unpaired(root) -> list[Path]:
    """PNG files under ``root`` (or ``root/low`` if present), sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    folder = root / "low" if (root / "low").is_dir() else root
    files = _pngs(folder)
    if not files:
        raise DatasetError(f"{folder}: no images found")
    return files


def scan_paired(root) -> list[Pair]:
    """Filename-matched pairs from ``root/low`` and ``root/high``."""
    root = Path(root)
    low_dir, high_dir = root / "low", root / "high"
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    if not low_dir.is_dir() or not high_dir.is_dir():
        raise DatasetError(f"{root}: paired layout needs low/ and high/ subdirectories")
    lows = _pngs(low_dir)
    if not lows:
        raise DatasetError(f"{low_dir}: no images found")
    highs = {p.name for p in _pngs(high_dir)}
    pairs = []
    for lo in lows:
        if lo.name not in highs:
            raise DatasetError(f"orphan low-light image {lo}: no {high_dir / lo.name}")
        hi = high_dir / lo.name
        s_lo, s_hi = _size(lo), _size(hi)
        if s_lo != s_hi:
            raise DatasetError(f"size mismatch for {lo.name}: low is {s_lo[0]}x{s_lo[1]}, "
                               f"high is {s_hi[0]}x{s_hi[1]}")
        pairs.append(Pair(lo.stem, lo, hi))
    return pairs


def scan_dataset(root, paired: bool = False):
    return scan_paired(root) if paired else scan_unpaired(root)

