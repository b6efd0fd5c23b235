"""8-bit RGB PNG is the only accepted image format."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

PNG_SIG = b"\x89PNG\r\n\x1a\n"
_COLOR_TYPES = {0: "grayscale", 2: "RGB", 3: "palette", 4: "grayscale+alpha", 6: "RGBA"}


class ImageFormatError(ValueError):
    pass


def _check_header(path: Path) -> None:
    try:
        with open(path, "rb") as fh:
            head = fh.read(33)
    except OSError as exc:
        raise ImageFormatError(f"{path}: cannot read ({exc.strerror})") from exc
    if head[:8] != PNG_SIG or head[12:16] != b"IHDR":
        raise ImageFormatError(f"{path}: unsupported format (not a PNG file)")
    depth, ctype = struct.unpack_from(">BB", head, 24)
    if depth != 8 or ctype != 2:
        kind = _COLOR_TYPES.get(ctype, f"color type {ctype}")
        raise ImageFormatError(f"{path}: unsupported format ({depth}-bit {kind}); need 8-bit RGB PNG")


def read_image(path) -> np.ndarray:
    """H x W x 3 float64 in [0, 1]."""
    path = Path(path)
    _check_header(path)
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: corrupt PNG ({exc})") from exc
    return data.astype(np.float64) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got {image.shape}")
    Image.fromarray(to_uint8(image)).save(Path(path), format="PNG")


def write_gray(path, values: np.ndarray) -> None:
    """Grayscale PNG of a map already scaled to [0, 1]."""
    Image.fromarray(to_uint8(values)).save(Path(path), format="PNG")
