"""Thin PNG read/write helpers (8-bit via Pillow)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

MASK_THRESHOLD = 128  # gray value >= 128 counts as foreground


def read_rgb(path) -> np.ndarray:
    """HxWx3 float image in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def read_mask(path) -> np.ndarray:
    """HxW {0,1} uint8 mask; tolerant of anti-aliased 8-bit exports."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= MASK_THRESHOLD).astype(np.uint8)


def read_gray01(path) -> np.ndarray:
    """HxW float map in [0,1] from an 8-bit gray PNG."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def _to_u8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)


def write_rgb(path, arr: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_u8(arr), mode="RGB").save(path)


def write_rgba(path, arr: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_u8(arr), mode="RGBA").save(path)


def write_gray(path, arr: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_u8(arr), mode="L").save(path)
