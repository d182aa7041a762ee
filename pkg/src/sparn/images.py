"""Minimal portable graymap/pixmap writers for sample visualization."""

from __future__ import annotations

from pathlib import Path

import numpy as np

# symmetric-difference colors: on only in the training example -> blue,
# on only in the sample -> orange, agreement -> white
COLOR_ONLY_TRAIN = (0, 0, 255)
COLOR_ONLY_SAMPLE = (255, 128, 0)
COLOR_AGREE = (255, 255, 255)


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary P5 graymap, maxval 255."""
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError("P5 image must be a 2-D array")
    h, w = gray.shape
    with Path(path).open("wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6 pixmap, maxval 255."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("P6 image must be an (H, W, 3) array")
    h, w, _ = rgb.shape
    with Path(path).open("wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def binary_to_gray(vec: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Encoded +-1 vector to 0/255 grayscale."""
    vec = np.asarray(vec, dtype=np.float64)
    return np.where(vec.reshape(shape) > 0, 255, 0).astype(np.uint8)


def continuous_to_gray(raw: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Raw-space values clamped to [0, 255]; clamping affects rendering only."""
    raw = np.asarray(raw, dtype=np.float64)
    return np.clip(np.rint(raw.reshape(shape)), 0, 255).astype(np.uint8)


def symmetric_difference_rgb(sample: np.ndarray, train: np.ndarray,
                             shape: tuple[int, int]) -> np.ndarray:
    """Ternary comparison image of two encoded +-1 vectors."""
    s = np.asarray(sample).reshape(shape) > 0
    t = np.asarray(train).reshape(shape) > 0
    out = np.empty(shape + (3,), dtype=np.uint8)
    out[:] = COLOR_AGREE
    out[t & ~s] = COLOR_ONLY_TRAIN
    out[s & ~t] = COLOR_ONLY_SAMPLE
    return out
