"""Word-image preprocessing: contrast stretch, fit onto 128x32, normalize.

Gray images are ``uint8`` arrays of shape (height, width). The model input
is a float32 plane of shape (128, 32): width first, values in [0, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

TARGET_WIDTH = 128
TARGET_HEIGHT = 32
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def as_gray(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"expected a nonempty 2-D gray image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("gray pixel values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def load_gray(path) -> np.ndarray:
    """Read a PNG or PGM file as 8-bit gray; color is converted with BT.601 luma."""
    path = Path(path)
    with Image.open(path) as im:
        if im.mode == "P":
            im = im.convert("RGBA" if "transparency" in im.info else "RGB")
        if im.mode in ("RGB", "RGBA"):
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
            luma = rgb @ np.array(LUMA_WEIGHTS)
            return np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)
        if im.mode == "LA":
            im = im.getchannel("L")
        if im.mode in ("I;16", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return np.clip(np.floor(arr / 257 + 0.5), 0, 255).astype(np.uint8)
        return np.asarray(im.convert("L"), dtype=np.uint8).copy()


def save_gray(path, img) -> None:
    Image.fromarray(as_gray(img), mode="L").save(path)


def contrast_stretch(img) -> np.ndarray:
    """Map [min, max] linearly onto [0, 255], truncating toward zero.

    A constant image has no range to stretch and is returned unchanged.
    """
    img = as_gray(img)
    lo, hi = int(img.min()), int(img.max())
    if hi == lo:
        return img.copy()
    # integer arithmetic so exact multiples are not truncated one level low
    return ((img.astype(np.int64) - lo) * 255 // (hi - lo)).astype(np.uint8)


def bilinear_resize(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers (no antialiasing)."""
    src = np.asarray(img, dtype=np.float64)
    h, w = src.shape

    def axis(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(height, h)
    x0, x1, fx = axis(width, w)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bottom * fy[:, None]
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def fit_size(width: int, height: int, target=(TARGET_WIDTH, TARGET_HEIGHT)) -> tuple[int, int]:
    f = min(target[0] / width, target[1] / height)
    new_w = min(target[0], max(1, int(np.floor(width * f + 0.5))))
    new_h = min(target[1], max(1, int(np.floor(height * f + 0.5))))
    return new_w, new_h


def resize_pad(img, target=(TARGET_WIDTH, TARGET_HEIGHT)) -> np.ndarray:
    """Scale to fit ``target`` (width, height) keeping aspect, paste top-left on white."""
    img = as_gray(img)
    h, w = img.shape
    new_w, new_h = fit_size(w, h, target)
    canvas = np.full((target[1], target[0]), 255, dtype=np.uint8)
    canvas[:new_h, :new_w] = bilinear_resize(img, new_w, new_h)
    return canvas


def normalize_transpose(img) -> np.ndarray:
    """(32, 128) gray image -> (128, 32) float32 plane in [0, 1]."""
    img = as_gray(img)
    if img.shape != (TARGET_HEIGHT, TARGET_WIDTH):
        raise ValueError(f"expected a {TARGET_WIDTH}x{TARGET_HEIGHT} image "
                         f"(shape {(TARGET_HEIGHT, TARGET_WIDTH)}), got shape {img.shape}")
    return (img.astype(np.float32) / 255.0).T.copy()


def denormalize_transpose(plane) -> np.ndarray:
    """Inverse of :func:`normalize_transpose` for planes of exact 8-bit levels."""
    plane = np.asarray(plane)
    if plane.shape != (TARGET_WIDTH, TARGET_HEIGHT):
        raise ValueError(f"expected a plane of shape {(TARGET_WIDTH, TARGET_HEIGHT)}, got {plane.shape}")
    return np.clip(np.floor(plane.astype(np.float64).T * 255 + 0.5), 0, 255).astype(np.uint8)


def preprocess(img) -> np.ndarray:
    """Full chain: contrast stretch -> resize/pad -> normalize/transpose."""
    return normalize_transpose(resize_pad(contrast_stretch(img)))
