"""Block DCT codec for the 128x32 model plane.

The forward transform of an N x N block is

    DCT(i, j) = 1/sqrt(2N) * C(i) * C(j) * sum_x sum_y p(x, y)
                * cos((2x+1) i pi / 2N) * cos((2y+1) j pi / 2N)

with C(0) = 1/sqrt(2) and C(k) = 1 otherwise. For N = 8 this is the
orthonormal JPEG DCT; for N = 4 the same normalization scales it by
1/sqrt(2), so the inverse carries a gain of 8/N.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

SUPPORTED_BLOCKS = (4, 8)
PLANE_SHAPE = (128, 32)
CDCT_MAGIC = b"CDCT"
CDCT_VERSION = 1

# ITU-T T.81 Annex K.1 luminance table
JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
])


def _check_block_size(n: int) -> None:
    if n not in SUPPORTED_BLOCKS:
        raise ValueError(f"unsupported block size {n}; expected one of {SUPPORTED_BLOCKS}")


def _norm(n: int) -> float:
    return 1.0 / np.sqrt(2.0 * n)


def _inverse_gain(n: int) -> float:
    # The 2-D map A(P) = s * B P B^T with B B^T = (n/2) I satisfies
    # A A^T = s^2 (n/2)^2 I = (n/8) I, hence A^-1 = (8/n) A^T.
    return 8.0 / n


@lru_cache(maxsize=None)
def cosine_basis(n: int) -> np.ndarray:
    """basis[i, x] = C(i) * cos((2x+1) i pi / 2n), float64."""
    _check_block_size(n)
    i = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    basis = np.cos((2 * x + 1) * i * np.pi / (2 * n))
    basis[0] *= 1 / np.sqrt(2)
    basis.setflags(write=False)
    return basis


def _float_array(a) -> np.ndarray:
    a = np.asarray(a)
    return a if a.dtype == np.float32 else a.astype(np.float64)


def forward_block_dct(block, n: int | None = None) -> np.ndarray:
    """Transform one N x N block (or a stack [..., N, N] of blocks).

    float32 input is transformed in float32; anything else in float64.
    """
    block = _float_array(block)
    n = n or block.shape[-1]
    _check_block_size(n)
    if block.shape[-2:] != (n, n):
        raise ValueError(f"expected {n}x{n} blocks, got shape {block.shape}")
    basis = cosine_basis(n).astype(block.dtype)
    return block.dtype.type(_norm(n)) * (basis @ block @ basis.T)


def inverse_block_dct(coeffs, n: int | None = None) -> np.ndarray:
    coeffs = _float_array(coeffs)
    n = n or coeffs.shape[-1]
    _check_block_size(n)
    if coeffs.shape[-2:] != (n, n):
        raise ValueError(f"expected {n}x{n} blocks, got shape {coeffs.shape}")
    basis = cosine_basis(n).astype(coeffs.dtype)
    return coeffs.dtype.type(_inverse_gain(n) * _norm(n)) * (basis.T @ coeffs @ basis)


def jpeg_quant_table(block_size: int, quality: int) -> np.ndarray:
    """Quantizer steps for ``quality`` in 1..100 using the libjpeg scaling rule.

    4x4 tables take the top-left corner of the 8x8 luminance table.
    """
    _check_block_size(block_size)
    if not 1 <= int(quality) <= 100 or int(quality) != quality:
        raise ValueError(f"quality must be an integer in 1..100, got {quality}")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    base = JPEG_LUMA[:block_size, :block_size]
    steps = np.floor(base * scale / 100 + 0.5)
    return np.maximum(1, steps).astype(np.int64)


def quantize(coeffs, steps) -> np.ndarray:
    """Quantize then dequantize ``coeffs`` (blocks [..., N, N]) with ``steps``."""
    return np.round(np.asarray(coeffs, dtype=np.float64) / steps) * steps


def _blocks(plane: np.ndarray, n: int) -> np.ndarray:
    H, W = plane.shape
    return plane.reshape(H // n, n, W // n, n).transpose(0, 2, 1, 3)


def _unblocks(blocks: np.ndarray) -> np.ndarray:
    bh, bw, n, _ = blocks.shape
    return blocks.transpose(0, 2, 1, 3).reshape(bh * n, bw * n)


@dataclass
class DctImage:
    """Block-DCT coefficient plane, laid out in place block by block.

    ``coeffs`` are divided by ``block_size`` after the transform; the
    quantizer (when used) acts on coefficients of the 0..255 pixel scale.
    """
    coeffs: np.ndarray
    block_size: int
    quantized: bool = False
    quality: int = 0

    def __post_init__(self):
        _check_block_size(self.block_size)
        H, W = self.coeffs.shape
        if H % self.block_size or W % self.block_size:
            raise ValueError(f"plane {self.coeffs.shape} not divisible by block size {self.block_size}")


def compress_image(plane, block_size: int, quant: np.ndarray | None = None,
                   quality: int = 0) -> DctImage:
    """Blockwise DCT of a [0, 1] plane.

    Values are shifted to [-0.5, 0.5], transformed per block, optionally
    quantized (steps in 8-bit units), and divided by ``block_size``.
    """
    plane = np.asarray(plane, dtype=np.float64)
    _check_block_size(block_size)
    if plane.ndim != 2 or plane.shape[0] % block_size or plane.shape[1] % block_size:
        raise ValueError(f"plane of shape {plane.shape} is not divisible into {block_size}x{block_size} blocks")
    coeffs = forward_block_dct(_blocks(plane - 0.5, block_size), block_size)
    if quant is not None:
        quant = np.asarray(quant)
        if quant.shape != (block_size, block_size) or np.any(quant < 1):
            raise ValueError(f"quant table must be {block_size}x{block_size} with steps >= 1")
        coeffs = quantize(coeffs * 255.0, quant) / 255.0
    return DctImage(_unblocks(coeffs) / block_size, block_size, quant is not None, int(quality))


def decompress_image(img: DctImage) -> np.ndarray:
    """Back to the [0, 1] pixel plane (quantization loss stays)."""
    n = img.block_size
    blocks = _blocks(np.asarray(img.coeffs, dtype=np.float64) * n, n)
    return _unblocks(inverse_block_dct(blocks, n)) + 0.5


def encode_plane(plane, mode: str, quality: int | None = None) -> np.ndarray:
    """Network input for ``mode`` in {normal, dct8, dct4}, as float32."""
    if mode == "normal":
        return np.asarray(plane, dtype=np.float32)
    if mode not in ("dct8", "dct4"):
        raise ValueError(f"unknown input mode {mode!r}")
    n = int(mode[3:])
    quant = jpeg_quant_table(n, quality) if quality else None
    return compress_image(plane, n, quant, quality or 0).coeffs.astype(np.float32)


# ---------------------------------------------------------------------------
# CDCT stream

def write_cdct(path, img: DctImage) -> None:
    if img.coeffs.shape != PLANE_SHAPE:
        raise ValueError(f"CDCT streams hold {PLANE_SHAPE} planes, got {img.coeffs.shape}")
    header = CDCT_MAGIC + struct.pack("<BBBB", CDCT_VERSION, img.block_size,
                                      int(img.quantized), img.quality if img.quantized else 0)
    Path(path).write_bytes(header + np.ascontiguousarray(img.coeffs, dtype="<f4").tobytes())


def read_cdct(path) -> DctImage:
    data = Path(path).read_bytes()
    if data[:4] != CDCT_MAGIC:
        raise ValueError(f"{path}: not a CDCT stream")
    version, block, quantized, quality = struct.unpack_from("<BBBB", data, 4)
    if version != CDCT_VERSION:
        raise ValueError(f"{path}: unsupported CDCT version {version}")
    count = PLANE_SHAPE[0] * PLANE_SHAPE[1]
    if len(data) != 8 + 4 * count:
        raise ValueError(f"{path}: truncated CDCT stream")
    coeffs = np.frombuffer(data, "<f4", count, 8).reshape(PLANE_SHAPE).astype(np.float32)
    return DctImage(coeffs, block, bool(quantized), quality)
