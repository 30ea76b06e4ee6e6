"""8-bit RGB image buffers, a minimal PNG codec, and bicubic downsampling.

The PNG support is deliberately narrow: 8-bit grayscale or RGB, not
interlaced.  Everything else (palette, alpha, 16-bit, bad checksums) is
rejected with a diagnostic rather than guessed at.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

_COLOR_TYPE_NAMES = {0: "grayscale", 2: "rgb", 3: "palette", 4: "grayscale+alpha", 6: "rgba"}


class PngError(ValueError):
    """A PNG stream failed validation or is unsupported."""


@dataclass(frozen=True)
class ImageBuffer:
    """Height x width x 3 array of 8-bit channel values."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise ShapeError(f"pixels must be (h, w, 3) uint8, got {p.shape} {p.dtype}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def to_tensor(self) -> Tensor:
        """(1, 3, h, w) float32 in [0, 1], dividing by 255."""
        return Tensor(self.pixels.astype(np.float32).transpose(2, 0, 1)[None] / np.float32(255.0))

    @classmethod
    def from_tensor(cls, t: Tensor) -> "ImageBuffer":
        """Quantize a (1, 3, h, w) tensor: clamp to [0, 1], then
        round-half-up to 8 bits."""
        if t.n != 1 or t.c != 3:
            raise ShapeError(f"expected a (1, 3, h, w) tensor, got {t.shape}")
        x = np.clip(t.data[0].astype(np.float64), 0.0, 1.0)
        quantized = np.floor(x * 255.0 + 0.5).astype(np.uint8)
        return cls(pixels=np.ascontiguousarray(quantized.transpose(1, 2, 0)))


# ---------------------------------------------------------------------------
# PNG reading
# ---------------------------------------------------------------------------

def _iter_chunks(blob: bytes):
    pos = len(_PNG_SIGNATURE)
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise PngError("truncated chunk header")
        (length,) = struct.unpack(">I", blob[pos:pos + 4])
        ctype = blob[pos + 4:pos + 8]
        data_end = pos + 8 + length
        if data_end + 4 > len(blob):
            raise PngError(f"truncated {ctype!r} chunk")
        data = blob[pos + 8:data_end]
        (crc,) = struct.unpack(">I", blob[data_end:data_end + 4])
        if zlib.crc32(ctype + data) & 0xFFFFFFFF != crc:
            raise PngError(f"CRC mismatch in {ctype.decode('latin1')} chunk")
        yield ctype, data
        pos = data_end + 4


def _paeth(left: np.ndarray, up: np.ndarray, up_left: np.ndarray) -> np.ndarray:
    p = left.astype(np.int32) + up.astype(np.int32) - up_left.astype(np.int32)
    pa = np.abs(p - left)
    pb = np.abs(p - up)
    pc = np.abs(p - up_left)
    out = np.where((pa <= pb) & (pa <= pc), left, np.where(pb <= pc, up, up_left))
    return out.astype(np.uint8)


def _unfilter(raw: bytes, width: int, height: int, channels: int) -> np.ndarray:
    stride = width * channels
    if len(raw) != height * (stride + 1):
        raise PngError(
            f"decompressed size {len(raw)} does not match {height} rows of {stride + 1} bytes"
        )
    data = np.frombuffer(raw, dtype=np.uint8).reshape(height, stride + 1)
    out = np.zeros((height, stride), dtype=np.uint8)
    bpp = channels
    for y in range(height):
        ftype = int(data[y, 0])
        row = data[y, 1:].astype(np.int32)
        prev = out[y - 1].astype(np.int32) if y else np.zeros(stride, dtype=np.int32)
        if ftype == 0:
            line = row
        elif ftype == 1:
            line = row.copy()
            for o in range(bpp):
                line[o::bpp] = np.cumsum(row[o::bpp]) % 256
        elif ftype == 2:
            line = (row + prev) % 256
        elif ftype in (3, 4):
            line = np.zeros(stride, dtype=np.int32)
            for x in range(width):
                s = slice(x * bpp, (x + 1) * bpp)
                left = line[s.start - bpp:s.start] if x else np.zeros(bpp, dtype=np.int32)
                up = prev[s]
                if ftype == 3:
                    line[s] = (row[s] + (left + up) // 2) % 256
                else:
                    up_left = prev[s.start - bpp:s.start] if x else np.zeros(bpp, dtype=np.int32)
                    pred = _paeth(
                        left.astype(np.uint8), up.astype(np.uint8), up_left.astype(np.uint8)
                    )
                    line[s] = (row[s] + pred) % 256
        else:
            raise PngError(f"unknown scanline filter type {ftype} on row {y}")
        out[y] = line.astype(np.uint8)
    return out.reshape(height, width, channels)


def decode_png(blob: bytes) -> ImageBuffer:
    """Decode an 8-bit grayscale or RGB PNG byte stream.

    Grayscale is promoted to three identical channels.
    """
    if not blob.startswith(_PNG_SIGNATURE):
        raise PngError("missing PNG signature")
    header = None
    idat = bytearray()
    saw_end = False
    for ctype, data in _iter_chunks(blob):
        if ctype == b"IHDR":
            if header is not None:
                raise PngError("duplicate IHDR chunk")
            if len(data) != 13:
                raise PngError(f"IHDR length {len(data)}, expected 13")
            header = struct.unpack(">IIBBBBB", data)
        elif ctype == b"IDAT":
            idat += data
        elif ctype == b"IEND":
            saw_end = True
            break
    if header is None:
        raise PngError("no IHDR chunk")
    if not saw_end:
        raise PngError("no IEND chunk")
    width, height, bit_depth, color_type, compression, filter_method, interlace = header
    if bit_depth != 8:
        raise PngError(f"unsupported bit depth {bit_depth}; only 8-bit images are handled")
    if color_type not in (0, 2):
        name = _COLOR_TYPE_NAMES.get(color_type, str(color_type))
        raise PngError(f"unsupported color type: {name}; only grayscale and rgb are handled")
    if compression != 0 or filter_method != 0:
        raise PngError("nonstandard compression or filter method")
    if interlace != 0:
        raise PngError("interlaced PNGs are not handled")
    if not idat:
        raise PngError("no IDAT data")
    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as e:
        raise PngError(f"corrupt IDAT stream: {e}") from e
    channels = 1 if color_type == 0 else 3
    pixels = _unfilter(raw, width, height, channels)
    if channels == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    return ImageBuffer(pixels=np.ascontiguousarray(pixels))


def load_png(path) -> ImageBuffer:
    with open(path, "rb") as fh:
        return decode_png(fh.read())


# ---------------------------------------------------------------------------
# PNG writing
# ---------------------------------------------------------------------------

def _chunk(ctype: bytes, data: bytes) -> bytes:
    return (
        struct.pack(">I", len(data))
        + ctype
        + data
        + struct.pack(">I", zlib.crc32(ctype + data) & 0xFFFFFFFF)
    )


def encode_png(buf: ImageBuffer) -> bytes:
    """Encode as 8-bit RGB, unfiltered scanlines."""
    h, w = buf.height, buf.width
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    rows = np.empty((h, w * 3 + 1), dtype=np.uint8)
    rows[:, 0] = 0
    rows[:, 1:] = buf.pixels.reshape(h, w * 3)
    idat = zlib.compress(rows.tobytes(), 6)
    return (
        _PNG_SIGNATURE
        + _chunk(b"IHDR", ihdr)
        + _chunk(b"IDAT", idat)
        + _chunk(b"IEND", b"")
    )


def save_png(buf: ImageBuffer, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_png(buf))


# ---------------------------------------------------------------------------
# Bicubic downsampling (for synthesizing low-resolution inputs)
# ---------------------------------------------------------------------------

def _cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    near = (a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0
    far = a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a
    return np.where(ax <= 1.0, near, np.where(ax < 2.0, far, 0.0))


def _downsample_matrix(in_size: int, out_size: int) -> np.ndarray:
    # antialiased: the kernel is stretched by the scale factor when shrinking
    scale = out_size / in_size
    support = 2.0 / scale
    centers = (np.arange(out_size, dtype=np.float64) + 0.5) / scale - 0.5
    taps = int(np.ceil(support)) * 2 + 1
    left = np.floor(centers - support).astype(np.int64) + 1
    idx = left[:, None] + np.arange(taps)[None, :]
    weights = _cubic_kernel((idx - centers[:, None]) * scale)
    weights /= weights.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_size - 1)  # replicate edges
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    np.add.at(matrix, (np.repeat(np.arange(out_size), taps), idx.reshape(-1)), weights.reshape(-1))
    return matrix


def bicubic_downsample(x: Tensor, r: int) -> Tensor:
    """Shrink spatial dimensions by an integer factor with an antialiased
    cubic kernel (a = -0.5).  Used to synthesize low-resolution training
    inputs; not differentiable."""
    if r < 1:
        raise ShapeError(f"factor must be >= 1, got {r}")
    if r == 1:
        return x
    if x.h % r or x.w % r:
        raise ShapeError(f"spatial size {x.h}x{x.w} not divisible by factor {r}")
    mh = _downsample_matrix(x.h, x.h // r)
    mw = _downsample_matrix(x.w, x.w // r)
    data = x.data.astype(np.float64)
    out = np.einsum("nchw,oh->ncow", data, mh, optimize=True)
    out = np.einsum("ncow,pw->ncop", out, mw, optimize=True)
    return Tensor(out.astype(x.data.dtype))
