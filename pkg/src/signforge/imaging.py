"""Image preprocessing and the byte-exact pixel codecs.

Everything here is deterministic and pure: YUV420 -> RGB conversion
(BT.601 full range, 2x2 chroma replication), bilinear resize with
half-pixel centers, the /255 normalization into a [1,64,64,3] tensor,
strict RFC-4648 base64, and binary PPM (P6, maxval 255) for on-disk images.
Wherever bytes are produced, rounding is to nearest with ties away from
zero.
"""

from __future__ import annotations

import base64
import binascii
import re
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError, SignForgeError

TARGET_SIZE = 64


@dataclass(frozen=True)
class RgbImage:
    """8-bit RGB image, row-major, 3 bytes per pixel."""

    width: int
    height: int
    pixels: bytes

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise FormatError(f"image dimensions must be positive, "
                              f"got {self.width}x{self.height}")
        expected = self.width * self.height * 3
        if len(self.pixels) != expected:
            raise FormatError(f"pixel buffer has {len(self.pixels)} bytes, "
                              f"expected {expected} for {self.width}x{self.height} RGB")

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(
            self.height, self.width, 3)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "RgbImage":
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError(f"expected [h, w, 3] array, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        return cls(arr.shape[1], arr.shape[0], arr.tobytes())


@dataclass(frozen=True)
class Yuv420Frame:
    """Planar I420 frame: full-size Y plane, 2x2-subsampled U and V planes."""

    width: int
    height: int
    y: bytes
    u: bytes
    v: bytes

    def __post_init__(self):
        if self.width < 2 or self.height < 2 or self.width % 2 or self.height % 2:
            raise FormatError(f"frame dimensions must be even and positive, "
                              f"got {self.width}x{self.height}")
        if len(self.y) != self.width * self.height:
            raise FormatError(f"Y plane has {len(self.y)} bytes, "
                              f"expected {self.width * self.height}")
        chroma = (self.width // 2) * (self.height // 2)
        if len(self.u) != chroma or len(self.v) != chroma:
            raise FormatError(f"chroma planes need {chroma} bytes each, "
                              f"got U={len(self.u)} V={len(self.v)}")


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def _to_bytes(x: np.ndarray) -> np.ndarray:
    return np.clip(_round_half_away(x), 0, 255).astype(np.uint8)


def yuv420_to_rgb(frame: Yuv420Frame) -> RgbImage:
    """BT.601 full-range conversion with 2x2 chroma replication."""
    h, w = frame.height, frame.width
    y = np.frombuffer(frame.y, dtype=np.uint8).reshape(h, w).astype(np.float64)
    u = np.frombuffer(frame.u, dtype=np.uint8).reshape(h // 2, w // 2).astype(np.float64)
    v = np.frombuffer(frame.v, dtype=np.uint8).reshape(h // 2, w // 2).astype(np.float64)
    u = np.repeat(np.repeat(u, 2, axis=0), 2, axis=1) - 128.0
    v = np.repeat(np.repeat(v, 2, axis=0), 2, axis=1) - 128.0
    rgb = np.stack([
        y + 1.402 * v,
        y - 0.344136 * u - 0.714136 * v,
        y + 1.772 * u,
    ], axis=-1)
    return RgbImage(w, h, _to_bytes(rgb).tobytes())


def resize_bilinear(img: RgbImage, out_w: int = TARGET_SIZE,
                    out_h: int = TARGET_SIZE) -> RgbImage:
    """Half-pixel-center bilinear resampling, borders clamped."""
    if out_w < 1 or out_h < 1:
        raise ShapeError(f"target size must be positive, got {out_w}x{out_h}")
    if out_w == img.width and out_h == img.height:
        return img
    src = img.to_array().astype(np.float64)

    def axis_coords(out_n: int, src_n: int):
        pos = (np.arange(out_n) + 0.5) * (src_n / out_n) - 0.5
        pos = np.clip(pos, 0.0, src_n - 1.0)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, src_n - 1)
        return lo, hi, pos - lo

    x0, x1, fx = axis_coords(out_w, img.width)
    y0, y1, fy = axis_coords(out_h, img.height)
    fx = fx[None, :, None]
    fy = fy[:, None, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    blended = top * (1 - fy) + bottom * fy
    return RgbImage(out_w, out_h, _to_bytes(blended).tobytes())


def normalize(img: RgbImage) -> np.ndarray:
    """64x64 RGB bytes -> float32 tensor [1,64,64,3] scaled into [0, 1]."""
    if img.width != TARGET_SIZE or img.height != TARGET_SIZE:
        raise ShapeError(f"normalize expects a {TARGET_SIZE}x{TARGET_SIZE} image, "
                         f"got {img.width}x{img.height}")
    arr = img.to_array().astype(np.float32) / np.float32(255.0)
    return arr.reshape(1, TARGET_SIZE, TARGET_SIZE, 3)


_B64_RE = re.compile(rb"\A(?:[A-Za-z0-9+/]{4})*"
                     rb"(?:[A-Za-z0-9+/]{2}==|[A-Za-z0-9+/]{3}=)?\Z")


def base64_encode(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def base64_decode(text) -> bytes:
    """Strict RFC-4648 decode: standard alphabet, exact padding, no whitespace."""
    raw = text.encode("ascii", "replace") if isinstance(text, str) else bytes(text)
    if not _B64_RE.fullmatch(raw):
        raise FormatError("invalid base64 payload", stage="base64")
    try:
        return base64.b64decode(raw, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise FormatError(f"invalid base64 payload: {exc}", stage="base64") from exc


def encode_ppm(img: RgbImage) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels


def decode_ppm(data: bytes) -> RgbImage:
    """Parses binary P6 with maxval 255; '#' comments allowed in the header."""
    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(data):
            ch = data[pos:pos + 1]
            if ch in b" \t\r\n":
                pos += 1
            elif ch == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and data[pos:pos + 1] not in b" \t\r\n#":
            pos += 1
        if start == pos:
            raise FormatError("PPM header ended unexpectedly", stage="ppm")
        return data[start:pos]

    magic = next_token()
    if magic != b"P6":
        raise FormatError(f"not a binary PPM: magic {magic[:8]!r}", stage="ppm")

    def next_int(what: str) -> int:
        token = next_token()
        if not token.isdigit():
            raise FormatError(f"PPM {what} is not a number: {token[:8]!r}", stage="ppm")
        return int(token)

    width = next_int("width")
    height = next_int("height")
    maxval = next_int("maxval")
    if width < 1 or height < 1:
        raise FormatError(f"PPM dimensions must be positive, got {width}x{height}",
                          stage="ppm")
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", stage="ppm")
    if pos >= len(data) or data[pos:pos + 1] not in b" \t\r\n":
        raise FormatError("missing whitespace after PPM maxval", stage="ppm")
    pos += 1  # exactly one whitespace byte separates header and pixels
    expected = width * height * 3
    pixels = data[pos:]
    if len(pixels) < expected:
        raise FormatError(f"PPM pixel data truncated: {len(pixels)} of "
                          f"{expected} bytes", stage="ppm")
    if len(pixels) > expected:
        raise FormatError(f"{len(pixels) - expected} trailing bytes after PPM pixels",
                          stage="ppm")
    return RgbImage(width, height, bytes(pixels))


def _stage(name: str, fn, *args):
    try:
        return fn(*args)
    except SignForgeError as exc:
        if getattr(exc, "stage", None):
            raise
        raise FormatError(f"{name}: {exc}", stage=name) from exc


def preprocess(payload) -> np.ndarray:
    """The full ingestion chain: to RGB if needed, resize to 64x64, normalize.

    ``payload`` is an RgbImage, a Yuv420Frame, or raw PPM bytes; errors carry
    the name of the stage that rejected the input.
    """
    if isinstance(payload, (bytes, bytearray, memoryview)):
        img = _stage("ppm", decode_ppm, bytes(payload))
    elif isinstance(payload, Yuv420Frame):
        img = _stage("yuv420", yuv420_to_rgb, payload)
    elif isinstance(payload, RgbImage):
        img = payload
    else:
        raise TypeError(f"unsupported payload type {type(payload).__name__}")
    img = _stage("resize", resize_bilinear, img, TARGET_SIZE, TARGET_SIZE)
    return _stage("normalize", normalize, img)
