"""Image tensors, range transforms, 8-bit quantization, and file I/O.

Two value ranges exist, tagged explicitly on every tensor:

* ``BYTE``: values in [0, 255] (what classifiers and files see),
* ``UNIT``: values in [-1, 1] (what the diffusion trajectory runs in).

The maps between them are the exact affine pair v/127.5 - 1 and
(v + 1) * 127.5, never clamped: intermediate attack states are allowed to
leave the nominal interval by up to the certified budget, and the ideal
floating-point outputs must survive a round trip unchanged. Clamping happens
in exactly one place, ``quantize_8bit``.

File formats:

* PNG (8-bit RGB or grayscale) for quantized inputs/outputs,
* "ADVF", a raw little-endian float32 container for ideal-scenario outputs
  and image-valued trace states: magic ``ADVF``, uint32 version=1, uint32
  H, W, C, then H*W*C IEEE-754 float32 values row-major.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

ADVF_MAGIC = b"ADVF"
ADVF_VERSION = 1
_ADVF_HEADER = struct.Struct("<4sIIII")


class RangeTagError(ValueError):
    """An operation received a tensor tagged with the wrong value range."""


class MalformedFileError(ValueError):
    """A container file failed structural validation (magic, sizes, depth)."""


class ValueRange(enum.Enum):
    UNIT = "unit"
    BYTE = "byte"


@dataclass(frozen=True)
class ImageTensor:
    """H x W x C array of reals with an explicit value-range tag.

    ``data`` is row-major (row, column, channel) and never mutated by any
    operation in this package; all transforms return new tensors.
    """

    data: np.ndarray
    range_tag: ValueRange

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"image data must be (H, W, C), got shape {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape


def _require_tag(img: ImageTensor, tag: ValueRange, op: str):
    if img.range_tag is not tag:
        raise RangeTagError(f"{op} expects a {tag.value}-range tensor, got {img.range_tag.value}")


def to_unit_range(img: ImageTensor) -> ImageTensor:
    """[0, 255] -> [-1, 1] via v/127.5 - 1. Exact inverse of to_byte_range."""
    _require_tag(img, ValueRange.BYTE, "to_unit_range")
    return ImageTensor(img.data / 127.5 - 1.0, ValueRange.UNIT)


def to_byte_range(img: ImageTensor) -> ImageTensor:
    """[-1, 1] -> [0, 255] via (v + 1) * 127.5. No clamping: raw values are
    preserved so the ideal floating-point scenario loses nothing."""
    _require_tag(img, ValueRange.UNIT, "to_byte_range")
    return ImageTensor((img.data + 1.0) * 127.5, ValueRange.BYTE)


def quantize_8bit(img: ImageTensor) -> ImageTensor:
    """round-then-clamp to exact integers in [0, 255]. Idempotent."""
    _require_tag(img, ValueRange.BYTE, "quantize_8bit")
    q = np.clip(np.rint(img.data), 0.0, 255.0)
    return ImageTensor(q, ValueRange.BYTE)


def advf_pack(data: np.ndarray) -> bytes:
    """One self-describing ADVF record (header + float32 payload); records
    can be streamed back-to-back into a single file."""
    if data.ndim != 3:
        raise ValueError(f"ADVF payloads are (H, W, C), got shape {data.shape}")
    h, w, c = data.shape
    header = _ADVF_HEADER.pack(ADVF_MAGIC, ADVF_VERSION, h, w, c)
    return header + np.ascontiguousarray(data, dtype="<f4").tobytes()


def advf_unpack(blob: bytes, offset: int = 0) -> tuple:
    """Parse one ADVF record at ``offset``; returns (array, next_offset)."""
    if len(blob) - offset < _ADVF_HEADER.size:
        raise MalformedFileError(f"truncated header at offset {offset}")
    magic, version, h, w, c = _ADVF_HEADER.unpack_from(blob, offset)
    if magic != ADVF_MAGIC:
        raise MalformedFileError(f"bad magic {magic!r} at offset {offset}")
    if version != ADVF_VERSION:
        raise MalformedFileError(f"unsupported version {version}")
    start = offset + _ADVF_HEADER.size
    nbytes = h * w * c * 4
    if len(blob) - start < nbytes:
        raise MalformedFileError(
            f"payload at offset {offset} is short ({len(blob) - start} of {nbytes} bytes)")
    data = np.frombuffer(blob, dtype="<f4", count=h * w * c, offset=start)
    return data.reshape(h, w, c).copy(), start + nbytes


def write_raw_float(img: ImageTensor, path) -> None:
    """Write the ADVF container. Values are stored as float32; inputs already
    in float32 round-trip bit-exactly."""
    with open(path, "wb") as f:
        f.write(advf_pack(img.data))


def read_raw_float(path, range_tag: ValueRange = ValueRange.BYTE) -> ImageTensor:
    """Read an ADVF container. The format carries no range tag; callers say
    what the payload means (attack outputs default to byte range)."""
    with open(path, "rb") as f:
        blob = f.read()
    try:
        data, end = advf_unpack(blob, 0)
    except MalformedFileError as e:
        raise MalformedFileError(f"{path}: {e}") from None
    if end != len(blob):
        raise MalformedFileError(f"{path}: {len(blob) - end} trailing bytes")
    return ImageTensor(data, range_tag)


def read_png(path) -> ImageTensor:
    """Read an 8-bit RGB or grayscale PNG as an integer-valued byte tensor."""
    with Image.open(path) as im:
        if im.format != "PNG":
            raise MalformedFileError(f"{path}: not a PNG file (format={im.format})")
        if im.mode not in ("L", "RGB"):
            raise MalformedFileError(
                f"{path}: unsupported PNG mode {im.mode!r} (only 8-bit L or RGB)")
        arr = np.asarray(im, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return ImageTensor(arr, ValueRange.BYTE)


def write_png(img: ImageTensor, path) -> None:
    """Write an integer-valued byte tensor losslessly as 8-bit PNG."""
    _require_tag(img, ValueRange.BYTE, "write_png")
    data = img.data
    if not np.all((data >= 0) & (data <= 255) & (data == np.rint(data))):
        raise ValueError("write_png needs exact integers in [0, 255]; quantize first")
    u8 = data.astype(np.uint8)
    if img.channels == 1:
        Image.fromarray(u8[:, :, 0], mode="L").save(path, format="PNG")
    elif img.channels == 3:
        Image.fromarray(u8, mode="RGB").save(path, format="PNG")
    else:
        raise ValueError(f"write_png supports 1 or 3 channels, got {img.channels}")
