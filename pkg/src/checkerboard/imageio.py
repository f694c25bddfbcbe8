"""Binary PGM (P5) / PPM (P6) reading and writing, 8-bit samples only."""

import re
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

_MAGIC_CHANNELS = {b"P5": 1, b"P6": 3}
_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")
_MAX_DIM = 1 << 16


class ImageFormatError(ContractError):
    """A file is not a well-formed 8-bit binary PGM/PPM."""


@dataclass
class ImageBuffer:
    width: int
    height: int
    channels: int
    samples: np.ndarray  # (H, W, C) uint8

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.uint8).reshape(self.height, self.width, self.channels)

    def to_float(self):
        """(C, H, W) float32 in [0, 1]."""
        return np.transpose(self.samples, (2, 0, 1)).astype(np.float32) / 255.0

    @classmethod
    def from_float(cls, x):
        x = np.asarray(x)
        if x.ndim == 2:
            x = x[None]
        c, h, w = x.shape
        u8 = np.clip(np.floor(np.asarray(x, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)
        return cls(w, h, c, np.transpose(u8, (1, 2, 0)))


def parse_header(blob):
    """Return ``(channels, width, height, maxval, payload_offset)``; raises on bad headers."""
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(blob, pos)
        if m is None:
            raise ImageFormatError("truncated netpbm header")
        fields.append(m.group(1))
        pos = m.end()
    magic, *nums = fields
    if magic not in _MAGIC_CHANNELS:
        raise ImageFormatError(f"unsupported magic {magic[:8]!r}; only binary P5/P6 are read")
    if not all(n.isdigit() and len(n) <= 6 for n in nums):
        raise ImageFormatError("non-numeric width/height/maxval")
    width, height, maxval = (int(n) for n in nums)
    if not (0 < width <= _MAX_DIM and 0 < height <= _MAX_DIM):
        raise ImageFormatError(f"bad image dimensions {width}x{height}")
    if not 0 < maxval <= 255:
        raise ImageFormatError(f"maxval {maxval} not supported (8-bit only)")
    if pos >= len(blob) or blob[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise ImageFormatError("missing whitespace after maxval")
    return _MAGIC_CHANNELS[magic], width, height, maxval, pos + 1


def decode_netpbm(blob):
    channels, width, height, maxval, offset = parse_header(blob)
    n = width * height * channels
    if len(blob) - offset < n:
        raise ImageFormatError(f"payload has {len(blob) - offset} bytes, expected {n}")
    samples = np.frombuffer(blob, dtype=np.uint8, count=n, offset=offset)
    if maxval != 255:
        if samples.max(initial=0) > maxval:
            raise ImageFormatError("sample exceeds maxval")
        samples = np.floor(samples.astype(np.float64) * 255.0 / maxval + 0.5).astype(np.uint8)
    return ImageBuffer(width, height, channels, samples.copy())


def read_image(path):
    with open(path, "rb") as f:
        return decode_netpbm(f.read())


def encode_netpbm(image):
    magic = b"P5" if image.channels == 1 else b"P6"
    header = magic + f"\n{image.width} {image.height}\n255\n".encode()
    return header + np.ascontiguousarray(image.samples, dtype=np.uint8).tobytes()


def write_image(path, image):
    if image.channels not in (1, 3):
        raise ContractError(f"cannot write a {image.channels}-channel image as PGM/PPM")
    with open(path, "wb") as f:
        f.write(encode_netpbm(image))
