"""Checkerboard partitioning, context masks and the MUX/DEMUX family.

Parity convention: a latent at (row, col) is an *anchor* iff
``(row + col) % 2 == ANCHOR_PARITY`` (0 here).  Anchors are coded from the
hyperprior alone; non-anchors additionally see their decoded anchor
neighbours through a checkerboard-masked convolution.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, concat, conv2d, where

ANCHOR_PARITY = 0

MASK_KINDS = ("serial", "checkerboard", "single_ref", "random", "zero", "all_neighbors3")

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """Seeded 64-bit generator used for random context masks."""

    def __init__(self, seed):
        self.state = int(seed) & _MASK64

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)


def anchor_mask(height, width, parity=ANCHOR_PARITY):
    """Boolean (H, W) array that is True on anchor positions."""
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    return (rows + cols) % 2 == parity


def anchor_count(height, width):
    return int(anchor_mask(height, width).sum())


@dataclass(frozen=True)
class Mask:
    """A k x k binary context pattern; the centre bit is always zero."""

    kind: str
    bits: np.ndarray = field(repr=False)
    offset: tuple = None
    seed: int = None

    @property
    def size(self):
        return self.bits.shape[0]

    @property
    def k_ref(self):
        return int(self.bits.sum())

    def padded(self, size):
        """Embed the pattern at the centre of a larger odd window."""
        if size < self.size or size % 2 == 0:
            raise ContractError(f"cannot pad a {self.size}x{self.size} mask to {size}")
        out = np.zeros((size, size), dtype=self.bits.dtype)
        m = (size - self.size) // 2
        out[m : m + self.size, m : m + self.size] = self.bits
        return Mask(self.kind, out, self.offset, self.seed)

    def describe(self):
        if self.kind == "single_ref":
            return f"single_ref({self.offset[0]},{self.offset[1]}) {self.size}x{self.size}"
        if self.kind == "random":
            return f"random(seed={self.seed}) {self.size}x{self.size}"
        return f"{self.kind} {self.size}x{self.size}"


def make_mask(kind, k, seed=None, offset=None):
    """Build a context mask.

    Args:
        kind: one of ``MASK_KINDS``.
        k: odd window size.
        seed: required for ``random``; each non-centre bit is set with
            probability 1/2 from a SplitMix64 stream.
        offset: ``(dy, dx)`` relative to the centre, required for ``single_ref``.
    """
    if k < 1 or k % 2 == 0:
        raise ContractError(f"mask size must be odd, got {k}")
    c = k // 2
    dy, dx = np.meshgrid(np.arange(k) - c, np.arange(k) - c, indexing="ij")
    if kind == "serial":
        bits = (dy < 0) | ((dy == 0) & (dx < 0))
    elif kind == "checkerboard":
        bits = (dy + dx) % 2 == 1
    elif kind == "zero":
        bits = np.zeros((k, k), dtype=bool)
    elif kind == "all_neighbors3":
        bits = (np.abs(dy) <= 1) & (np.abs(dx) <= 1)
    elif kind == "single_ref":
        if offset is None:
            raise ContractError("single_ref masks need an offset (dy, dx)")
        oy, ox = offset
        if (oy, ox) == (0, 0) or abs(oy) > c or abs(ox) > c:
            raise ContractError(f"offset {offset} is not a non-centre position of a {k}x{k} window")
        bits = (dy == oy) & (dx == ox)
        offset = (int(oy), int(ox))
    elif kind == "random":
        if seed is None:
            raise ContractError("random masks need a seed")
        gen = SplitMix64(seed)
        word, left = 0, 0
        flat = np.zeros(k * k, dtype=bool)
        for i in range(k * k):
            if left == 0:
                word, left = gen.next(), 64
            flat[i] = word & 1
            word >>= 1
            left -= 1
        bits = flat.reshape(k, k)
    else:
        raise ContractError(f"unknown mask kind {kind!r}")
    bits = np.array(bits, dtype=np.float32)
    bits[c, c] = 0.0
    return Mask(kind, bits, offset if kind == "single_ref" else None, seed if kind == "random" else None)


def masked_conv2d(x, weight, mask, bias=None):
    """Same-size convolution with effective weight ``mask * weight``."""
    bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask, dtype=np.float32)
    k = weight.shape[-1]
    if bits.shape != (k, k):
        raise ContractError(f"mask is {bits.shape[0]}x{bits.shape[1]} but kernel is {k}x{k}")
    effective = weight * bits.astype(weight.data.dtype)
    return conv2d(x, effective, bias, stride=1, padding=k // 2)


def _check_pair(a, b, what):
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _to_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def mux(alpha, beta, parity=ANCHOR_PARITY):
    """Take ``alpha`` at anchor positions and ``beta`` elsewhere."""
    alpha, beta = _to_tensor(alpha), _to_tensor(beta)
    _check_pair(alpha, beta, "mux")
    h, w = alpha.shape[-2:]
    return where(anchor_mask(h, w, parity), alpha, beta)


def make_b_half(bias, height, width, parity=ANCHOR_PARITY):
    """(1, C, H, W) map carrying ``bias`` at anchors and zero elsewhere."""
    if height < 1 or width < 1:
        raise ContractError(f"grid must be non-empty, got {height}x{width}")
    b = np.asarray(bias.data if isinstance(bias, Tensor) else bias, dtype=np.float32)
    b_map = np.broadcast_to(b[None, :, None, None], (1, b.size, height, width))
    return np.where(anchor_mask(height, width, parity), b_map, np.float32(0)).astype(b.dtype)


def _require_even(x, what):
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ContractError(f"{what} needs even spatial dims, got {h}x{w}")


def space_to_depth(x, block=2):
    """(B, C, H, W) -> (B, C*b*b, H/b, W/b); channel ``c*b*b + dy*b + dx``."""
    x = _to_tensor(x)
    b, c, h, w = x.shape
    if h % block or w % block:
        raise ContractError(f"space_to_depth needs dims divisible by {block}, got {h}x{w}")
    y = x.reshape(b, c, h // block, block, w // block, block)
    y = y.transpose(0, 1, 3, 5, 2, 4)
    return y.reshape(b, c * block * block, h // block, w // block)


def depth_to_space(x, block=2):
    x = _to_tensor(x)
    b, c, h, w = x.shape
    if c % (block * block):
        raise DimensionError(f"channel count {c} is not divisible by {block * block}")
    c_out = c // (block * block)
    y = x.reshape(b, c_out, block, block, h, w)
    y = y.transpose(0, 1, 4, 2, 5, 3)
    return y.reshape(b, c_out, h * block, w * block)


def demux(x, parity=ANCHOR_PARITY):
    """Split a latent map into dense anchor and non-anchor chunks.

    Each chunk has shape (B, C, H/2, W): row ``i`` holds the anchors (or
    non-anchors) of rows ``2i`` and ``2i + 1`` in raster order.
    """
    x = _to_tensor(x)
    _require_even(x, "demux")
    b, c, h, w = x.shape
    s2d = space_to_depth(x).reshape(b, c, 4, h // 2, w // 2)
    a_ph, n_ph = ((0, 3), (1, 2)) if parity == 0 else ((1, 2), (0, 3))
    anchors = concat([s2d[:, :, a_ph[0]], s2d[:, :, a_ph[1]]], axis=-1)
    others = concat([s2d[:, :, n_ph[0]], s2d[:, :, n_ph[1]]], axis=-1)
    return anchors, others


def merge(anchors, non_anchors, parity=ANCHOR_PARITY):
    """Inverse of :func:`demux`."""
    anchors, non_anchors = _to_tensor(anchors), _to_tensor(non_anchors)
    _check_pair(anchors, non_anchors, "merge")
    b, c, hh, w = anchors.shape
    if w % 2:
        raise ContractError(f"chunk width must be even, got {w}")
    half = w // 2
    a_ph, n_ph = ((0, 3), (1, 2)) if parity == 0 else ((1, 2), (0, 3))
    phases = [None] * 4
    phases[a_ph[0]] = anchors[..., :half]
    phases[a_ph[1]] = anchors[..., half:]
    phases[n_ph[0]] = non_anchors[..., :half]
    phases[n_ph[1]] = non_anchors[..., half:]
    stacked = concat([p.reshape(b, c, 1, hh, half) for p in phases], axis=2)
    return depth_to_space(stacked.reshape(b, c * 4, hh, half))
