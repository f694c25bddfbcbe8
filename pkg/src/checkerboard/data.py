"""Deterministic synthetic training images and patch sampling."""

import os

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .imageio import read_image


def _gradient(rng, size):
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp -= ramp.min()
    return ramp / max(ramp.max(), 1e-6)


def _blurred_noise(rng, size):
    sigma = rng.uniform(1.0, 6.0)
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    field -= field.min()
    return field / max(field.max(), 1e-6)


def _edges(rng, size):
    img = np.full((size, size), rng.uniform())
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(1, 4)):
        angle = rng.uniform(0, np.pi)
        offset = rng.uniform(-0.5, 0.5) * size
        side = (xx - size / 2) * np.cos(angle) + (yy - size / 2) * np.sin(angle) > offset
        img = np.where(side, rng.uniform(), img)
    return img


def synthetic_image(rng, size=64, channels=1):
    """One (C, size, size) image mixing gradients, blurred noise and step edges."""
    planes = []
    base = [_gradient(rng, size), _blurred_noise(rng, size), _edges(rng, size)]
    for _ in range(channels):
        w = rng.dirichlet(np.ones(3))
        img = sum(wi * b for wi, b in zip(w, base))
        img = img + rng.normal(0, 0.01, img.shape)
        planes.append(img)
        # colour planes share structure but differ in mixture weights
        base = [np.roll(b, rng.integers(0, 3), axis=rng.integers(0, 2)) for b in base]
    return np.clip(np.stack(planes), 0, 1).astype(np.float32)


def synthetic_corpus(n, size=64, channels=1, seed=0):
    """``n`` images, shape (n, C, size, size); identical for identical arguments."""
    rng = np.random.default_rng(seed)
    return np.stack([synthetic_image(rng, size, channels) for _ in range(n)])


def load_directory(path, channels=1):
    """All PGM/PPM files under ``path`` as a list of (C, H, W) float arrays."""
    images = []
    for name in sorted(os.listdir(path)):
        if name.lower().endswith((".pgm", ".ppm")):
            img = read_image(os.path.join(path, name))
            if img.channels != channels:
                continue
            images.append(img.to_float())
    if not images:
        raise ContractError(f"no {channels}-channel PGM/PPM images in {path}")
    return images


def sample_batch(images, batch, patch, rng):
    """Random ``patch`` x ``patch`` crops with random flips, shape (batch, C, patch, patch)."""
    out = []
    for _ in range(batch):
        img = images[rng.integers(len(images))]
        _, h, w = img.shape
        if h < patch or w < patch:
            raise ContractError(f"image {h}x{w} is smaller than patch {patch}")
        r = rng.integers(0, h - patch + 1)
        c = rng.integers(0, w - patch + 1)
        crop = img[:, r : r + patch, c : c + patch]
        if rng.integers(2):
            crop = crop[:, :, ::-1]
        out.append(crop)
    return np.ascontiguousarray(np.stack(out), dtype=np.float32)
