"""Synthetic textures and splice fixtures for desk-scale experiments."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .jpeg_sim import compress


def texture(rng, size=200):
    """An 8-bit natural-looking grayscale texture of shape (size, size).

    Power-law (1/f) noise for the scene-like background, a handful of flat
    shapes for edges, and mild sensor-like noise.
    """
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    f = np.sqrt(fx * fx + fy * fy)
    f[0, 0] = 1.0
    beta = rng.uniform(1.4, 2.2)
    spectrum = (rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size)))
    spectrum /= f ** beta
    spectrum[0, 0] = 0
    field = np.real(np.fft.ifft2(spectrum))
    field = (field - field.mean()) / (field.std() + 1e-12)
    img = 128.0 + rng.uniform(25, 45) * field

    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(3, 8))):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(size * 0.05, size * 0.25, 2)
        level = rng.uniform(-60, 60)
        if rng.random() < 0.5:
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        else:
            inside = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        img[inside] += level
    # fine-grained detail so that quantization has something to remove
    img += rng.normal(0, rng.uniform(2, 6), (size, size))
    return np.clip(np.round(img), 0, 255)


@dataclass
class SpliceFixture:
    source: np.ndarray
    pristine: np.ndarray
    fake: np.ndarray
    mask: np.ndarray
    host_class: str
    splice_class: str


def random_rectangle(rng, shape, min_area=0.10, max_area=0.40):
    h, w = shape
    area = rng.uniform(min_area, max_area) * h * w
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    rh = int(np.clip(round(np.sqrt(area * aspect)), 8, h - 1))
    rw = int(np.clip(round(area / rh), 8, w - 1))
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    return top, left, rh, rw


def make_splice(source, host_table, splice_table, rng):
    """Paste a rectangle re-cut from a differently compressed copy of `source`."""
    pristine = compress(source, host_table)
    donor = compress(source, splice_table)
    top, left, rh, rw = random_rectangle(rng, source.shape)
    mask = np.zeros(source.shape, dtype=np.uint8)
    mask[top:top + rh, left:left + rw] = 1
    fake = np.where(mask == 1, donor, pristine)
    return SpliceFixture(source, pristine, fake, mask, host_table.label, splice_table.label)


def make_fixture_set(n, registry, rng, size=256):
    """`n` splice fixtures; host and splice classes are distinct registry draws."""
    out = []
    for _ in range(n):
        src = texture(rng, size)
        a = int(rng.integers(len(registry)))
        b = int(rng.integers(len(registry) - 1))
        b += b >= a
        out.append(make_splice(src, registry[a], registry[b], rng))
    return out
