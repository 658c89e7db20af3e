"""Seeded synthetic YUV sources for desk-scale experiments.

Frames mix smooth gradients, a few low-frequency sinusoids, flat rectangles,
and mild sensor-like noise; compressible structure with enough variety that
rate-distortion training has something to learn.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .frames import Yuv420Frame


def _textured_plane(rng, h, w, base, spread, waves, noise):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    p = np.full((h, w), base + rng.uniform(-spread, spread))
    p += rng.uniform(-spread, spread) * (xx / max(w - 1, 1))
    p += rng.uniform(-spread, spread) * (yy / max(h - 1, 1))
    for _ in range(waves):
        fx, fy = rng.uniform(0.3, 3.0, 2)
        amp = rng.uniform(4, spread)
        phase = rng.uniform(0, 2 * np.pi)
        p += amp * np.sin(2 * np.pi * (fx * xx / w + fy * yy / h) + phase)
    for _ in range(rng.integers(1, 4)):
        rh = int(rng.integers(h // 8 + 1, max(h // 2, h // 8 + 2)))
        rw = int(rng.integers(w // 8 + 1, max(w // 2, w // 8 + 2)))
        r0 = int(rng.integers(0, h - rh + 1))
        c0 = int(rng.integers(0, w - rw + 1))
        p[r0:r0 + rh, c0:c0 + rw] += rng.uniform(-spread, spread)
    if noise:
        p += rng.normal(0, noise, (h, w))
    return np.clip(p, 0, 255).astype(np.uint8)


def synthetic_frames(count: int, width: int, height: int, seed: int = 0):
    """Deterministic list of frames; same arguments give identical bytes."""
    if width % 2 or height % 2 or width <= 0 or height <= 0:
        raise ShapeError(f"frame dims must be positive and even, got {width}x{height}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        y = _textured_plane(rng, height, width, 120, 60, waves=4, noise=1.5)
        u = _textured_plane(rng, height // 2, width // 2, 128, 24, waves=2, noise=0.7)
        v = _textured_plane(rng, height // 2, width // 2, 128, 24, waves=2, noise=0.7)
        out.append(Yuv420Frame(y, u, v))
    return out
