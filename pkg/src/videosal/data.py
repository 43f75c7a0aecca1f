"""Synthetic moving-blob clips with gaze densities and fixation points.

Each clip renders bright Gaussian blobs drifting over a textured
background; blob centers move linearly and reflect off the borders.  The
background carries a few static, dimmer Gaussian bumps as distractors:
they are visible in the frames but absent from the gaze density, so the
ground truth depends on what moves, not just on what is bright.  Blob
sizes span a wide range to keep scale handling honest.

The ground-truth density is the normalized Gaussian mixture at the
moving blob centers, and fixations are sampled from it.  Everything is a
pure function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .rng import SplitMix64


@dataclass(frozen=True)
class SyntheticScene:
    n_blobs: int = 2
    sigma_range: tuple = (1.8, 5.0)
    speed_range: tuple = (0.6, 1.5)
    blob_gain: tuple = (0.7, 1.0)
    n_distractors: int = 2
    distractor_gain: tuple = (0.3, 0.5)
    distractor_sigma: tuple = (2.0, 4.0)
    background_level: float = 0.25
    background_amp: float = 0.06
    background_waves: int = 3
    fixations_per_frame: int = 20

    def __post_init__(self):
        if self.n_blobs < 1:
            raise ContractError("scene needs at least one blob")
        if self.sigma_range[0] <= 0 or self.distractor_sigma[0] <= 0:
            raise ContractError("blob sigma must be positive")
        if self.n_distractors < 0 or self.speed_range[0] < 0:
            raise ContractError("distractor count and speeds must be nonnegative")


def _reflect(p: float, lo: float, hi: float) -> float:
    span = hi - lo
    if span <= 0:
        return lo
    q = (p - lo) % (2.0 * span)
    return lo + (2.0 * span - q if q > span else q)


def _span(rng: SplitMix64, lo_hi) -> float:
    lo, hi = lo_hi
    return lo + (hi - lo) * rng.uniform()


def gen_synthetic_clip(scene: SyntheticScene, n_frames: int, h: int, w: int, seed: int):
    """Returns (frames (L,3,H,W) f32 in [0,1], density (L,H,W) f32, fixations).

    ``fixations`` is a per-frame list of (x, y) points sampled from the
    density.  Identical seeds give bit-identical results.
    """
    rng = SplitMix64(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    bg = np.full((h, w), scene.background_level)
    for _ in range(scene.background_waves):
        fx = 0.02 + 0.10 * rng.uniform()
        fy = 0.02 + 0.10 * rng.uniform()
        phase = 2.0 * np.pi * rng.uniform()
        bg += scene.background_amp * np.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase)

    blobs = []
    for _ in range(scene.n_blobs):
        angle = 2.0 * np.pi * rng.uniform()
        speed = _span(rng, scene.speed_range)
        blobs.append({
            "x": 0.1 * w + 0.8 * w * rng.uniform(),
            "y": 0.1 * h + 0.8 * h * rng.uniform(),
            "vx": speed * np.cos(angle),
            "vy": speed * np.sin(angle),
            "sigma": _span(rng, scene.sigma_range),
            "gain": _span(rng, scene.blob_gain),
        })
    # static bumps, part of the background appearance only
    for _ in range(scene.n_distractors):
        cx = 0.1 * w + 0.8 * w * rng.uniform()
        cy = 0.1 * h + 0.8 * h * rng.uniform()
        sigma = _span(rng, scene.distractor_sigma)
        gain = _span(rng, scene.distractor_gain)
        bg += gain * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma ** 2))

    tint = (1.0, 0.85, 0.7)
    frames = np.empty((n_frames, 3, h, w), dtype=np.float32)
    density = np.empty((n_frames, h, w), dtype=np.float32)
    fixations = []
    for t in range(n_frames):
        lum = np.zeros((h, w))
        dens = np.zeros((h, w))
        for bl in blobs:
            cx = _reflect(bl["x"] + t * bl["vx"], 0.0, w - 1.0)
            cy = _reflect(bl["y"] + t * bl["vy"], 0.0, h - 1.0)
            d2 = (xx - cx) ** 2 + (yy - cy) ** 2
            bump = np.exp(-d2 / (2.0 * bl["sigma"] ** 2))
            lum += bl["gain"] * bump
            dens += bump
        dens /= dens.sum()
        density[t] = dens.astype(np.float32)
        for c in range(3):
            frames[t, c] = np.clip(bg + tint[c] * lum, 0.0, 1.0).astype(np.float32)

        cdf = np.cumsum(dens.reshape(-1))
        u = rng.uniform(scene.fixations_per_frame) * cdf[-1]
        cells = np.searchsorted(cdf, u, side="right")
        cells = np.minimum(cells, h * w - 1)
        pts = [(int(c % w), int(c // w)) for c in cells]
        assert all(dens[y, x] > 0 for x, y in pts), "fixation outside density support"
        fixations.append(pts)
    return frames, density, fixations
