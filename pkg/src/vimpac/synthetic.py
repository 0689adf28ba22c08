"""Procedural videos for tests, demos and the overfit / locality checks."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .tokens import TokenGrid, ToyQuantizerConfig, VideoTokenStore, Vocabulary, quantize_video


def procedural_frames(rng, frames, height, width):
    """Uint8 ``(frames, height, width, 3)`` raster: a drifting colour gradient
    with a moving disc, all parameters drawn from ``rng``."""
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    base = rng.uniform(0, 255, 3)
    slope = rng.uniform(-200, 200, (2, 3))
    disc_col = rng.uniform(0, 255, 3)
    cy, cx = rng.uniform(0.2, 0.8, 2)
    vy, vx = rng.uniform(-0.1, 0.1, 2)
    radius = rng.uniform(0.15, 0.35)
    out = np.empty((frames, height, width, 3))
    for t in range(frames):
        img = base + yy[..., None] * slope[0] + xx[..., None] * slope[1]
        inside = (yy - (cy + vy * t)) ** 2 + (xx - (cx + vx * t)) ** 2 < radius ** 2
        img[inside] = disc_col
        out[t] = img
    return np.clip(out, 0, 255).astype(np.uint8)


def procedural_store(n_videos, frames, frame_size, quantizer=ToyQuantizerConfig(patch=8, vq_size=64), seed=0,
                     fps=Fraction(2)):
    """Quantize ``n_videos`` procedural videos into a token store."""
    rng = np.random.default_rng(seed)
    h, w = (frame_size, frame_size) if np.isscalar(frame_size) else frame_size
    videos = []
    for k in range(n_videos):
        grid = quantize_video(procedural_frames(rng, frames, h, w), quantizer)
        videos.append((f"video{k:03d}", Fraction(fps), grid))
    return VideoTokenStore(Vocabulary(quantizer.vq_size), tuple(videos))


def smooth_token_grid(rng, dims, vq_size=64, levels=6, scale=None):
    """Token field of a few large regions that drift slowly over time.

    Ids come from thresholding a low-frequency random wave sum into
    ``levels`` bands, each band mapped to a random content id.
    """
    t_len, h, w = dims
    scale = scale if scale is not None else max(h, w) / 1.5
    tt, ii, jj = np.meshgrid(np.arange(t_len), np.arange(h), np.arange(w), indexing="ij")
    field = np.zeros(dims)
    for _ in range(3):
        ky, kx = rng.normal(0, 1.0 / scale, 2)
        omega = rng.normal(0, 0.05)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.cos(ky * ii + kx * jj + omega * tt + phase)
    edges = np.quantile(field, np.linspace(0, 1, levels + 1)[1:-1])
    band = np.searchsorted(edges, field)
    ids = rng.choice(vq_size, size=levels, replace=False)
    return TokenGrid(ids[band])


def smooth_store(n_videos, dims, vq_size=64, seed=0, fps=Fraction(2)):
    rng = np.random.default_rng(seed)
    videos = [(f"smooth{k:03d}", Fraction(fps), smooth_token_grid(rng, dims, vq_size)) for k in range(n_videos)]
    return VideoTokenStore(Vocabulary(vq_size), tuple(videos))
