"""Frame loading for the quantizer and PGM rendering of token maps."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

FRAME_SUFFIXES = (".ppm", ".pnm", ".png", ".bmp")


def read_frame(path):
    """An RGB image file as a uint8 ``(H, W, 3)`` array."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def write_frame(path, frame):
    Image.fromarray(np.asarray(frame, dtype=np.uint8), "RGB").save(path, format="PPM")


def _frame_files(directory):
    return sorted(f for f in os.listdir(directory) if f.lower().endswith(FRAME_SUFFIXES))


def read_video_dir(directory):
    files = _frame_files(directory)
    frames = [read_frame(os.path.join(directory, f)) for f in files]
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise ValueError(f"{directory}: frames have differing shapes {sorted(shapes)}")
    return np.stack(frames) if frames else np.zeros((0, 0, 0, 3), np.uint8)


def read_videos(source):
    """``[(video_id, frames)]`` from a directory or a ``.npy`` array.

    A directory holding frame files is one video named after it; otherwise
    each sub-directory is one video. A ``.npy`` file holds either one
    ``(T, H, W, 3)`` video or a ``(V, T, H, W, 3)`` stack.
    """
    if os.path.isdir(source):
        if _frame_files(source):
            return [(os.path.basename(os.path.normpath(source)), read_video_dir(source))]
        subdirs = sorted(d for d in os.listdir(source) if os.path.isdir(os.path.join(source, d)))
        return [(d, read_video_dir(os.path.join(source, d))) for d in subdirs]
    arr = np.load(source, allow_pickle=False)
    if arr.dtype != np.uint8:
        raise ValueError(f"{source}: expected uint8 frames, got {arr.dtype}")
    if arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5 or arr.shape[-1] != 3:
        raise ValueError(f"{source}: expected (T, H, W, 3) or (V, T, H, W, 3), got {arr.shape}")
    stem = os.path.splitext(os.path.basename(source))[0]
    return [(f"{stem}{k:03d}" if len(arr) > 1 else stem, arr[k]) for k in range(len(arr))]


def token_map_image(tokens, mask=None, max_gray=255):
    """Frames laid side by side: width ``T * W``, height ``H``; gray = id mod 256.

    Cells in ``mask`` are drawn at ``max_gray``.
    """
    tokens = np.asarray(tokens)
    gray = (tokens % 256).astype(np.uint8)
    if mask is not None:
        gray = np.where(mask, max_gray, gray).astype(np.uint8)
    t_len, h, w = gray.shape
    return gray.transpose(1, 0, 2).reshape(h, t_len * w)


def write_pgm(path, image):
    """Binary (P5) 8-bit grayscale."""
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), "L").save(path, format="PPM")


def read_pgm(path):
    with Image.open(path) as img:
        if img.mode != "L":
            raise ValueError(f"{path}: not an 8-bit grayscale image")
        return np.asarray(img, dtype=np.uint8)
