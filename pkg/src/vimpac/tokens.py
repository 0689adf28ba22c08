"""Token vocabulary, token grids, the toy frame quantizer and the token store file."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

MAGIC = b"VTK1"


class StoreFormatError(ValueError):
    """Raised when a token store file cannot be decoded."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Vocabulary:
    """Content ids ``[0, vq_size)`` followed by the three special ids."""

    vq_size: int = 8192
    cls_id: int | None = None
    pad_id: int | None = None
    mask_id: int | None = None

    def __post_init__(self):
        if self.vq_size < 1:
            raise ValueError(f"vq_size must be positive, got {self.vq_size}")
        defaults = {"cls_id": 0, "pad_id": 1, "mask_id": 2}
        for name, offset in defaults.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, self.vq_size + offset)
        specials = (self.cls_id, self.pad_id, self.mask_id)
        if len(set(specials)) != 3:
            raise ValueError(f"special ids must be distinct, got {specials}")
        if min(specials) < self.vq_size:
            raise ValueError(f"special ids must be >= vq_size={self.vq_size}, got {specials}")

    @property
    def size(self):
        return max(self.vq_size + 3, self.cls_id + 1, self.pad_id + 1, self.mask_id + 1)

    def is_content(self, ids):
        ids = np.asarray(ids)
        return (ids >= 0) & (ids < self.vq_size)


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """A ``(t, h, w)`` array of token ids. The array is made read-only."""

    tokens: np.ndarray

    def __post_init__(self):
        arr = np.array(self.tokens, dtype=np.int64, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"token grid must be a non-empty 3D array, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "tokens", arr)

    @property
    def dims(self):
        return tuple(int(d) for d in self.tokens.shape)

    t_len = property(lambda self: self.dims[0])
    h_len = property(lambda self: self.dims[1])
    w_len = property(lambda self: self.dims[2])

    def validate(self, vocab: Vocabulary):
        ok = vocab.is_content(self.tokens) | (self.tokens == vocab.pad_id) | (self.tokens == vocab.mask_id)
        if not ok.all():
            bad = tuple(int(i) for i in np.argwhere(~ok)[0])
            raise ValueError(f"token {self.tokens[bad]} at {bad} is not a content, PAD or MASK id")
        return self

    def __eq__(self, other):
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return self.dims == other.dims and bool(np.array_equal(self.tokens, other.tokens))

    def __repr__(self):
        return f"TokenGrid(dims={self.dims})"


@dataclass(frozen=True)
class VideoEntry:
    video_id: str
    fps: Fraction
    grid: TokenGrid


@dataclass(frozen=True)
class VideoTokenStore:
    """Ordered collection of tokenized videos sharing one spatial token-map size."""

    vocab: Vocabulary = field(default_factory=Vocabulary)
    videos: tuple = ()

    def __post_init__(self):
        videos = tuple(
            v if isinstance(v, VideoEntry) else VideoEntry(v[0], Fraction(v[1]), v[2]) for v in self.videos
        )
        ids = [v.video_id for v in videos]
        if len(set(ids)) != len(ids):
            raise ValueError("video ids must be unique within a store")
        spatial = {(v.grid.h_len, v.grid.w_len) for v in videos}
        if len(spatial) > 1:
            raise ValueError(f"all grids in a store must share h_len and w_len, got {sorted(spatial)}")
        for v in videos:
            if v.fps <= 0:
                raise ValueError(f"fps must be positive for video {v.video_id!r}")
            v.grid.validate(self.vocab)
        object.__setattr__(self, "videos", videos)

    def __len__(self):
        return len(self.videos)

    def __getitem__(self, index):
        return self.videos[index]

    def index_of(self, video_id):
        for k, v in enumerate(self.videos):
            if v.video_id == video_id:
                return k
        raise KeyError(video_id)


@dataclass(frozen=True)
class ToyQuantizerConfig:
    patch: int = 8
    vq_size: int = 8192
    seed: int = 0

    @property
    def bits_per_channel(self):
        bits = int(np.floor(np.log2(self.vq_size))) // 3
        if bits < 1:
            raise ValueError(f"vq_size={self.vq_size} too small for the toy quantizer (need >= 8)")
        return bits


def quantize_frame(frame, cfg: ToyQuantizerConfig = ToyQuantizerConfig()):
    """Map an ``H x W x 3`` byte raster to an ``H/patch x W/patch`` token map.

    Each cell bins its patch's mean colour per channel into ``2**bits`` levels and
    packs the levels as ``r << 2*bits | g << bits | b``. ``cfg.seed`` is carried for
    provenance only; the binning needs no codebook.
    """
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"frame must be H x W x 3, got shape {frame.shape}")
    h, w, _ = frame.shape
    p = cfg.patch
    if h % p or w % p:
        raise ValueError(f"frame size {h}x{w} is not divisible by patch={p}")
    bits = cfg.bits_per_channel
    levels = 1 << bits
    means = frame.astype(np.float64).reshape(h // p, p, w // p, p, 3).mean(axis=(1, 3))
    q = np.minimum((means * levels / 256.0).astype(np.int64), levels - 1)
    return (q[..., 0] << (2 * bits)) | (q[..., 1] << bits) | q[..., 2]


def dequantize_map(token_map, cfg: ToyQuantizerConfig = ToyQuantizerConfig()):
    """Inverse of the binning for visualisation: one bin-centre colour per token."""
    bits = cfg.bits_per_channel
    levels = 1 << bits
    ids = np.asarray(token_map, dtype=np.int64)
    mask = levels - 1
    q = np.stack([(ids >> (2 * bits)) & mask, (ids >> bits) & mask, ids & mask], axis=-1)
    rgb = ((q + 0.5) * 256.0 / levels).astype(np.uint8)
    return np.repeat(np.repeat(rgb, cfg.patch, axis=0), cfg.patch, axis=1)


def quantize_video(frames, cfg: ToyQuantizerConfig = ToyQuantizerConfig()):
    return TokenGrid(np.stack([quantize_frame(f, cfg) for f in frames]))


def slice_clip(store: VideoTokenStore, video_index: int, start_t: int, clip_len: int):
    """Frames ``[start_t, start_t + clip_len)``; frames past the end are all PAD."""
    if not 0 <= video_index < len(store):
        raise IndexError(f"video_index {video_index} out of range for store of {len(store)} videos")
    return slice_grid(store[video_index].grid, start_t, clip_len, store.vocab.pad_id)


def slice_grid(grid: TokenGrid, start_t: int, clip_len: int, pad_id: int):
    if start_t < 0 or clip_len < 1:
        raise ValueError(f"need start_t >= 0 and clip_len >= 1, got {start_t}, {clip_len}")
    _, h, w = grid.dims
    out = np.full((clip_len, h, w), pad_id, dtype=np.int64)
    avail = grid.tokens[start_t:start_t + clip_len]
    out[: len(avail)] = avail
    return TokenGrid(out)


def save_store(store: VideoTokenStore, path):
    Path(path).write_bytes(encode_store(store))


def encode_store(store: VideoTokenStore):
    parts = [MAGIC, struct.pack("<II", store.vocab.vq_size, len(store))]
    if store.vocab.size > 0xFFFF:
        raise ValueError("token ids do not fit the 16-bit store format")
    for v in store.videos:
        name = v.video_id.encode("utf-8")
        t, h, w = v.grid.dims
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<IIIII", v.fps.numerator, v.fps.denominator, t, h, w))
        parts.append(v.grid.tokens.astype("<u2").tobytes())
    return b"".join(parts)


def load_store(path):
    return decode_store(Path(path).read_bytes())


def decode_store(data: bytes):
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise StoreFormatError(f"truncated file while reading {what}", pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise StoreFormatError("bad magic, expected b'VTK1'", 0)
    vq_size, count = struct.unpack("<II", take(8, "header"))
    vocab = Vocabulary(vq_size)
    videos = []
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4, "id length"))
        id_offset = pos
        try:
            video_id = take(n, "video id").decode("utf-8")
        except UnicodeDecodeError:
            raise StoreFormatError("video id is not valid UTF-8", id_offset) from None
        num, den, t, h, w = struct.unpack("<IIIII", take(20, "video header"))
        if den == 0 or num == 0:
            raise StoreFormatError("fps must be a positive rational", pos - 20)
        tok_offset = pos
        raw = np.frombuffer(take(2 * t * h * w, "token ids"), dtype="<u2")
        bad = np.flatnonzero((raw >= vocab.size) | (raw == vocab.cls_id))
        if bad.size:
            raise StoreFormatError(f"token id {int(raw[bad[0]])} is not a content, PAD or MASK id",
                                   tok_offset + 2 * int(bad[0]))
        videos.append(VideoEntry(video_id, Fraction(num, den), TokenGrid(raw.reshape(t, h, w))))
    if pos != len(data):
        raise StoreFormatError("trailing bytes after last video", pos)
    try:
        return VideoTokenStore(vocab, tuple(videos))
    except ValueError as exc:
        raise StoreFormatError(str(exc), 0) from None
