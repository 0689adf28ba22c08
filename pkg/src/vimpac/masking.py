"""Block and i.i.d. mask samplers, ratio calibration, mask application and
nearest-visible-neighbour filling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tokens import TokenGrid, Vocabulary

STRATEGIES = ("block", "iid")
# "calibrated" draws the temporal length from [1, ceil(2t/3)) and reproduces the
# published induced-ratio table; "inclusive" draws from [1, ceil(2t/3)].
LENGTH_RULES = ("calibrated", "inclusive")


def make_rng(seed):
    """Counter-based generator; ``seed`` may be an int or a SeedSequence."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class MaskBlock:
    t_lo: int
    t_hi: int
    h_lo: int
    h_hi: int
    w_lo: int
    w_hi: int

    @property
    def lengths(self):
        return (self.t_hi - self.t_lo + 1, self.h_hi - self.h_lo + 1, self.w_hi - self.w_lo + 1)

    def within(self, dims):
        caps = max_block_lengths(dims)
        bounds = ((self.t_lo, self.t_hi), (self.h_lo, self.h_hi), (self.w_lo, self.w_hi))
        return all(0 <= lo <= hi < d for (lo, hi), d in zip(bounds, dims)) and all(
            n <= c for n, c in zip(self.lengths, caps)
        )

    def to_array(self, dims):
        out = np.zeros(dims, dtype=bool)
        out[self.t_lo:self.t_hi + 1, self.h_lo:self.h_hi + 1, self.w_lo:self.w_hi + 1] = True
        return out


@dataclass(frozen=True, eq=False)
class MaskSet:
    """Masked positions stored as a boolean ``(t, h, w)`` array."""

    array: np.ndarray

    def __post_init__(self):
        arr = np.array(self.array, dtype=bool, copy=True)
        if arr.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "array", arr)

    @classmethod
    def from_positions(cls, dims, positions):
        arr = np.zeros(dims, dtype=bool)
        for t, i, j in positions:
            arr[t, i, j] = True
        return cls(arr)

    @property
    def dims(self):
        return tuple(int(d) for d in self.array.shape)

    @property
    def positions(self):
        return {tuple(int(x) for x in p) for p in np.argwhere(self.array)}

    def __len__(self):
        return int(self.array.sum())

    @property
    def ratio(self):
        return float(self.array.mean())

    def __eq__(self, other):
        if not isinstance(other, MaskSet):
            return NotImplemented
        return self.dims == other.dims and bool(np.array_equal(self.array, other.array))


@dataclass(frozen=True)
class MaskingConfig:
    strategy: str = "block"
    num_blocks: int = 5
    xi: float = 0.15
    seed: int = 0
    length_rule: str = "calibrated"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown masking strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.length_rule not in LENGTH_RULES:
            raise ValueError(f"unknown length rule {self.length_rule!r}; expected one of {LENGTH_RULES}")
        if self.strategy == "block" and self.num_blocks < 1:
            raise ValueError(f"num_blocks must be positive, got {self.num_blocks}")
        if self.strategy == "iid" and not 0.0 <= self.xi <= 1.0:
            raise ValueError(f"xi must lie in [0, 1], got {self.xi}")


def _check_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be three positive integers, got {dims}")
    return dims


def max_block_lengths(dims):
    """Hard caps per axis: ceil(2t/3) frames and half of each spatial side."""
    t, h, w = _check_dims(dims)
    return (max(1, math.ceil(2 * t / 3)), max(1, h // 2), max(1, w // 2))


def sampled_length_bounds(dims, length_rule="calibrated"):
    """Largest length the sampler draws per axis (lengths start at 1)."""
    cap_t, cap_h, cap_w = max_block_lengths(dims)
    if length_rule == "calibrated":
        cap_t = max(1, cap_t - 1)
    elif length_rule != "inclusive":
        raise ValueError(f"unknown length rule {length_rule!r}")
    return cap_t, cap_h, cap_w


def sample_block(dims, rng, length_rule="calibrated"):
    """Per axis: length uniform in ``1..bound``, then start uniform in ``0..dim-length``."""
    dims = _check_dims(dims)
    bounds = sampled_length_bounds(dims, length_rule)
    lo_hi = []
    for d, b in zip(dims, bounds):
        n = int(rng.integers(1, b + 1))
        s = int(rng.integers(0, d - n + 1))
        lo_hi += [s, s + n - 1]
    return MaskBlock(*lo_hi)


def sample_mask(dims, cfg: MaskingConfig, rng=None):
    """Union of ``cfg.num_blocks`` blocks, or i.i.d. Bernoulli(``cfg.xi``) cells."""
    dims = _check_dims(dims)
    if rng is None:
        rng = make_rng(cfg.seed)
    if cfg.strategy == "iid":
        return MaskSet(rng.random(dims) < cfg.xi)
    out = np.zeros(dims, dtype=bool)
    for _ in range(cfg.num_blocks):
        b = sample_block(dims, rng, cfg.length_rule)
        out[b.t_lo:b.t_hi + 1, b.h_lo:b.h_hi + 1, b.w_lo:b.w_hi + 1] = True
    return MaskSet(out)


def _axis_intervals(rng, n, dim, bound):
    lengths = rng.integers(1, bound + 1, size=n)
    starts = rng.integers(0, dim - lengths + 1)
    idx = np.arange(dim)
    return (idx >= starts[:, None]) & (idx < (starts + lengths)[:, None])


def sample_mask_arrays(dims, cfg: MaskingConfig, n, rng):
    """``n`` independent masks as an ``(n, t, h, w)`` boolean array."""
    dims = _check_dims(dims)
    if cfg.strategy == "iid":
        return rng.random((n,) + dims) < cfg.xi
    bt, bh, bw = sampled_length_bounds(dims, cfg.length_rule)
    out = np.zeros((n,) + dims, dtype=bool)
    for _ in range(cfg.num_blocks):
        mt = _axis_intervals(rng, n, dims[0], bt)
        mh = _axis_intervals(rng, n, dims[1], bh)
        mw = _axis_intervals(rng, n, dims[2], bw)
        out |= mt[:, :, None, None] & mh[:, None, :, None] & mw[:, None, None, :]
    return out


def estimate_ratio(dims, cfg: MaskingConfig, samples, rng, chunk=2048):
    """Monte-Carlo mean induced ratio and its standard error."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    dims = _check_dims(dims)
    ratios = np.empty(samples)
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        ratios[done:done + n] = sample_mask_arrays(dims, cfg, n, rng).mean(axis=(1, 2, 3))
        done += n
    mean = float(ratios.mean())
    se = float(ratios.std(ddof=1) / math.sqrt(samples)) if samples > 1 else float("nan")
    return mean, se


def calibration_table(dims, counts, samples, rng, length_rule="calibrated"):
    rows = []
    for k in counts:
        mean, se = estimate_ratio(dims, MaskingConfig("block", num_blocks=k, length_rule=length_rule), samples, rng)
        rows.append((k, mean, se))
    return rows


def choose_num_blocks(dims, target_ratio=0.15, samples=2000, rng=None, max_blocks=512, length_rule="calibrated"):
    """Block count whose Monte-Carlo induced ratio is nearest ``target_ratio``.

    Counts are scanned upward until the mean passes the target (the induced
    ratio is non-decreasing in the count) or saturates at 1.
    """
    if not 0.0 < target_ratio < 1.0:
        raise ValueError(f"target_ratio must lie in (0, 1), got {target_ratio}")
    if rng is None:
        rng = make_rng(0)
    best_k, best_gap = 1, math.inf
    for k in range(1, max_blocks + 1):
        mean, _ = estimate_ratio(dims, MaskingConfig("block", num_blocks=k, length_rule=length_rule), samples, rng)
        gap = abs(mean - target_ratio)
        if gap < best_gap:
            best_k, best_gap = k, gap
        if mean > target_ratio or mean >= 1.0:
            break
    return best_k


def apply_mask(grid: TokenGrid, mask: MaskSet, vocab: Vocabulary):
    """Replace masked cells by MASK; PAD cells are dropped from the mask first.

    Returns the masked grid and a ``{(t, i, j): original id}`` map.
    """
    if mask.dims != grid.dims:
        raise ValueError(f"mask dims {mask.dims} do not match grid dims {grid.dims}")
    keep = effective_mask(grid, mask, vocab)
    masked = np.where(keep, vocab.mask_id, grid.tokens)
    targets = {tuple(int(x) for x in p): int(grid.tokens[tuple(p)]) for p in np.argwhere(keep)}
    return TokenGrid(masked), targets


def effective_mask(grid: TokenGrid, mask: MaskSet, vocab: Vocabulary):
    return mask.array & (grid.tokens != vocab.pad_id)


def restore(masked_grid: TokenGrid, targets):
    arr = np.array(masked_grid.tokens)
    for pos, tok in targets.items():
        arr[pos] = tok
    return TokenGrid(arr)


METRICS = ("spatial", "spatiotemporal")


def neighbor_fill(masked_grid: TokenGrid, mask: MaskSet, metric="spatiotemporal", pad_id=None):
    """Copy into every masked cell the token of its nearest visible cell.

    Visible cells are those outside ``mask`` (and not PAD when ``pad_id`` is
    given). Distances are Euclidean on ``(i, j)`` within the frame for
    ``spatial`` (falling back to ``(t, i, j)`` when the frame has no visible
    cell) or on ``(t, i, j)`` for ``spatiotemporal``. Ties go to the
    lexicographically smallest ``(t, i, j)``.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    if mask.dims != masked_grid.dims:
        raise ValueError(f"mask dims {mask.dims} do not match grid dims {masked_grid.dims}")
    tokens = masked_grid.tokens
    visible = ~mask.array
    if pad_id is not None:
        visible &= tokens != pad_id
    src = np.argwhere(visible)  # C order == lexicographic (t, i, j)
    if len(src) == 0:
        raise ValueError("cannot fill: no visible cell in the grid")
    dst = np.argwhere(mask.array)
    out = np.array(tokens)
    if len(dst) == 0:
        return TokenGrid(out)
    src_tok = tokens[tuple(src.T)]

    def nearest(points, cand, cand_tok, axes):
        d2 = ((points[:, None, axes] - cand[None, :, axes]) ** 2).sum(axis=-1)
        return cand_tok[np.argmin(d2, axis=1)]  # argmin keeps the first (lexicographic) tie

    if metric == "spatiotemporal":
        out[tuple(dst.T)] = nearest(dst, src, src_tok, [0, 1, 2])
        return TokenGrid(out)
    for t in np.unique(dst[:, 0]):
        rows = dst[dst[:, 0] == t]
        in_frame = src[:, 0] == t
        if in_frame.any():
            vals = nearest(rows, src[in_frame], src_tok[in_frame], [1, 2])
        else:
            vals = nearest(rows, src, src_tok, [0, 1, 2])
        out[tuple(rows.T)] = vals
    return TokenGrid(out)


def fill_match_rate(filled: TokenGrid, original: TokenGrid, mask: MaskSet):
    """Fraction of masked positions whose filled token equals the original (1.0 if none)."""
    if filled.dims != original.dims or mask.dims != original.dims:
        raise ValueError(f"dims differ: {filled.dims}, {original.dims}, {mask.dims}")
    n = int(mask.array.sum())
    if n == 0:
        return 1.0
    return float((filled.tokens[mask.array] == original.tokens[mask.array]).mean())
