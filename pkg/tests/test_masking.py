import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal
from scipy.stats import norm

from vimpac.masking import (
    MaskBlock,
    MaskingConfig,
    MaskSet,
    apply_mask,
    choose_num_blocks,
    estimate_ratio,
    fill_match_rate,
    make_rng,
    max_block_lengths,
    neighbor_fill,
    restore,
    sample_block,
    sample_mask,
    sample_mask_arrays,
    sampled_length_bounds,
)
from vimpac.tokens import TokenGrid, Vocabulary


def axis_coverage(dim, bound):
    """P(cell x is inside a length-uniform, start-uniform interval), by enumeration."""
    cover = np.zeros(dim)
    for n in range(1, bound + 1):
        for s in range(dim - n + 1):
            cover[s:s + n] += 1.0 / bound / (dim - n + 1)
    return cover


def cell_coverage(dims, rule="calibrated"):
    """Exact single-block coverage probability of every cell."""
    bt, bh, bw = sampled_length_bounds(dims, rule)
    ct, ch, cw = (axis_coverage(d, b) for d, b in zip(dims, (bt, bh, bw)))
    return ct[:, None, None] * ch[None, :, None] * cw[None, None, :]


def enumerate_block_ratio(dims, rule="calibrated"):
    """Mean masked fraction of one block, enumerating every (length, start) triple."""
    bounds = sampled_length_bounds(dims, rule)
    total = 0.0
    per_axis = [[(n, s) for n in range(1, b + 1) for s in range(d - n + 1)] for d, b in zip(dims, bounds)]
    for combo in itertools.product(*per_axis):
        p = 1.0
        cells = 1
        for (n, _), d, b in zip(combo, dims, bounds):
            p *= 1.0 / b / (d - n + 1)
            cells *= n
        total += p * cells / np.prod(dims)
    return total


class TestBlockBounds:
    def test_forced_single_cell(self):
        b = sample_block((1, 1, 1), make_rng(0))
        assert b == MaskBlock(0, 0, 0, 0, 0, 0)

    def test_caps_for_5x16x16(self):
        assert max_block_lengths((5, 16, 16)) == (4, 8, 8)

    def test_calibrated_draws_below_temporal_cap(self):
        assert sampled_length_bounds((5, 16, 16)) == (3, 8, 8)
        assert sampled_length_bounds((5, 16, 16), "inclusive") == (4, 8, 8)
        assert sampled_length_bounds((1, 1, 1)) == (1, 1, 1)

    @settings(max_examples=60, deadline=None)
    @given(st.tuples(st.integers(1, 12), st.integers(1, 20), st.integers(1, 20)), st.integers(0, 2**31),
           st.sampled_from(["calibrated", "inclusive"]))
    def test_every_block_within_bounds(self, dims, seed, rule):
        rng = make_rng(seed)
        for _ in range(20):
            b = sample_block(dims, rng, rule)
            assert b.within(dims)
            assert all(n <= c for n, c in zip(b.lengths, sampled_length_bounds(dims, rule)))

    @settings(max_examples=30, deadline=None)
    @given(st.tuples(st.integers(1, 6), st.integers(1, 8), st.integers(1, 8)), st.integers(0, 2**31),
           st.integers(1, 6))
    def test_determinism(self, dims, seed, k):
        cfg = MaskingConfig(num_blocks=k)
        assert sample_mask(dims, cfg, make_rng(seed)) == sample_mask(dims, cfg, make_rng(seed))

    def test_coverage_matches_enumeration_3x4x4(self):
        draws = 100_000
        exact = cell_coverage((3, 4, 4))
        masks = sample_mask_arrays((3, 4, 4), MaskingConfig(num_blocks=1), draws, make_rng(11))
        freq = masks.mean(axis=0)
        se = np.sqrt(exact * (1 - exact) / draws)
        # 3 SE family-wise: the two-sided 3-sigma tail split over all 48 cells
        z = norm.isf(2 * norm.sf(3.0) / 2 / exact.size)
        assert np.all(np.abs(freq - exact) <= z * se)

    def test_scalar_and_vectorised_samplers_agree_in_distribution(self):
        cfg = MaskingConfig(num_blocks=3)
        rng = make_rng(5)
        scalar = np.mean([sample_mask((3, 4, 4), cfg, rng).array for _ in range(4000)], axis=0)
        exact = 1 - (1 - cell_coverage((3, 4, 4))) ** 3
        assert np.all(np.abs(scalar - exact) <= 4 * np.sqrt(exact * (1 - exact) / 4000) + 1e-12)


class TestSampleMask:
    def test_iid_extremes(self):
        assert len(sample_mask((2, 3, 3), MaskingConfig("iid", xi=0.0), make_rng(0))) == 0
        assert len(sample_mask((2, 3, 3), MaskingConfig("iid", xi=1.0), make_rng(0))) == 18

    def test_iid_ratio_concentration(self):
        xi, n, dims = 0.15, 2000, (5, 16, 16)
        masks = sample_mask_arrays(dims, MaskingConfig("iid", xi=xi), n, make_rng(3))
        assert abs(masks.mean() - xi) <= 4 * math.sqrt(xi * (1 - xi) / (n * np.prod(dims)))

    def test_2x2x2_single_block_matches_enumeration(self):
        exact = enumerate_block_ratio((2, 2, 2))
        mean, se = estimate_ratio((2, 2, 2), MaskingConfig(num_blocks=1), 50_000, make_rng(1))
        assert abs(mean - exact) <= 3 * se

    def test_3x4x4_two_blocks_matches_convolution(self):
        p = cell_coverage((3, 4, 4))
        exact = float((1 - (1 - p) ** 2).mean())
        mean, se = estimate_ratio((3, 4, 4), MaskingConfig(num_blocks=2), 50_000, make_rng(2))
        assert abs(mean - exact) <= 3 * se

    def test_enumeration_and_coverage_oracles_agree(self):
        # two independent derivations of the same single-block mean
        for dims in [(2, 2, 2), (3, 4, 4), (5, 6, 4)]:
            assert enumerate_block_ratio(dims) == pytest.approx(cell_coverage(dims).mean(), abs=1e-12)

    def test_union_monotone_in_block_count(self):
        p = cell_coverage((5, 16, 16))
        exact = [float((1 - (1 - p) ** k).mean()) for k in range(1, 9)]
        assert all(a < b for a, b in zip(exact, exact[1:]))
        est = [estimate_ratio((5, 16, 16), MaskingConfig(num_blocks=k), 3000, make_rng(k))[0] for k in (2, 5, 8)]
        assert est[0] < est[1] < est[2]

    def test_5x16x16_five_blocks(self):
        mean, _ = estimate_ratio((5, 16, 16), MaskingConfig(num_blocks=5), 5000, make_rng(0))
        assert abs(mean - 0.145) < 0.02

    def test_estimate_ratio_iid_half(self):
        mean, se = estimate_ratio((3, 5, 5), MaskingConfig("iid", xi=0.5), 2000, make_rng(9))
        assert abs(mean - 0.5) <= 3 * se

    def test_bad_config(self):
        with pytest.raises(ValueError):
            MaskingConfig(strategy="span")
        with pytest.raises(ValueError):
            MaskingConfig(num_blocks=0)
        with pytest.raises(ValueError):
            MaskingConfig("iid", xi=1.5)


class TestChooseNumBlocks:
    def test_5x16x16(self):
        assert choose_num_blocks((5, 16, 16), 0.15, samples=4000, rng=make_rng(0)) == 5

    def test_10x32x32(self):
        assert choose_num_blocks((10, 32, 32), 0.15, samples=2000, rng=make_rng(0)) == 7

    def test_saturation(self):
        k = choose_num_blocks((2, 2, 2), 1.0 - 1e-9, samples=500, rng=make_rng(0))
        assert k > 1
        mean, _ = estimate_ratio((2, 2, 2), MaskingConfig(num_blocks=k), 500, make_rng(1))
        assert mean > 0.99

    def test_target_range(self):
        with pytest.raises(ValueError):
            choose_num_blocks((2, 2, 2), 1.0)


class TestApplyMask:
    vocab = Vocabulary(16)

    def grid(self):
        return TokenGrid(np.arange(2 * 3 * 3).reshape(2, 3, 3) % 16)

    def test_empty_mask(self):
        g = self.grid()
        masked, targets = apply_mask(g, MaskSet(np.zeros(g.dims, bool)), self.vocab)
        assert masked == g and targets == {}

    def test_full_mask(self):
        g = self.grid()
        masked, targets = apply_mask(g, MaskSet(np.ones(g.dims, bool)), self.vocab)
        assert (masked.tokens == self.vocab.mask_id).all()
        assert len(targets) == 18

    def test_pad_cells_dropped(self):
        tok = np.array(self.grid().tokens)
        tok[1] = self.vocab.pad_id
        g = TokenGrid(tok)
        masked, targets = apply_mask(g, MaskSet(np.ones(g.dims, bool)), self.vocab)
        assert all(p[0] == 0 for p in targets)
        assert (masked.tokens[1] == self.vocab.pad_id).all()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 5))
    def test_restore_identity(self, seed, k):
        rng = np.random.default_rng(seed)
        tok = rng.integers(0, 16, (3, 4, 4))
        tok[2] = self.vocab.pad_id
        g = TokenGrid(tok)
        mask = sample_mask(g.dims, MaskingConfig(num_blocks=k), make_rng(seed))
        masked, targets = apply_mask(g, mask, self.vocab)
        assert restore(masked, targets) == g


def stripe_expectations(tokens, metric="spatial"):
    """Exact expected fill match rate on a 1x4x4 grid: one calibrated block vs
    iid at the same expected ratio (both conditioned on a partial mask)."""
    dims = tokens.shape
    g = TokenGrid(tokens)

    def rate(arr):
        arr = np.asarray(arr, bool).reshape(dims)
        if not arr.any() or arr.all():
            return None
        m = MaskSet(arr)
        return fill_match_rate(neighbor_fill(g, m, metric), g, m)

    _, bh, bw = sampled_length_bounds(dims)
    blk = weight = xi = 0.0
    for n in range(1, bh + 1):
        for s in range(dims[1] - n + 1):
            for m in range(1, bw + 1):
                for r in range(dims[2] - m + 1):
                    p = 1 / bh / (dims[1] - n + 1) / bw / (dims[2] - m + 1)
                    arr = np.zeros(dims, bool)
                    arr[0, s:s + n, r:r + m] = True
                    xi += p * n * m / arr.size
                    blk += p * rate(arr)
                    weight += p
    blk /= weight
    iid = weight = 0.0
    for bits in itertools.product([0, 1], repeat=tokens.size):
        k = sum(bits)
        value = rate(bits)
        if value is not None:
            p = xi ** k * (1 - xi) ** (tokens.size - k)
            iid += p * value
            weight += p
    return blk, iid / weight


class TestNeighborFill:
    def test_single_cell_with_equal_neighbours(self):
        tok = np.full((1, 3, 3), 4)
        tok[0, 1, 1] = 9
        mask = MaskSet.from_positions((1, 3, 3), [(0, 1, 1)])
        filled = neighbor_fill(TokenGrid(tok), mask)
        assert filled.tokens[0, 1, 1] == 4

    @pytest.mark.parametrize("metric", ["spatial", "spatiotemporal"])
    def test_constant_grid(self, metric):
        g = TokenGrid(np.full((3, 4, 4), 7))
        mask = sample_mask(g.dims, MaskingConfig(num_blocks=4), make_rng(0))
        filled = neighbor_fill(g, mask, metric)
        assert filled == g
        assert fill_match_rate(filled, g, mask) == 1.0

    def test_lexicographic_tie_break(self):
        tok = np.array([[[1, 0, 2]]])
        mask = MaskSet.from_positions(tok.shape, [(0, 0, 1)])
        assert neighbor_fill(TokenGrid(tok), mask).tokens[0, 0, 1] == 1

    def test_spatial_falls_back_when_frame_fully_masked(self):
        tok = np.stack([np.full((2, 2), 3), np.full((2, 2), 5)])
        mask = MaskSet(np.array([np.ones((2, 2)), np.zeros((2, 2))], bool))
        assert (neighbor_fill(TokenGrid(tok), mask, "spatial").tokens[0] == 5).all()

    def test_spatial_ignores_other_frames(self):
        tok = np.array([[[1, 1, 1]], [[2, 9, 2]]])
        mask = MaskSet.from_positions(tok.shape, [(1, 0, 1)])
        assert neighbor_fill(TokenGrid(tok), mask, "spatial").tokens[1, 0, 1] == 2
        assert neighbor_fill(TokenGrid(tok), mask, "spatiotemporal").tokens[1, 0, 1] == 1

    def test_fully_masked_rejected(self):
        g = TokenGrid(np.zeros((1, 2, 2), int))
        with pytest.raises(ValueError):
            neighbor_fill(g, MaskSet(np.ones((1, 2, 2), bool)))

    def test_pad_is_not_a_source(self):
        tok = np.array([[[15, 0, 3]]])
        mask = MaskSet.from_positions(tok.shape, [(0, 0, 1)])
        assert neighbor_fill(TokenGrid(tok), mask, pad_id=15).tokens[0, 0, 1] == 3

    @pytest.mark.parametrize("axis", ["rows", "columns"])
    def test_stripes_iid_beats_block_exhaustively(self, axis):
        ii, jj = np.mgrid[0:4, 0:4]
        tokens = ((ii if axis == "rows" else jj) // 2)[None]
        blk, iid = stripe_expectations(tokens)
        assert iid > blk


class TestFillMatchRate:
    def test_identity(self):
        g = TokenGrid(np.arange(8).reshape(2, 2, 2))
        m = MaskSet(np.ones((2, 2, 2), bool))
        assert fill_match_rate(g, g, m) == 1.0

    def test_disjoint(self):
        a = TokenGrid(np.zeros((1, 2, 2), int))
        b = TokenGrid(np.ones((1, 2, 2), int))
        assert fill_match_rate(a, b, MaskSet(np.ones((1, 2, 2), bool))) == 0.0

    def test_empty_mask_is_one(self):
        g = TokenGrid(np.zeros((1, 2, 2), int))
        assert fill_match_rate(g, g, MaskSet(np.zeros((1, 2, 2), bool))) == 1.0
