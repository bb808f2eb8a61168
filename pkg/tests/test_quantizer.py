"""Quantizer behavior: exact lookup, STE contracts, losses, usage, separability."""

import numpy as np
import pytest

from cvq.errors import ConfigError, ShapeError
from cvq.quantizer import (
    Codebook,
    lookup,
    quantize,
    quantize_channelwise,
    quantize_patchwise,
    separability_stats,
    ste_wrap,
    usage_stats,
)
from cvq.tensor import GradTape, Tensor, mul, sum_
from cvq.tokenizer import AXIS_CHANNEL, AXIS_PATCH, LatentGrid


def make_codebook(axis, entries):
    return Codebook(axis=axis, entries=Tensor(np.asarray(entries, dtype=np.float64), requires_grad=True))


def make_grid(data):
    return LatentGrid(Tensor(np.asarray(data, dtype=np.float64), requires_grad=True))


# ---------------------------------------------------------------------------
# lookup
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(8))
def test_lookup_brute_force(seed):
    rng = np.random.default_rng(seed)
    vec = rng.normal(size=(rng.integers(1, 30), rng.integers(1, 12)))
    cb = make_codebook(AXIS_PATCH, rng.normal(size=(rng.integers(1, 40), vec.shape[1])))
    idx, dist = lookup(vec, cb)
    for t in range(vec.shape[0]):
        d = np.sum((cb.entries.data - vec[t]) ** 2, axis=1)
        assert idx[t] == np.argmin(d)  # np.argmin also takes the first minimum
        assert dist[t] == pytest.approx(d[idx[t]], rel=1e-12, abs=1e-12)


def test_lookup_tie_breaks_to_lowest_index():
    cb = make_codebook(AXIS_PATCH, [[3.0, 3.0], [1.0, 1.0], [1.0, 1.0]])
    idx, _ = lookup(np.array([[1.0, 1.0], [1.1, 0.9]]), cb)
    assert idx.tolist() == [1, 1]


def test_lookup_scale_covariance():
    rng = np.random.default_rng(11)
    vec = rng.normal(size=(20, 5))
    entries = rng.normal(size=(9, 5))
    idx_base, _ = lookup(vec, make_codebook(AXIS_PATCH, entries))
    for scale in (0.25, 7.0, 1e3):
        idx_scaled, _ = lookup(vec * scale, make_codebook(AXIS_PATCH, entries * scale))
        assert np.array_equal(idx_base, idx_scaled)


def test_lookup_shape_guards():
    cb = make_codebook(AXIS_PATCH, [[1.0, 2.0]])
    with pytest.raises(ShapeError):
        lookup(np.zeros((3, 3)), cb)  # dim mismatch
    with pytest.raises(ShapeError):
        lookup(np.zeros(4), cb)  # not 2-d


# ---------------------------------------------------------------------------
# straight-through estimator
# ---------------------------------------------------------------------------


def test_ste_forward_is_codeword_bitwise():
    rng = np.random.default_rng(0)
    z = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    e = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    with GradTape():
        out = ste_wrap(z, e)
    assert np.array_equal(out.data, e.data)


def test_ste_backward_copies_gradient_to_z_only():
    rng = np.random.default_rng(1)
    z = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    e = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    weights = Tensor(rng.normal(size=(4, 3)))
    with GradTape() as tape:
        out = sum_(mul(ste_wrap(z, e), weights))
        tape.backward(out)
    assert np.array_equal(z.grad, weights.data)  # identity pass-through, bitwise
    assert e.grad is None


def test_ste_shape_guard():
    z = Tensor(np.zeros((2, 2)), requires_grad=True)
    e = Tensor(np.zeros((2, 3)), requires_grad=True)
    with pytest.raises(ShapeError):
        ste_wrap(z, e)


# ---------------------------------------------------------------------------
# quantize: losses and gradients
# ---------------------------------------------------------------------------


def test_hand_derived_losses_and_grads():
    # one token [1, 2]; codebook rows [0,0] (dist 5) and [1,1] (dist 1)
    grid = make_grid(np.array([1.0, 2.0]).reshape(1, 1, 1, 2))
    cb = make_codebook(AXIS_PATCH, [[0.0, 0.0], [1.0, 1.0]])

    with GradTape() as tape:
        res = quantize_patchwise(grid, cb)
        tape.backward(res.codebook_loss)
    assert res.indices.tolist() == [[1]]
    assert res.distances[0, 0] == pytest.approx(1.0)
    # codebook loss: mean over 2 entries of (z - e)^2 = ((1-1)^2 + (2-1)^2)/2
    assert res.codebook_loss.item() == pytest.approx(0.5)
    assert res.commitment_loss.item() == pytest.approx(0.5)
    # d/de mean((sg[z]-e)^2) = 2(e-z)/numel on the selected row only
    assert np.allclose(cb.entries.grad, [[0.0, 0.0], [0.0, -1.0]])
    assert grid.values.grad is None  # stop_gradient blocks the z side

    grid2 = make_grid(np.array([1.0, 2.0]).reshape(1, 1, 1, 2))
    cb2 = make_codebook(AXIS_PATCH, [[0.0, 0.0], [1.0, 1.0]])
    with GradTape() as tape:
        res2 = quantize_patchwise(grid2, cb2)
        tape.backward(res2.commitment_loss)
    # d/dz mean((z - sg[e])^2) = 2(z-e)/numel
    assert np.allclose(grid2.values.grad.reshape(-1), [0.0, 1.0])
    assert cb2.entries.grad is None


def test_perfect_codebook_identity():
    rng = np.random.default_rng(5)
    data = rng.normal(size=(2, 2, 2, 3))
    grid = make_grid(data)
    tokens = data.reshape(-1, 3)
    cb = make_codebook(AXIS_PATCH, tokens)
    res = quantize_patchwise(grid, cb)
    assert np.array_equal(res.zq.values.data, data)  # bitwise
    assert np.all(res.distances == 0.0)
    assert res.codebook_loss.item() == 0.0


def test_quantize_does_not_mutate_input_grid():
    rng = np.random.default_rng(6)
    data = rng.normal(size=(2, 2, 2, 4))
    grid = make_grid(data)
    before = grid.values.data.copy()
    cb_p = make_codebook(AXIS_PATCH, rng.normal(size=(5, 4)))
    cb_c = make_codebook(AXIS_CHANNEL, rng.normal(size=(5, 4)))
    with GradTape():
        quantize_patchwise(grid, cb_p)
        quantize_channelwise(grid, cb_c)
    assert np.array_equal(grid.values.data, before)


def test_dispatcher_matches_direct_calls():
    rng = np.random.default_rng(7)
    data = rng.normal(size=(2, 2, 2, 4))
    cb_p = make_codebook(AXIS_PATCH, rng.normal(size=(6, 4)))
    cb_c = make_codebook(AXIS_CHANNEL, rng.normal(size=(6, 4)))
    with GradTape():
        direct_p = quantize_patchwise(make_grid(data), cb_p, record=False)
        via_p = quantize(make_grid(data), cb_p, record=False)
        direct_c = quantize_channelwise(make_grid(data), cb_c, record=False)
        via_c = quantize(make_grid(data), cb_c, record=False)
    assert np.array_equal(direct_p.indices, via_p.indices)
    assert np.array_equal(direct_c.indices, via_c.indices)


def test_axis_guards():
    grid = make_grid(np.zeros((1, 2, 2, 4)))
    cb_c = make_codebook(AXIS_CHANNEL, np.zeros((3, 4)))
    cb_p = make_codebook(AXIS_PATCH, np.zeros((3, 4)))
    with pytest.raises(ConfigError):
        quantize_patchwise(grid, cb_c)
    with pytest.raises(ConfigError):
        quantize_channelwise(grid, cb_p)
    with pytest.raises(ShapeError):
        quantize_patchwise(grid, make_codebook(AXIS_PATCH, np.zeros((3, 5))))
    with pytest.raises(ShapeError):
        quantize_channelwise(grid, make_codebook(AXIS_CHANNEL, np.zeros((3, 5))))


# ---------------------------------------------------------------------------
# channel truncation (c_keep)
# ---------------------------------------------------------------------------


def test_c_keep_zero_pads_inactive_channels():
    rng = np.random.default_rng(8)
    grid = make_grid(rng.normal(size=(2, 2, 2, 6)))
    cb = make_codebook(AXIS_CHANNEL, rng.normal(size=(10, 4)))
    with GradTape():
        res = quantize_channelwise(grid, cb, c_keep=2)
    assert res.indices.shape == (2, 2)
    assert np.all(res.zq.values.data[:, :, :, 2:] == 0.0)
    assert not np.all(res.zq.values.data[:, :, :, :2] == 0.0)


def test_c_keep_full_equals_untruncated():
    rng = np.random.default_rng(9)
    grid_data = rng.normal(size=(2, 2, 2, 6))
    cb_entries = rng.normal(size=(10, 4))
    with GradTape():
        full = quantize_channelwise(make_grid(grid_data), make_codebook(AXIS_CHANNEL, cb_entries), record=False)
        kept = quantize_channelwise(
            make_grid(grid_data), make_codebook(AXIS_CHANNEL, cb_entries), c_keep=6, record=False
        )
    assert np.array_equal(full.zq.values.data, kept.zq.values.data)
    assert np.array_equal(full.indices, kept.indices)
    assert full.commitment_loss.item() == kept.commitment_loss.item()


def test_c_keep_losses_cover_active_channels_only():
    rng = np.random.default_rng(10)
    data = rng.normal(size=(3, 2, 2, 5))
    cb_entries = rng.normal(size=(7, 4))
    with GradTape():
        trunc = quantize_channelwise(make_grid(data), make_codebook(AXIS_CHANNEL, cb_entries), c_keep=2, record=False)
        only = quantize_channelwise(
            make_grid(data[:, :, :, :2]), make_codebook(AXIS_CHANNEL, cb_entries), record=False
        )
    assert np.array_equal(trunc.indices, only.indices)
    assert trunc.commitment_loss.item() == only.commitment_loss.item()
    assert trunc.codebook_loss.item() == only.codebook_loss.item()


def test_c_keep_range_guard():
    grid = make_grid(np.zeros((1, 2, 2, 4)))
    cb = make_codebook(AXIS_CHANNEL, np.zeros((3, 4)))
    for bad in (0, 5, -1):
        with pytest.raises(ConfigError):
            quantize_channelwise(grid, cb, c_keep=bad)


# ---------------------------------------------------------------------------
# codebook init and usage accounting
# ---------------------------------------------------------------------------


def test_init_from_vectors_samples_rows():
    rng = np.random.default_rng(12)
    pool = rng.normal(size=(50, 4))
    cb = Codebook.init_from_vectors(AXIS_PATCH, 8, pool, np.random.default_rng(0))
    assert cb.entries.shape == (8, 4)
    # every entry is one of the pool rows, and without replacement they are
    # pairwise distinct rows
    for row in cb.entries.data:
        assert any(np.array_equal(row, p) for p in pool)
    assert np.unique(cb.entries.data, axis=0).shape[0] == 8


def test_init_from_vectors_small_pool_replaces():
    pool = np.array([[1.0, 0.0], [0.0, 1.0]])
    cb = Codebook.init_from_vectors(AXIS_PATCH, 6, pool, np.random.default_rng(0))
    assert cb.entries.shape == (6, 2)


def test_init_from_vectors_guards():
    with pytest.raises(ShapeError):
        Codebook.init_from_vectors(AXIS_PATCH, 2, np.zeros((0, 3)), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        Codebook.init_from_vectors(AXIS_PATCH, 0, np.zeros((4, 3)), np.random.default_rng(0))


def test_usage_stats_hand_count():
    cb = make_codebook(AXIS_PATCH, np.zeros((4, 2)))
    cb.record_assignments(np.array([0, 0, 1]))
    cb.record_assignments(np.array([1, 1, 1]))
    cb.record_assignments(np.array([2, 0, 2]))
    life = usage_stats(cb)
    assert life["distinct"] == 3 and life["utilization"] == 0.75 and life["dead_code_count"] == 1
    assert life["per_batch_distinct"] == [2, 1, 2]
    last = usage_stats(cb, window=1)
    assert last["distinct"] == 2 and last["utilization"] == 0.5
    last2 = usage_stats(cb, window=2)
    assert last2["distinct"] == 3  # {1} U {0, 2}


def test_usage_monotone_in_window():
    rng = np.random.default_rng(13)
    cb = make_codebook(AXIS_PATCH, np.zeros((16, 2)))
    for _ in range(10):
        cb.record_assignments(rng.integers(0, 16, size=5))
    prev = 0
    for w in range(1, 11):
        cur = usage_stats(cb, window=w)["distinct"]
        assert cur >= prev
        prev = cur
    assert usage_stats(cb)["distinct"] == prev


def test_usage_degenerate_and_full():
    cb = make_codebook(AXIS_PATCH, np.zeros((8, 2)))
    cb.record_assignments(np.zeros(20, dtype=np.int64))
    assert usage_stats(cb)["utilization"] == 1 / 8  # everything mapped to index 0
    cb.record_assignments(np.arange(8))
    assert usage_stats(cb)["utilization"] == 1.0


def test_usage_stats_guards():
    cb = make_codebook(AXIS_PATCH, np.zeros((4, 2)))
    with pytest.raises(ConfigError):
        usage_stats(cb)
    cb.record_assignments(np.array([0]))
    with pytest.raises(ConfigError):
        usage_stats(cb, window=0)


# ---------------------------------------------------------------------------
# separability
# ---------------------------------------------------------------------------


def separability_oracle(tokens, owner):
    """O(T^2) recomputation with explicit loops."""
    n = tokens.shape[0]
    intra, inter = [], []
    nearest_other = np.zeros(n, dtype=bool)
    for i in range(n):
        best, best_j = np.inf, -1
        for j in range(n):
            if i == j:
                continue
            d = float(np.sqrt(np.sum((tokens[i] - tokens[j]) ** 2)))
            (intra if owner[i] == owner[j] else inter).append(d)
            if d * d < best:
                best, best_j = d * d, j
        nearest_other[i] = owner[best_j] != owner[i]
    return np.mean(intra), np.mean(inter), np.mean(nearest_other)


def test_separability_matches_oracle():
    rng = np.random.default_rng(14)
    data = rng.normal(size=(3, 2, 2, 4))
    grid = make_grid(data)
    for axis in (AXIS_PATCH, AXIS_CHANNEL):
        stats = separability_stats(grid, axis)
        tokens = grid.vectors(axis).data.reshape(3 * grid.tokens_per_image(axis), -1)
        owner = np.repeat(np.arange(3), grid.tokens_per_image(axis))
        intra, inter, overlap = separability_oracle(tokens, owner)
        assert stats["intra_image_dist"] == pytest.approx(intra, rel=1e-10)
        assert stats["inter_image_dist"] == pytest.approx(inter, rel=1e-10)
        assert stats["overlap_ratio"] == pytest.approx(overlap)


def test_separability_disjoint_constant_images():
    # image 0 all zeros, image 1 all fives: nearest neighbors stay in-image
    data = np.concatenate([np.zeros((1, 2, 2, 3)), np.full((1, 2, 2, 3), 5.0)])
    stats = separability_stats(make_grid(data), AXIS_PATCH)
    assert stats["overlap_ratio"] == 0.0
    assert stats["intra_image_dist"] == 0.0
    assert stats["inter_image_dist"] == pytest.approx(np.sqrt(3) * 5.0)


def test_separability_guards():
    with pytest.raises(ShapeError):
        separability_stats(make_grid(np.zeros((1, 2, 2, 3))), AXIS_PATCH)
    with pytest.raises(ShapeError):
        separability_stats(make_grid(np.zeros((2, 1, 1, 3))), AXIS_PATCH)  # 1 patch token


# ---------------------------------------------------------------------------
# codebook construction guards
# ---------------------------------------------------------------------------


def test_codebook_entry_rank_guard():
    with pytest.raises(ShapeError):
        Codebook(axis=AXIS_PATCH, entries=Tensor(np.zeros(4), requires_grad=True))


def test_empty_codebook_lookup_guard():
    # a [0, dim] entries tensor is constructible but unusable
    cb = Codebook(axis=AXIS_PATCH, entries=Tensor(np.zeros((0, 3)), requires_grad=True))
    with pytest.raises(ShapeError):
        lookup(np.zeros((2, 3)), cb)
