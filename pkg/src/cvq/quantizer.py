"""Vector quantization over either token axis of a latent grid.

Patch-wise quantization treats each spatial site's channel vector as a
token (dim c); channel-wise quantization treats each whole channel map as
a token (dim h*w).  Both share one lookup (exact nearest codeword by
squared euclidean distance, ties to the lowest index) and one
straight-through estimator.

The practical difference shows up in codebook usage: patch tokens repeat
heavily within and across images, so assignments concentrate on few
codewords and the rest go dead; channel tokens are globally distinct, so
the same machinery keeps the whole codebook alive.  ``usage_stats`` and
``separability_stats`` expose both effects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cvq import kernels
from cvq.errors import ConfigError, ShapeError
from cvq.tensor import Tensor, apply_custom, concat, gather_rows, mean, mul, reshape, slice_, stop_gradient, sub, transpose
from cvq.tokenizer import AXIS_CHANNEL, AXIS_PATCH, LatentGrid, _check_axis


@dataclass
class Codebook:
    """N learnable codewords of a fixed dimension, plus usage counters.

    ``entries`` is a [N, dim] parameter tensor updated purely by gradient
    (no EMA, no dead-code resurrection): a codeword moves only when it wins
    an assignment, which is exactly the dynamic usage statistics measure.
    """

    axis: str
    entries: Tensor
    lifetime_counts: np.ndarray = field(default=None)
    batch_distinct: list = field(default_factory=list)

    def __post_init__(self):
        _check_axis(self.axis)
        if self.entries.ndim != 2:
            raise ShapeError(f"codebook entries must be [N, dim], got {self.entries.shape}")
        if self.lifetime_counts is None:
            self.lifetime_counts = np.zeros(self.n, dtype=np.int64)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def init_from_vectors(cls, axis: str, n: int, vectors: np.ndarray, rng: np.random.Generator) -> "Codebook":
        """Data-dependent init: sample n rows uniformly from a batch of
        token vectors (without replacement when the batch is big enough)."""
        vec = np.asarray(vectors, dtype=np.float64)
        if vec.ndim != 2 or vec.shape[0] == 0:
            raise ShapeError(f"init vectors must be a non-empty [T, dim] array, got {vec.shape}")
        if n < 1:
            raise ConfigError(f"codebook size must be positive, got {n}")
        idx = rng.choice(vec.shape[0], size=n, replace=vec.shape[0] < n)
        return cls(axis=axis, entries=Tensor(vec[idx].copy(), requires_grad=True))

    def record_assignments(self, indices: np.ndarray) -> None:
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        self.lifetime_counts += np.bincount(idx, minlength=self.n)
        self.batch_distinct.append(np.unique(idx))


@dataclass
class QuantizationResult:
    """One quantization pass: quantized grid plus the two codebook losses.

    ``zq.values`` equals the selected codewords bitwise on the forward pass;
    gradients through ``zq`` flow to the pre-quantization latent unchanged
    (straight-through), while ``entries`` only learn from ``codebook_loss``.
    """

    zq: LatentGrid
    indices: np.ndarray  # [B, tokens_per_image] int64
    distances: np.ndarray  # squared distance to the chosen codeword
    commitment_loss: Tensor  # mean ||z - sg[e]||^2, pulls encoder to codebook
    codebook_loss: Tensor  # mean ||sg[z] - e||^2, pulls codewords to encoder


def lookup(vectors: np.ndarray, codebook: Codebook):
    """Exact nearest codeword per row. Returns (indices, squared distances).

    Ties break to the lowest index, so duplicate codewords starve: the copy
    with the higher index can never win an assignment.
    """
    vec = np.ascontiguousarray(np.asarray(vectors, dtype=np.float64))
    if vec.ndim != 2:
        raise ShapeError(f"lookup expects [T, dim] vectors, got shape {vec.shape}")
    if codebook.n == 0:
        raise ShapeError("lookup against an empty codebook")
    if vec.shape[1] != codebook.dim:
        raise ShapeError(f"token dim {vec.shape[1]} != codebook dim {codebook.dim}")
    return kernels.nearest_codeword(vec, np.ascontiguousarray(codebook.entries.data))


def ste_wrap(z: Tensor, e_selected: Tensor) -> Tensor:
    """Straight-through estimator: forward is exactly ``e_selected``'s
    values; backward copies the output gradient onto ``z`` unchanged.
    ``e_selected`` receives no gradient through this op."""
    if z.shape != e_selected.shape:
        raise ShapeError(f"ste_wrap: z shape {z.shape} != codeword shape {e_selected.shape}")
    return apply_custom(e_selected.data.copy(), [z], lambda g: (g,), "ste_wrap")


def _quantize_vectors(vec: Tensor, codebook: Codebook, record: bool):
    idx, dist = lookup(vec.data, codebook)
    e_sel = gather_rows(codebook.entries, idx)
    cb_diff = sub(stop_gradient(vec), e_sel)
    codebook_loss = mean(mul(cb_diff, cb_diff))
    commit_diff = sub(vec, stop_gradient(e_sel))
    commit_loss = mean(mul(commit_diff, commit_diff))
    zq_vec = ste_wrap(vec, e_sel)
    if record:
        codebook.record_assignments(idx)
    return zq_vec, idx, dist, commit_loss, codebook_loss


def quantize_patchwise(grid: LatentGrid, codebook: Codebook, record: bool = True) -> QuantizationResult:
    """Quantize every spatial site's channel vector (token dim = c)."""
    if codebook.axis != AXIS_PATCH:
        raise ConfigError(f"quantize_patchwise needs a patch-axis codebook, got axis={codebook.axis!r}")
    if codebook.dim != grid.c:
        raise ShapeError(f"patch token dim {grid.c} != codebook dim {codebook.dim}")
    vec = grid.patch_vectors()
    zq_vec, idx, dist, commit, cb = _quantize_vectors(vec, codebook, record)
    zq = LatentGrid.from_patch_vectors(zq_vec, grid.batch, grid.h, grid.w, grid.c)
    m = grid.h * grid.w
    return QuantizationResult(zq, idx.reshape(grid.batch, m), dist.reshape(grid.batch, m), commit, cb)


def quantize_channelwise(
    grid: LatentGrid,
    codebook: Codebook,
    c_keep: int | None = None,
    record: bool = True,
) -> QuantizationResult:
    """Quantize whole channel maps (token dim = h*w).

    With ``c_keep`` set, only the first ``c_keep`` channels are quantized
    (the codebook losses cover active channels only) and the remaining
    channels of the output grid are exactly zero — the truncated
    configuration used by nested channel dropout.
    """
    if codebook.axis != AXIS_CHANNEL:
        raise ConfigError(f"quantize_channelwise needs a channel-axis codebook, got axis={codebook.axis!r}")
    if codebook.dim != grid.h * grid.w:
        raise ShapeError(f"channel token dim {grid.h * grid.w} != codebook dim {codebook.dim}")
    b, h, w, c = grid.batch, grid.h, grid.w, grid.c
    active = c if c_keep is None else int(c_keep)
    if not 1 <= active <= c:
        raise ConfigError(f"c_keep must be in [1, {c}], got {c_keep}")

    bchw = transpose(grid.values, (0, 3, 1, 2))  # [B, c, h, w]
    if active < c:
        bchw_active = slice_(bchw, [(0, b), (0, active), (0, h), (0, w)])
    else:
        bchw_active = bchw
    vec = reshape(bchw_active, (b * active, h * w))
    zq_vec, idx, dist, commit, cb = _quantize_vectors(vec, codebook, record)

    zq_bchw = reshape(zq_vec, (b, active, h, w))
    if active < c:
        pad = Tensor(np.zeros((b, c - active, h, w)))
        zq_bchw = concat([zq_bchw, pad], axis=1)
    zq = LatentGrid(transpose(zq_bchw, (0, 2, 3, 1)))
    return QuantizationResult(zq, idx.reshape(b, active), dist.reshape(b, active), commit, cb)


def quantize(grid: LatentGrid, codebook: Codebook, record: bool = True) -> QuantizationResult:
    """Dispatch on the codebook's token axis."""
    if codebook.axis == AXIS_PATCH:
        return quantize_patchwise(grid, codebook, record=record)
    return quantize_channelwise(grid, codebook, record=record)


def usage_stats(codebook: Codebook, window: int | None = None) -> dict:
    """Codebook utilization over recorded assignments.

    ``window=None`` reports lifetime figures; ``window=k`` restricts to the
    last k recorded batches.  distinct counts a codeword once no matter how
    often it wins; utilization = distinct / N.
    """
    if not codebook.batch_distinct:
        raise ConfigError("usage_stats before any assignments were recorded")
    if window is None:
        distinct = int(np.count_nonzero(codebook.lifetime_counts))
        batches = codebook.batch_distinct
    else:
        if window < 1:
            raise ConfigError(f"usage window must be >= 1, got {window}")
        batches = codebook.batch_distinct[-window:]
        distinct = int(np.unique(np.concatenate(batches)).size)
    return {
        "codebook_size": codebook.n,
        "distinct": distinct,
        "utilization": distinct / codebook.n,
        "dead_code_count": codebook.n - distinct,
        "per_batch_distinct": [int(u.size) for u in batches],
    }


def separability_stats(grid: LatentGrid, axis: str) -> dict:
    """How distinguishable tokens are within vs. across images.

    * intra_image_dist: mean euclidean distance between token pairs of the
      same image
    * inter_image_dist: mean distance between tokens of different images
    * overlap_ratio: fraction of tokens whose nearest other token (over the
      whole batch) belongs to a different image

    Patch tokens typically show low intra-image distances and high overlap
    (many near-identical tokens everywhere); channel tokens the opposite.
    """
    _check_axis(axis)
    b = grid.batch
    if b < 2:
        raise ShapeError("separability_stats needs at least 2 images")
    t = grid.tokens_per_image(axis)
    if t < 2:
        raise ShapeError("separability_stats needs at least 2 tokens per image")
    tokens = grid.vectors(axis).data.reshape(b * t, -1)
    owner = np.repeat(np.arange(b), t)

    sq = kernels.sqdist_matrix(np.ascontiguousarray(tokens), np.ascontiguousarray(tokens))
    dist = np.sqrt(np.maximum(sq, 0.0))
    same = owner[:, None] == owner[None, :]
    off_diag = ~np.eye(b * t, dtype=bool)

    intra = float(dist[same & off_diag].mean())
    inter = float(dist[~same].mean())

    nn_sq = sq.copy()
    np.fill_diagonal(nn_sq, np.inf)
    nearest = np.argmin(nn_sq, axis=1)  # ties -> lowest index
    overlap = float(np.mean(owner[nearest] != owner))
    return {
        "intra_image_dist": intra,
        "inter_image_dist": inter,
        "overlap_ratio": overlap,
        "tokens_per_image": t,
        "images": b,
    }
