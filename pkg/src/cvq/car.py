"""Next-channel autoregressive generation over channel token sequences.

An image becomes a sequence of c channel tokens (codebook indices in
channel order).  A decoder-only transformer models

    p(x) = prod_k p(x_k | x_1..x_{k-1}, label)

with a class label occupying sequence slot 0.  By default each input token
is embedded by projecting its actual codeword vector (dim h*w) through a
two-layer MLP, so the model sees the continuous content of the channel map
it is conditioning on; a learned index-embedding table is available as an
alternative input mode.

Because a channel prefix already decodes to a full (coarse) image, sampling
the sequence front-to-back is progressive generation: every prefix of the
sampled tokens is itself a decodable image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from cvq.errors import ConfigError, ShapeError
from cvq.quantizer import Codebook
from cvq.tensor import (
    Tensor,
    add,
    concat,
    expand,
    gather_rows,
    gelu,
    layernorm,
    log_softmax,
    matmul,
    mean,
    mul,
    reshape,
    slice_,
    softmax,
    take_per_row,
    transpose,
)
from cvq.tokenizer import Autoencoder, LatentGrid

# Scores are O(1e2) at desk scale; adding -1e30 absorbs them completely in
# float64, so masked attention weights underflow to exactly 0.0 and causality
# holds bitwise, not just approximately.
_MASK_VALUE = -1e30

INPUT_PROJECTOR = "projector"
INPUT_INDEX = "index"


@dataclass(frozen=True)
class TokenSequence:
    """One image's channel tokens (codebook indices in channel order)."""

    indices: np.ndarray
    label: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ShapeError(f"token sequence must be 1-D, got shape {idx.shape}")
        object.__setattr__(self, "indices", idx)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _Affine:
    """Per-feature gain/bias applied after layernorm."""

    def __init__(self, width: int):
        self.gain = Tensor(np.ones(width), requires_grad=True)
        self.bias = Tensor(np.zeros(width), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        g = expand(reshape(self.gain, (1,) * (x.ndim - 1) + (self.gain.shape[0],)), x.shape)
        b = expand(reshape(self.bias, (1,) * (x.ndim - 1) + (self.bias.shape[0],)), x.shape)
        return add(mul(layernorm(x), g), b)

    def params(self):
        return [self.gain, self.bias]


class _Linear:
    def __init__(self, rng, d_in: int, d_out: int, zero_init: bool = False):
        w = np.zeros((d_in, d_out)) if zero_init else _uniform(rng, d_in, (d_in, d_out))
        b = np.zeros(d_out) if zero_init else _uniform(rng, d_in, (d_out,))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        return add(y, expand(reshape(self.b, (1, self.b.shape[0])), y.shape))

    def params(self):
        return [self.w, self.b]


class _Block:
    """Pre-LN transformer block: causal self-attention + MLP."""

    def __init__(self, rng, d_model: int, heads: int, mlp_hidden: int):
        self.heads = heads
        self.d_head = d_model // heads
        self.ln1 = _Affine(d_model)
        self.wq = _Linear(rng, d_model, d_model)
        self.wk = _Linear(rng, d_model, d_model)
        self.wv = _Linear(rng, d_model, d_model)
        self.wo = _Linear(rng, d_model, d_model)
        self.ln2 = _Affine(d_model)
        self.fc1 = _Linear(rng, d_model, mlp_hidden)
        self.fc2 = _Linear(rng, mlp_hidden, d_model)

    def _split_heads(self, x: Tensor, b: int, t: int) -> Tensor:
        return transpose(reshape(x, (b, t, self.heads, self.d_head)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        b, t, d = x.shape
        h = reshape(self.ln1(x), (b * t, d))
        q = self._split_heads(self.wq(h), b, t)  # [B, H, T, dh]
        k = self._split_heads(self.wk(h), b, t)
        v = self._split_heads(self.wv(h), b, t)
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.d_head))
        scores = add(scores, Tensor(np.broadcast_to(mask, scores.shape)))
        ctx = matmul(softmax(scores), v)  # [B, H, T, dh]
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b * t, d))
        x = add(x, reshape(self.wo(ctx), (b, t, d)))
        m = reshape(self.ln2(x), (b * t, d))
        m = self.fc2(gelu(self.fc1(m)))
        return add(x, reshape(m, (b, t, d)))

    def params(self):
        out = self.ln1.params()
        for lin in (self.wq, self.wk, self.wv, self.wo):
            out += lin.params()
        out += self.ln2.params()
        return out + self.fc1.params() + self.fc2.params()


def causal_mask(t: int) -> np.ndarray:
    """[t, t] additive mask: 0 on and below the diagonal, -1e30 above."""
    m = np.zeros((t, t))
    m[np.triu_indices(t, k=1)] = _MASK_VALUE
    return m


class CarModel:
    """Decoder-only transformer over label + channel-token sequences.

    Slot 0 carries the label embedding; slots 1..c carry token embeddings
    plus learned absolute position embeddings.  Output row j predicts token
    j+1, so row 0 predicts the first channel from the label alone.  The
    readout head starts at zero, making the untrained model exactly uniform
    over the vocabulary (initial NLL per token = ln N).
    """

    def __init__(
        self,
        vocab: int,
        seq_len: int,
        token_dim: int,
        num_classes: int,
        d_model: int,
        layers: int,
        heads: int,
        rng: np.random.Generator,
        input_mode: str = INPUT_PROJECTOR,
        mlp_ratio: int = 4,
    ):
        if d_model % heads != 0:
            raise ConfigError(f"d_model={d_model} not divisible by heads={heads}")
        if input_mode not in (INPUT_PROJECTOR, INPUT_INDEX):
            raise ConfigError(f"unknown input mode {input_mode!r}")
        if min(vocab, seq_len, token_dim, num_classes, d_model, layers, heads) < 1:
            raise ConfigError("model dimensions must be positive")
        self.vocab = vocab
        self.seq_len = seq_len
        self.token_dim = token_dim
        self.num_classes = num_classes
        self.d_model = d_model
        self.input_mode = input_mode

        self.proj1 = _Linear(rng, token_dim, d_model)
        self.proj2 = _Linear(rng, d_model, d_model)
        self.tok_emb = Tensor(_uniform(rng, d_model, (vocab, d_model)), requires_grad=True)
        self.label_emb = Tensor(_uniform(rng, d_model, (num_classes, d_model)), requires_grad=True)
        self.pos_emb = Tensor(_uniform(rng, d_model, (seq_len + 1, d_model)), requires_grad=True)
        self.blocks = [_Block(rng, d_model, heads, mlp_ratio * d_model) for _ in range(layers)]
        self.ln_f = _Affine(d_model)
        self.head = _Linear(rng, d_model, vocab, zero_init=True)

    def params(self):
        out = self.proj1.params() + self.proj2.params() if self.input_mode == INPUT_PROJECTOR else [self.tok_emb]
        out = list(out) + [self.label_emb, self.pos_emb]
        for blk in self.blocks:
            out += blk.params()
        out += self.ln_f.params()
        return out + self.head.params()

    def named_params(self):
        params = self.params()
        names = []
        if self.input_mode == INPUT_PROJECTOR:
            names += ["proj1.w", "proj1.b", "proj2.w", "proj2.b"]
        else:
            names += ["tok_emb"]
        names += ["label_emb", "pos_emb"]
        for i in range(len(self.blocks)):
            names += [
                f"blk{i}.{s}"
                for s in (
                    "ln1.gain", "ln1.bias", "wq.w", "wq.b", "wk.w", "wk.b", "wv.w", "wv.b",
                    "wo.w", "wo.b", "ln2.gain", "ln2.bias", "fc1.w", "fc1.b", "fc2.w", "fc2.b",
                )
            ]
        names += ["ln_f.gain", "ln_f.bias", "head.w", "head.b"]
        assert len(names) == len(params)
        return list(zip(names, params))

    def _check_inputs(self, indices: np.ndarray, labels: np.ndarray):
        idx = np.asarray(indices, dtype=np.int64)
        lab = np.asarray(labels, dtype=np.int64)
        if idx.ndim != 2:
            raise ShapeError(f"token indices must be [B, t], got shape {idx.shape}")
        if lab.shape != (idx.shape[0],):
            raise ShapeError(f"labels must be [B] matching indices, got {lab.shape}")
        if idx.shape[1] > self.seq_len:
            raise ShapeError(f"sequence length {idx.shape[1]} exceeds model maximum {self.seq_len}")
        if idx.size and (idx.min() < 0 or idx.max() >= self.vocab):
            raise ShapeError("token index out of vocabulary range")
        if lab.min() < 0 or lab.max() >= self.num_classes:
            raise ShapeError("class label out of range")
        return idx, lab

    def embed_sequence(self, indices: np.ndarray, labels: np.ndarray, codewords: np.ndarray) -> Tensor:
        """[B, t] indices + [B] labels -> [B, t+1, d_model] input embeddings."""
        idx, lab = self._check_inputs(indices, labels)
        b, t = idx.shape
        lab_vec = gather_rows(self.label_emb, lab)  # [B, d]
        pos0 = expand(slice_(self.pos_emb, [(0, 1), (0, self.d_model)]), (b, self.d_model))
        row0 = reshape(add(lab_vec, pos0), (b, 1, self.d_model))
        if t == 0:
            return row0
        if self.input_mode == INPUT_PROJECTOR:
            table = np.asarray(codewords, dtype=np.float64)
            if table.shape != (self.vocab, self.token_dim):
                raise ShapeError(
                    f"codeword table must be [{self.vocab}, {self.token_dim}], got {table.shape}"
                )
            tok = Tensor(table[idx.reshape(-1)])  # constant: [B*t, token_dim]
            tok = self.proj2(gelu(self.proj1(tok)))
        else:
            tok = gather_rows(self.tok_emb, idx.reshape(-1))
        pos = slice_(self.pos_emb, [(1, t + 1), (0, self.d_model)])  # [t, d]
        pos = expand(reshape(pos, (1, t, self.d_model)), (b, t, self.d_model))
        rows = add(reshape(tok, (b, t, self.d_model)), pos)
        return concat([row0, rows], axis=1)

    def forward_logits(self, indices: np.ndarray, labels: np.ndarray, codewords: np.ndarray) -> Tensor:
        """Logits [B, t+1, vocab]; row j is the distribution of token j+1
        given the label and tokens 1..j."""
        x = self.embed_sequence(indices, labels, codewords)
        b, t1, d = x.shape
        mask = causal_mask(t1)
        for blk in self.blocks:
            x = blk(x, mask)
        x = self.ln_f(x)
        logits = self.head(reshape(x, (b * t1, d)))
        return reshape(logits, (b, t1, self.vocab))

    def loss(self, indices: np.ndarray, labels: np.ndarray, codewords: np.ndarray):
        """Mean NLL per token over full sequences; also reports argmax
        accuracy. Requires complete length-c sequences."""
        idx, lab = self._check_inputs(indices, labels)
        b, t = idx.shape
        if t != self.seq_len:
            raise ShapeError(f"training sequences must have length {self.seq_len}, got {t}")
        logits = self.forward_logits(idx, lab, codewords)  # [B, c+1, vocab]
        pred = slice_(logits, [(0, b), (0, t), (0, self.vocab)])  # rows predicting tokens 1..c
        flat = reshape(pred, (b * t, self.vocab))
        logp = log_softmax(flat)
        targets = idx.reshape(-1)
        nll = mul(mean(take_per_row(logp, targets)), -1.0)
        accuracy = float(np.mean(np.argmax(flat.data, axis=1) == targets))
        return nll, accuracy

    def generate(
        self,
        labels: np.ndarray,
        codewords: np.ndarray,
        rng: np.random.Generator,
        temperature: float = 1.0,
        top_k: int | None = None,
    ) -> np.ndarray:
        """Sample [B, c] token sequences, one channel at a time.

        ``top_k=1`` is greedy decoding and consumes no randomness beyond the
        rng calls themselves; ties rank lower indices first.
        """
        if temperature <= 0.0:
            raise ConfigError(f"temperature must be positive, got {temperature}")
        k = self.vocab if top_k is None else int(top_k)
        if not 1 <= k <= self.vocab:
            raise ConfigError(f"top_k must be in [1, {self.vocab}], got {top_k}")
        lab = np.asarray(labels, dtype=np.int64)
        b = lab.shape[0]
        out = np.zeros((b, 0), dtype=np.int64)
        for _ in range(self.seq_len):
            logits = self.forward_logits(out, lab, codewords).data[:, -1, :]
            nxt = _sample_rows(logits, k, temperature, rng)
            out = np.concatenate([out, nxt[:, None]], axis=1)
        return out


def _sample_rows(logits: np.ndarray, k: int, temperature: float, rng: np.random.Generator) -> np.ndarray:
    """Top-k + temperature sampling, one draw per row in row order."""
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]  # ties: lowest index first
    top = np.take_along_axis(logits, order, axis=1)
    scaled = (top - top[:, :1]) / temperature  # shift by row max: first column of a desc sort
    probs = np.exp(scaled)
    probs /= probs.sum(axis=1, keepdims=True)
    picks = np.empty(logits.shape[0], dtype=np.int64)
    for i in range(logits.shape[0]):
        picks[i] = order[i, rng.choice(k, p=probs[i])]
    return picks


def progressive_decode(indices: np.ndarray, codebook: Codebook, autoenc: Autoencoder) -> np.ndarray:
    """Decode the first k channel tokens of each image, zeros elsewhere.

    ``indices`` is [B, k] with 1 <= k <= c.  k = c reproduces the full
    quantized reconstruction exactly.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 2 or idx.shape[1] < 1:
        raise ShapeError(f"progressive_decode needs [B, k>=1] indices, got shape {idx.shape}")
    b, k = idx.shape
    if k > autoenc.c:
        raise ShapeError(f"got {k} channel tokens but the decoder has {autoenc.c} channels")
    if codebook.dim != autoenc.h * autoenc.w:
        raise ShapeError(f"codebook dim {codebook.dim} != channel map size {autoenc.h * autoenc.w}")
    if idx.min() < 0 or idx.max() >= codebook.n:
        raise ShapeError("token index out of codebook range")
    maps = codebook.entries.data[idx.reshape(-1)].reshape(b, k, autoenc.h, autoenc.w)
    full = np.zeros((b, autoenc.c, autoenc.h, autoenc.w))
    full[:, :k] = maps
    grid = LatentGrid(Tensor(np.ascontiguousarray(np.transpose(full, (0, 2, 3, 1)))))
    return autoenc.decode_eval(grid)
