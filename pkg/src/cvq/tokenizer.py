"""Convolution-free image tokenizer: patchify + residual MLP autoencoder.

The encoder maps [B, H, W, ch] images to a latent grid [B, h, w, c]
(h = H/f, w = W/f).  The grid can be read out as tokens along either of
two axes:

* patch view:   h*w vectors of dimension c per image (one per spatial site)
* channel view: c vectors of dimension h*w per image (one per channel map)

Channel-wise tokenization is the interesting one: each token sees the whole
image, so tokens within an image are far more diverse than patch tokens,
which is what keeps a learned codebook from collapsing (see quantizer.py).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from cvq.errors import ConfigError, ShapeError
from cvq.tensor import (
    Tensor,
    add,
    expand,
    gelu,
    layernorm,
    matmul,
    mean,
    mul,
    reshape,
    sub,
    transpose,
)

AXIS_PATCH = "patch"
AXIS_CHANNEL = "channel"


def _check_axis(axis: str) -> str:
    if axis not in (AXIS_PATCH, AXIS_CHANNEL):
        raise ConfigError(f"unknown token axis {axis!r}; expected 'patch' or 'channel'")
    return axis


@dataclass
class LatentGrid:
    """A batch of latent grids [B, h, w, c] with both token read-outs."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ShapeError(f"latent grid must be rank 4 [B,h,w,c], got {self.values.shape}")

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def h(self) -> int:
        return self.values.shape[1]

    @property
    def w(self) -> int:
        return self.values.shape[2]

    @property
    def c(self) -> int:
        return self.values.shape[3]

    def token_dim(self, axis: str) -> int:
        return self.c if _check_axis(axis) == AXIS_PATCH else self.h * self.w

    def tokens_per_image(self, axis: str) -> int:
        return self.h * self.w if _check_axis(axis) == AXIS_PATCH else self.c

    def patch_vectors(self) -> Tensor:
        """[B*h*w, c]; rows run raster order (row-major over the grid)."""
        return reshape(self.values, (self.batch * self.h * self.w, self.c))

    def channel_vectors(self) -> Tensor:
        """[B*c, h*w]; each row is one channel map flattened row-major."""
        t = transpose(self.values, (0, 3, 1, 2))  # [B, c, h, w]
        return reshape(t, (self.batch * self.c, self.h * self.w))

    def vectors(self, axis: str) -> Tensor:
        return self.patch_vectors() if _check_axis(axis) == AXIS_PATCH else self.channel_vectors()

    @staticmethod
    def from_patch_vectors(vec: Tensor, batch: int, h: int, w: int, c: int) -> "LatentGrid":
        return LatentGrid(reshape(vec, (batch, h, w, c)))

    @staticmethod
    def from_channel_vectors(vec: Tensor, batch: int, h: int, w: int, c: int) -> "LatentGrid":
        t = reshape(vec, (batch, c, h, w))
        return LatentGrid(transpose(t, (0, 2, 3, 1)))


def patchify(images: Tensor, f: int) -> Tensor:
    """[B, H, W, ch] -> [B*(H/f)*(W/f), f*f*ch], raster order per image."""
    b, hh, ww, ch = images.shape
    if hh % f != 0 or ww % f != 0:
        raise ShapeError(f"image size {hh}x{ww} not divisible by patch size {f}")
    h, w = hh // f, ww // f
    t = reshape(images, (b, h, f, w, f, ch))
    t = transpose(t, (0, 1, 3, 2, 4, 5))  # [B, h, w, f, f, ch]
    return reshape(t, (b * h * w, f * f * ch))


def unpatchify(tokens: Tensor, batch: int, h: int, w: int, f: int, ch: int) -> Tensor:
    """Inverse of patchify: [B*h*w, f*f*ch] -> [B, h*f, w*f, ch]."""
    t = reshape(tokens, (batch, h, w, f, f, ch))
    t = transpose(t, (0, 1, 3, 2, 4, 5))  # [B, h, f, w, f, ch]
    return reshape(t, (batch, h * f, w * f, ch))


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _Linear:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, zero_bias: bool = False):
        self.w = Tensor(_uniform_init(rng, d_in, (d_in, d_out)), requires_grad=True)
        b = np.zeros(d_out) if zero_bias else _uniform_init(rng, d_in, (d_out,))
        self.b = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        return add(y, expand(reshape(self.b, (1, self.b.shape[0])), y.shape))

    def params(self):
        return [self.w, self.b]


class _ResidualBlock:
    """Pre-LN MLP block: x + W2 @ gelu(W1 @ layernorm(x))."""

    def __init__(self, rng: np.random.Generator, width: int, hidden: int):
        self.gain = Tensor(np.ones(width), requires_grad=True)
        self.bias = Tensor(np.zeros(width), requires_grad=True)
        self.fc1 = _Linear(rng, width, hidden)
        self.fc2 = _Linear(rng, hidden, width)

    def __call__(self, x: Tensor) -> Tensor:
        h = layernorm(x)
        g = expand(reshape(self.gain, (1, x.shape[1])), x.shape)
        b = expand(reshape(self.bias, (1, x.shape[1])), x.shape)
        h = add(mul(h, g), b)
        h = gelu(self.fc1(h))
        return add(x, self.fc2(h))

    def params(self):
        return [self.gain, self.bias] + self.fc1.params() + self.fc2.params()


class Autoencoder:
    """Patchify -> MLP encoder -> latent grid -> MLP decoder -> unpatchify.

    All layers are dense over per-patch tokens; spatial mixing happens only
    through the fact that every channel map is read out whole when tokenizing
    channel-wise.  Final decoder layer starts with zero bias so an untrained
    model decodes near the patch mean.
    """

    def __init__(
        self,
        height: int,
        width: int,
        in_channels: int,
        f: int,
        latent_channels: int,
        hidden: int,
        blocks: int,
        rng: np.random.Generator,
    ):
        if height % f != 0 or width % f != 0:
            raise ConfigError(f"image size {height}x{width} not divisible by downsample factor {f}")
        if min(height, width, in_channels, f, latent_channels, hidden) < 1 or blocks < 0:
            raise ConfigError("autoencoder dimensions must be positive")
        self.height = height
        self.width = width
        self.in_channels = in_channels
        self.f = f
        self.h = height // f
        self.w = width // f
        self.c = latent_channels
        patch_dim = f * f * in_channels

        self.enc_in = _Linear(rng, patch_dim, hidden)
        self.enc_blocks = [_ResidualBlock(rng, hidden, hidden) for _ in range(blocks)]
        self.enc_out = _Linear(rng, hidden, latent_channels)
        self.dec_in = _Linear(rng, latent_channels, hidden)
        self.dec_blocks = [_ResidualBlock(rng, hidden, hidden) for _ in range(blocks)]
        self.dec_out = _Linear(rng, hidden, patch_dim, zero_bias=True)

    def params(self):
        out = self.enc_in.params()
        for blk in self.enc_blocks:
            out += blk.params()
        out += self.enc_out.params()
        out += self.dec_in.params()
        for blk in self.dec_blocks:
            out += blk.params()
        out += self.dec_out.params()
        return out

    def named_params(self):
        names = ["enc_in.w", "enc_in.b"]
        for i in range(len(self.enc_blocks)):
            names += [f"enc_blk{i}.{s}" for s in ("gain", "bias", "fc1.w", "fc1.b", "fc2.w", "fc2.b")]
        names += ["enc_out.w", "enc_out.b", "dec_in.w", "dec_in.b"]
        for i in range(len(self.dec_blocks)):
            names += [f"dec_blk{i}.{s}" for s in ("gain", "bias", "fc1.w", "fc1.b", "fc2.w", "fc2.b")]
        names += ["dec_out.w", "dec_out.b"]
        params = self.params()
        assert len(names) == len(params)
        return list(zip(names, params))

    def _check_images(self, images: np.ndarray) -> np.ndarray:
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[1:] != (self.height, self.width, self.in_channels):
            raise ShapeError(
                f"expected images [B,{self.height},{self.width},{self.in_channels}], got {arr.shape}"
            )
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ShapeError("image pixels must lie in [0, 1]")
        return arr

    def encode(self, images) -> LatentGrid:
        if isinstance(images, Tensor):
            x = images
            self._check_images(x.data)
        else:
            x = Tensor(self._check_images(images))
        tokens = patchify(x, self.f)
        u = self.enc_in(tokens)
        for blk in self.enc_blocks:
            u = blk(u)
        z = self.enc_out(u)
        return LatentGrid.from_patch_vectors(z, x.shape[0], self.h, self.w, self.c)

    def decode(self, grid: LatentGrid) -> Tensor:
        """Latent grid -> image tensor [B, H, W, ch], unclamped."""
        vec = grid.patch_vectors()
        u = self.dec_in(vec)
        for blk in self.dec_blocks:
            u = blk(u)
        pix = self.dec_out(u)
        return unpatchify(pix, grid.batch, self.h, self.w, self.f, self.in_channels)

    def decode_eval(self, grid: LatentGrid) -> np.ndarray:
        """Decode without gradient bookkeeping and clamp into pixel range."""
        return np.clip(self.decode(grid).data, 0.0, 1.0)


def tokenizer_loss(
    x: Tensor,
    x_hat: Tensor,
    quant,
    beta: float = 0.25,
    lpips_fn: Optional[Callable[[Tensor, Tensor], Tensor]] = None,
    gan_fn: Optional[Callable[[Tensor], Tensor]] = None,
    lambda_lpips: float = 1.0,
    lambda_gan: float = 1.0,
):
    """Composite training objective.

    total = MSE(x, x_hat) + codebook + beta * commitment
            + lambda_lpips * lpips_fn(x, x_hat) + lambda_gan * gan_fn(x_hat)

    The perceptual and adversarial terms are pluggable hooks; left as None
    they contribute exactly zero (the weights still appear in the component
    breakdown so schedules over them stay observable).
    Returns (total, components) where components maps term name -> float.
    """
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction shape {x_hat.shape} != input shape {x.shape}")
    diff = sub(x, x_hat)
    mse = mean(mul(diff, diff))
    total = add(mse, add(quant.codebook_loss, mul(quant.commitment_loss, beta)))
    components = {
        "mse": mse.item(),
        "codebook": quant.codebook_loss.item(),
        "commitment": quant.commitment_loss.item(),
        "lpips": 0.0,
        "gan": 0.0,
        "lambda_gan": float(lambda_gan),
    }
    if lpips_fn is not None:
        lp = lpips_fn(x, x_hat)
        components["lpips"] = lp.item()
        total = add(total, mul(lp, float(lambda_lpips)))
    if gan_fn is not None:
        gn = gan_fn(x_hat)
        components["gan"] = gn.item()
        total = add(total, mul(gn, float(lambda_gan)))
    components["total"] = total.item()
    return total, components
