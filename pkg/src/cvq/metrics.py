"""Reconstruction metrics and the patch-vs-channel comparison harness.

PSNR assumes a [0, 1] signal range and is capped at 99 dB (the defined
value for an exact match).  SSIM uses non-overlapping square windows with
the standard stabilizers c1 = (k1*L)^2, c2 = (k2*L)^2, L = 1.

``progressive_sweep`` measures reconstruction quality from the first n
channel tokens as n grows — a nested-dropout-trained tokenizer degrades
gracefully, an ordinary one falls apart as soon as channels are missing.
``run_comparison`` is the head-to-head grid over token axes and codebook
sizes that makes the codebook-collapse asymmetry measurable from one
command.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cvq.car import progressive_decode
from cvq.config import RunConfig
from cvq.errors import ConfigError, DataError, ShapeError
from cvq.quantizer import Codebook, quantize, quantize_channelwise, separability_stats, usage_stats
from cvq.tensor import Tensor
from cvq.tokenizer import AXIS_CHANNEL, Autoencoder, LatentGrid
from cvq.train import CsvLog, train_tokenizer, write_json

PSNR_CAP = 99.0


def _check_pair(x: np.ndarray, y: np.ndarray):
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"metric inputs must match, got {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ShapeError("metric inputs are empty")
    for arr in (a, b):
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise DataError("metric inputs must lie in [0, 1]")
    return a, b


def psnr(x: np.ndarray, y: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over the whole array; 99 dB cap."""
    a, b = _check_pair(x, y)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def ssim(x: np.ndarray, y: np.ndarray, window: int = 8, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over non-overlapping ``window``-sized blocks (and channels).

    Inputs are [H, W] or [H, W, ch]; edge remainders that don't fill a
    window are discarded.  Identical inputs score exactly 1.0.
    """
    a, b = _check_pair(x, y)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.ndim != 3:
        raise ShapeError(f"ssim expects [H, W] or [H, W, ch], got {a.shape}")
    h, w, ch = a.shape
    if window < 1 or window > min(h, w):
        raise ShapeError(f"ssim window {window} does not fit image {h}x{w}")
    nh, nw = h // window, w // window
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2

    def blocks(img):
        trimmed = img[: nh * window, : nw * window]
        return (
            trimmed.reshape(nh, window, nw, window, ch)
            .transpose(0, 2, 4, 1, 3)
            .reshape(nh * nw * ch, window * window)
        )

    pa, pb = blocks(a), blocks(b)
    mu_a = pa.mean(axis=1)
    mu_b = pb.mean(axis=1)
    var_a = pa.var(axis=1)
    var_b = pb.var(axis=1)
    cov = ((pa - mu_a[:, None]) * (pb - mu_b[:, None])).mean(axis=1)
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(score.mean())


def reconstruction_metrics(x: np.ndarray, y: np.ndarray, window: int = 8) -> dict:
    """Per-image PSNR/SSIM/MSE averaged over a [B, H, W, ch] batch."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.ndim != 4 or a.shape != b.shape:
        raise ShapeError(f"expected matching [B,H,W,ch] batches, got {a.shape} vs {b.shape}")
    rows = [
        {"psnr": psnr(a[i], b[i]), "ssim": ssim(a[i], b[i], window=window),
         "mse": float(np.mean((a[i] - b[i]) ** 2))}
        for i in range(a.shape[0])
    ]
    return {key: float(np.mean([r[key] for r in rows])) for key in ("psnr", "ssim", "mse")}


# ---------------------------------------------------------------------------
# progressive reconstruction sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepReport:
    """Quality-vs-token-budget curve: one row per channel count."""

    rows: list
    meta: dict = field(default_factory=dict)

    COLUMNS = ("n_channels", "psnr", "ssim", "mse")

    def write_csv(self, path: str | Path) -> None:
        log = CsvLog(Path(path), self.COLUMNS)
        try:
            for row in self.rows:
                log.row(row)
        finally:
            log.close()

    def column(self, name: str) -> list:
        return [row[name] for row in self.rows]


def progressive_sweep(
    autoenc: Autoencoder,
    codebook: Codebook,
    images: np.ndarray,
    channel_counts,
    batch_size: int = 64,
    window: int = 8,
) -> SweepReport:
    """Reconstruct each image from its first n channel tokens for every n.

    ``channel_counts`` must be strictly increasing within [1, c].  Returns
    mean per-image metrics per n, ordered by n.
    """
    counts = [int(n) for n in channel_counts]
    if not counts:
        raise ConfigError("progressive sweep needs at least one channel count")
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise ConfigError(f"channel counts must be strictly increasing, got {counts}")
    if counts[0] < 1 or counts[-1] > autoenc.c:
        raise ConfigError(f"channel counts {counts} outside [1, {autoenc.c}]")
    if codebook.axis != AXIS_CHANNEL:
        raise ConfigError("progressive sweep requires a channel-axis codebook")

    per_n = {n: [] for n in counts}
    for start in range(0, images.shape[0], batch_size):
        batch = images[start : start + batch_size]
        grid = autoenc.encode(batch)
        indices = quantize_channelwise(grid, codebook, record=False).indices
        for n in counts:
            recon = progressive_decode(indices[:, :n], codebook, autoenc)
            for i in range(batch.shape[0]):
                per_n[n].append((
                    psnr(batch[i], recon[i]),
                    ssim(batch[i], recon[i], window=window),
                    float(np.mean((batch[i] - recon[i]) ** 2)),
                ))
    rows = []
    for n in counts:
        vals = np.array(per_n[n])
        rows.append({"n_channels": n, "psnr": float(vals[:, 0].mean()),
                     "ssim": float(vals[:, 1].mean()), "mse": float(vals[:, 2].mean())})
    return SweepReport(rows)


def channel_ablation(
    autoenc: Autoencoder,
    codebook: Codebook,
    images: np.ndarray,
    channel: int,
    c_keep: int | None = None,
) -> dict:
    """Reconstruct with and without channel ``channel`` (1-based).

    Returns baseline / ablated reconstructions, their difference, and the
    per-image energy of that difference — a direct view of what one channel
    token contributes to the output.  With ``c_keep`` the latent is truncated
    to its first c_keep channels before either decode, so ablating a channel
    beyond the cutoff (already all zero) is exactly a no-op.
    """
    if not 1 <= channel <= autoenc.c:
        raise ConfigError(f"channel must be in [1, {autoenc.c}], got {channel}")
    if codebook.axis != AXIS_CHANNEL:
        raise ConfigError("channel ablation requires a channel-axis codebook")
    grid = autoenc.encode(images)
    zq = quantize_channelwise(grid, codebook, c_keep=c_keep, record=False).zq
    baseline = autoenc.decode_eval(zq)
    ablated_values = zq.values.data.copy()
    ablated_values[:, :, :, channel - 1] = 0.0
    ablated = autoenc.decode_eval(LatentGrid(Tensor(ablated_values)))
    diff = baseline - ablated
    energy = np.sum(diff * diff, axis=(1, 2, 3))
    return {"baseline": baseline, "ablated": ablated, "diff": diff, "energy": energy}


# ---------------------------------------------------------------------------
# patch-vs-channel comparison harness
# ---------------------------------------------------------------------------


@dataclass
class ComparisonReport:
    """Grid of (axis, codebook size) cells trained under identical budgets."""

    rows: list
    meta: dict = field(default_factory=dict)

    COLUMNS = (
        "axis", "codebook_size", "lifetime_utilization", "lifetime_distinct",
        "recent_utilization", "mse", "psnr", "ssim",
        "intra_image_dist", "inter_image_dist", "overlap_ratio",
    )

    def cell(self, axis: str, size: int) -> dict:
        for row in self.rows:
            if row["axis"] == axis and row["codebook_size"] == size:
                return row
        raise KeyError(f"no comparison cell ({axis}, {size})")

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log = CsvLog(out / "comparison.csv", self.COLUMNS)
        try:
            for row in self.rows:
                log.row({k: row[k] for k in self.COLUMNS})
        finally:
            log.close()
        write_json(out / "comparison.json", {"meta": self.meta, "cells": self.rows})


def run_comparison(
    cfg: RunConfig,
    train_images: np.ndarray,
    val_images: np.ndarray,
    out_dir: str | Path | None = None,
) -> ComparisonReport:
    """Train every (axis, codebook size) cell and measure usage + quality.

    All cells share the seed, data order, and step budget; nested dropout is
    disabled so the axes meet on plain vector quantization.  Per-cell logs
    land in ``cells/<axis>_<size>/`` when ``out_dir`` is given.
    """
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    for axis in cfg.compare_axes:
        for size in cfg.compare_sizes:
            cell_cfg = cfg.updated(axis=axis, codebook_size=int(size), alpha=0.0)
            cell_dir = None
            if out is not None:
                cell_dir = out / "cells" / f"{axis}_{size}"
                cell_dir.mkdir(parents=True, exist_ok=True)
            run = train_tokenizer(cell_cfg, train_images, cell_dir)

            life = usage_stats(run.codebook)
            recent = usage_stats(run.codebook, window=min(cfg.usage_window, len(run.codebook.batch_distinct)))
            grid = run.autoenc.encode(val_images[: cfg.eval_batch])
            recon = run.autoenc.decode_eval(quantize(grid, run.codebook, record=False).zq)
            quality = reconstruction_metrics(val_images[: cfg.eval_batch], recon)
            sep = separability_stats(grid, axis)
            rows.append({
                "axis": axis,
                "codebook_size": int(size),
                "lifetime_utilization": life["utilization"],
                "lifetime_distinct": life["distinct"],
                "recent_utilization": recent["utilization"],
                "mse": quality["mse"],
                "psnr": quality["psnr"],
                "ssim": quality["ssim"],
                "intra_image_dist": sep["intra_image_dist"],
                "inter_image_dist": sep["inter_image_dist"],
                "overlap_ratio": sep["overlap_ratio"],
            })
    report = ComparisonReport(rows, meta={
        "seed": cfg.seed,
        "steps": cfg.steps,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
    })
    if out is not None:
        report.write(out)
    return report
