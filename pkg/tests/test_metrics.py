"""Reconstruction metrics, progressive sweep, and ablation mechanics."""

import numpy as np
import pytest

from cvq.errors import ConfigError, DataError, ShapeError
from cvq.metrics import (
    ComparisonReport,
    SweepReport,
    channel_ablation,
    progressive_sweep,
    psnr,
    reconstruction_metrics,
    ssim,
)
from cvq.quantizer import Codebook, quantize_channelwise
from cvq.tensor import Tensor
from cvq.tokenizer import AXIS_CHANNEL, Autoencoder


# ---------------------------------------------------------------------------
# psnr
# ---------------------------------------------------------------------------


def test_psnr_exact_match_hits_cap():
    img = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert psnr(img, img.copy()) == 99.0


def test_psnr_closed_form():
    # constant offset 0.1 -> mse 0.01 -> 20 dB
    a = np.full((4, 4), 0.5)
    b = np.full((4, 4), 0.6)
    assert psnr(a, b) == pytest.approx(-10.0 * np.log10(0.01), rel=1e-12)
    assert psnr(a, b) == pytest.approx(20.0)


def test_psnr_decreasing_in_mse():
    a = np.full((4, 4), 0.5)
    values = [psnr(a, np.full((4, 4), 0.5 + d)) for d in (0.05, 0.1, 0.2, 0.4)]
    assert all(u > v for u, v in zip(values, values[1:]))


def test_metric_input_guards():
    with pytest.raises(ShapeError):
        psnr(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(DataError):
        psnr(np.full((2, 2), 1.5), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        psnr(np.zeros((0, 2)), np.zeros((0, 2)))


# ---------------------------------------------------------------------------
# ssim
# ---------------------------------------------------------------------------


def test_ssim_identical_is_exactly_one():
    img = np.random.default_rng(1).uniform(size=(16, 16, 3))
    assert ssim(img, img.copy()) == 1.0


def test_ssim_constant_images_closed_form():
    # constant blocks: variances and covariance vanish, leaving
    # (2ab + c1) / (a^2 + b^2 + c1)
    a_val, b_val = 0.3, 0.7
    a = np.full((8, 8), a_val)
    b = np.full((8, 8), b_val)
    c1 = 0.01**2
    want = (2 * a_val * b_val + c1) / (a_val**2 + b_val**2 + c1)
    assert ssim(a, b) == pytest.approx(want, rel=1e-12)


def test_ssim_less_than_one_when_different():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(16, 16))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    assert ssim(a, b) < 1.0


def test_ssim_window_guards():
    img = np.zeros((8, 8))
    with pytest.raises(ShapeError):
        ssim(img, img, window=9)
    with pytest.raises(ShapeError):
        ssim(img, img, window=0)
    with pytest.raises(ShapeError):
        ssim(np.zeros((2, 2, 2, 2)), np.zeros((2, 2, 2, 2)))


def test_ssim_ignores_edge_remainders():
    # an 11x11 image with window 8 uses only the top-left 8x8 block
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(11, 11))
    b = rng.uniform(size=(11, 11))
    full = ssim(a, b, window=8)
    cropped = ssim(a[:8, :8], b[:8, :8], window=8)
    assert full == cropped


def test_reconstruction_metrics_batch_mean():
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(3, 8, 8, 1))
    b = rng.uniform(size=(3, 8, 8, 1))
    out = reconstruction_metrics(a, b)
    assert out["psnr"] == pytest.approx(np.mean([psnr(a[i], b[i]) for i in range(3)]))
    assert out["mse"] == pytest.approx(np.mean((a - b) ** 2))
    with pytest.raises(ShapeError):
        reconstruction_metrics(a[0], b[0])


# ---------------------------------------------------------------------------
# progressive sweep
# ---------------------------------------------------------------------------


def sweep_setup(seed=5):
    rng = np.random.default_rng(seed)
    ae = Autoencoder(8, 8, 3, f=4, latent_channels=6, hidden=8, blocks=0, rng=rng)
    cb = Codebook(axis=AXIS_CHANNEL, entries=Tensor(rng.normal(size=(12, 4)), requires_grad=True))
    images = np.random.default_rng(seed + 1).uniform(size=(5, 8, 8, 3))
    return ae, cb, images


def test_sweep_rows_and_full_length_consistency():
    ae, cb, images = sweep_setup()
    report = progressive_sweep(ae, cb, images, [1, 3, 6], batch_size=2, window=4)
    assert [r["n_channels"] for r in report.rows] == [1, 3, 6]
    # full-length row must equal direct quantized reconstruction metrics
    grid = ae.encode(images)
    recon = ae.decode_eval(quantize_channelwise(grid, cb, record=False).zq)
    direct = reconstruction_metrics(images, recon, window=4)
    full_row = report.rows[-1]
    assert full_row["psnr"] == pytest.approx(direct["psnr"], rel=1e-12)
    assert full_row["mse"] == pytest.approx(direct["mse"], rel=1e-12)


def test_sweep_batch_size_invariance():
    ae, cb, images = sweep_setup()
    a = progressive_sweep(ae, cb, images, [2, 4], batch_size=1, window=4)
    b = progressive_sweep(ae, cb, images, [2, 4], batch_size=64, window=4)
    for ra, rb in zip(a.rows, b.rows):
        assert ra["psnr"] == pytest.approx(rb["psnr"], rel=1e-12)


def test_sweep_guards():
    ae, cb, images = sweep_setup()
    with pytest.raises(ConfigError):
        progressive_sweep(ae, cb, images, [])
    with pytest.raises(ConfigError):
        progressive_sweep(ae, cb, images, [3, 2])
    with pytest.raises(ConfigError):
        progressive_sweep(ae, cb, images, [0, 2])
    with pytest.raises(ConfigError):
        progressive_sweep(ae, cb, images, [1, 7])
    patch_cb = Codebook(axis="patch", entries=Tensor(np.zeros((4, 6))))
    with pytest.raises(ConfigError):
        progressive_sweep(ae, patch_cb, images, [1])


def test_sweep_report_csv(tmp_path):
    report = SweepReport(rows=[{"n_channels": 1, "psnr": 10.0, "ssim": 0.5, "mse": 0.1}])
    report.write_csv(tmp_path / "sweep.csv")
    text = (tmp_path / "sweep.csv").read_text().strip().splitlines()
    assert text[0] == "n_channels,psnr,ssim,mse"
    assert text[1].startswith("1,10.0,0.5,0.1")


# ---------------------------------------------------------------------------
# channel ablation
# ---------------------------------------------------------------------------


def test_ablation_zero_contribution_channel_is_noop():
    ae, cb, images = sweep_setup()
    # truncate to 3 channels: channels 4..6 of the quantized grid are zero,
    # so ablating channel 5 changes nothing
    out = channel_ablation(ae, cb, images, channel=5, c_keep=3)
    assert np.array_equal(out["baseline"], out["ablated"])
    assert np.all(out["diff"] == 0.0)
    assert np.all(out["energy"] == 0.0)


def test_ablation_live_channel_changes_output():
    ae, cb, images = sweep_setup()
    out = channel_ablation(ae, cb, images, channel=1)
    assert out["baseline"].shape == images.shape
    assert np.any(out["diff"] != 0.0)
    assert np.all(out["energy"] >= 0.0) and out["energy"].sum() > 0


def test_ablation_deterministic():
    ae, cb, images = sweep_setup()
    a = channel_ablation(ae, cb, images, channel=2)
    b = channel_ablation(ae, cb, images, channel=2)
    assert np.array_equal(a["energy"], b["energy"])
    assert np.array_equal(a["diff"], b["diff"])


def test_ablation_guards():
    ae, cb, images = sweep_setup()
    with pytest.raises(ConfigError):
        channel_ablation(ae, cb, images, channel=0)
    with pytest.raises(ConfigError):
        channel_ablation(ae, cb, images, channel=7)
    patch_cb = Codebook(axis="patch", entries=Tensor(np.zeros((4, 6))))
    with pytest.raises(ConfigError):
        channel_ablation(ae, patch_cb, images, channel=1)


# ---------------------------------------------------------------------------
# comparison report plumbing (the full harness is exercised in acceptance)
# ---------------------------------------------------------------------------


def test_comparison_report_cell_lookup_and_write(tmp_path):
    rows = [
        dict.fromkeys(ComparisonReport.COLUMNS, 0.0) | {"axis": "patch", "codebook_size": 64},
        dict.fromkeys(ComparisonReport.COLUMNS, 0.0) | {"axis": "channel", "codebook_size": 64},
    ]
    report = ComparisonReport(rows, meta={"seed": 0})
    assert report.cell("channel", 64)["axis"] == "channel"
    with pytest.raises(KeyError):
        report.cell("patch", 512)
    report.write(tmp_path)
    header = (tmp_path / "comparison.csv").read_text().splitlines()[0]
    assert header == ",".join(ComparisonReport.COLUMNS)
    assert (tmp_path / "comparison.json").is_file()
