"""Tokenizer structure: patch layout, grid views, autoencoder, composite loss."""

import numpy as np
import pytest

from cvq.errors import ConfigError, ShapeError
from cvq.quantizer import Codebook, quantize_patchwise
from cvq.tensor import GradTape, Tensor, mean, mul, sum_
from cvq.tokenizer import (
    AXIS_CHANNEL,
    AXIS_PATCH,
    Autoencoder,
    LatentGrid,
    patchify,
    tokenizer_loss,
    unpatchify,
)

from test_tensor import fd_grad, rel_err


# ---------------------------------------------------------------------------
# patchify / unpatchify
# ---------------------------------------------------------------------------


def test_patchify_layout_by_construction():
    # encode the (patch row, patch col) identity into pixel values and check
    # each output row holds exactly its patch's pixels
    b, hh, ww, ch, f = 2, 4, 6, 1, 2
    img = np.zeros((b, hh, ww, ch))
    for bi in range(b):
        for y in range(hh):
            for x in range(ww):
                img[bi, y, x, 0] = 1000 * bi + 100 * (y // f) + 10 * (x // f) + (y % f) * f + (x % f)
    tok = patchify(Tensor(img), f)
    assert tok.shape == (b * 2 * 3, f * f * ch)
    for bi in range(b):
        for py in range(2):
            for px in range(3):
                row = tok.data[bi * 6 + py * 3 + px]
                assert np.array_equal(row, 1000 * bi + 100 * py + 10 * px + np.arange(4))


@pytest.mark.parametrize("f", [1, 2, 4])
def test_patchify_round_trip(f):
    rng = np.random.default_rng(f)
    img = rng.normal(size=(3, 8, 8, 3))
    tok = patchify(Tensor(img), f)
    back = unpatchify(tok, 3, 8 // f, 8 // f, f, 3)
    assert np.array_equal(back.data, img)


def test_patchify_divisibility_guard():
    with pytest.raises(ShapeError):
        patchify(Tensor(np.zeros((1, 5, 4, 1))), 2)


def test_patchify_gradient_is_permutation():
    rng = np.random.default_rng(1)
    img = Tensor(rng.normal(size=(1, 4, 4, 2)), requires_grad=True)
    weights = rng.normal(size=(4, 8))
    with GradTape() as tape:
        out = sum_(mul(patchify(img, 2), Tensor(weights)))
        tape.backward(out)
    back = unpatchify(Tensor(weights), 1, 2, 2, 2, 2)
    assert np.array_equal(img.grad, back.data)


# ---------------------------------------------------------------------------
# LatentGrid views
# ---------------------------------------------------------------------------


def test_grid_views_are_transposes():
    rng = np.random.default_rng(2)
    data = rng.normal(size=(2, 3, 4, 5))
    grid = LatentGrid(Tensor(data))
    pv = grid.patch_vectors().data
    cv = grid.channel_vectors().data
    assert pv.shape == (2 * 12, 5) and cv.shape == (2 * 5, 12)
    for bi in range(2):
        for y in range(3):
            for x in range(4):
                assert np.array_equal(pv[bi * 12 + y * 4 + x], data[bi, y, x])
        for k in range(5):
            assert np.array_equal(cv[bi * 5 + k], data[bi, :, :, k].reshape(-1))


def test_grid_view_round_trips():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(2, 3, 4, 5))
    grid = LatentGrid(Tensor(data))
    back_p = LatentGrid.from_patch_vectors(grid.patch_vectors(), 2, 3, 4, 5)
    back_c = LatentGrid.from_channel_vectors(grid.channel_vectors(), 2, 3, 4, 5)
    assert np.array_equal(back_p.values.data, data)
    assert np.array_equal(back_c.values.data, data)


def test_grid_token_accounting():
    grid = LatentGrid(Tensor(np.zeros((2, 3, 4, 5))))
    assert grid.token_dim(AXIS_PATCH) == 5 and grid.tokens_per_image(AXIS_PATCH) == 12
    assert grid.token_dim(AXIS_CHANNEL) == 12 and grid.tokens_per_image(AXIS_CHANNEL) == 5
    with pytest.raises(ConfigError):
        grid.token_dim("pixel")
    with pytest.raises(ShapeError):
        LatentGrid(Tensor(np.zeros((2, 3, 4))))


# ---------------------------------------------------------------------------
# autoencoder
# ---------------------------------------------------------------------------


def small_autoencoder(seed=0, blocks=1):
    return Autoencoder(8, 8, 3, f=4, latent_channels=6, hidden=10, blocks=blocks, rng=np.random.default_rng(seed))


def test_autoencoder_shapes():
    ae = small_autoencoder()
    img = np.random.default_rng(0).uniform(size=(2, 8, 8, 3))
    with GradTape():
        grid = ae.encode(img)
        out = ae.decode(grid)
    assert (grid.batch, grid.h, grid.w, grid.c) == (2, 2, 2, 6)
    assert out.shape == (2, 8, 8, 3)


def test_encoder_is_patch_local():
    # identical pixel patches produce bitwise-identical latent vectors no
    # matter where they sit: the codebook-redundancy story depends on this
    ae = small_autoencoder()
    rng = np.random.default_rng(4)
    patch = rng.uniform(size=(4, 4, 3))
    img = np.zeros((1, 8, 8, 3))
    img[0, :4, :4] = patch
    img[0, 4:, 4:] = patch
    img[0, :4, 4:] = rng.uniform(size=(4, 4, 3))
    img[0, 4:, :4] = rng.uniform(size=(4, 4, 3))
    grid = ae.encode(img)
    assert np.array_equal(grid.values.data[0, 0, 0], grid.values.data[0, 1, 1])
    assert not np.array_equal(grid.values.data[0, 0, 0], grid.values.data[0, 0, 1])


def test_init_bounds_and_zero_final_bias():
    ae = small_autoencoder()
    assert np.all(np.abs(ae.enc_in.w.data) <= 1.0 / np.sqrt(48))
    assert np.all(ae.dec_out.b.data == 0.0)
    # zero latent decodes to a constant per patch position (bias-only path
    # is zero, blocks add their input back)
    grid = LatentGrid(Tensor(np.zeros((1, 2, 2, 6))))
    with GradTape():
        out = ae.decode(grid)
    assert np.array_equal(out.data[0, :4, :4], out.data[0, 4:, 4:])


def test_named_params_cover_params():
    ae = small_autoencoder(blocks=2)
    named = ae.named_params()
    assert len(named) == len(ae.params())
    assert len({n for n, _ in named}) == len(named)
    for (name, p), q in zip(named, ae.params()):
        assert p is q


def test_image_guards():
    ae = small_autoencoder()
    with pytest.raises(ShapeError):
        ae.encode(np.zeros((1, 8, 8, 1)))
    with pytest.raises(ShapeError):
        ae.encode(np.full((1, 8, 8, 3), 1.5))
    with pytest.raises(ConfigError):
        Autoencoder(9, 8, 3, f=4, latent_channels=4, hidden=8, blocks=1, rng=np.random.default_rng(0))


def test_autoencoder_gradients_match_finite_differences():
    # end-to-end reconstruction MSE through encode+decode (no quantizer on
    # this path, so the objective is smooth in every parameter)
    ae = small_autoencoder(blocks=1)
    img = np.random.default_rng(5).uniform(0.1, 0.9, size=(2, 8, 8, 3))

    def loss_value():
        with GradTape():
            grid = ae.encode(img)
            out = ae.decode(grid)
            diff = sum_(mul(out, out))
        return diff.item()

    with GradTape() as tape:
        grid = ae.encode(img)
        out = ae.decode(grid)
        tape.backward(sum_(mul(out, out)))

    checked = 0
    for name, p in ae.named_params():
        if p.grad is None:
            continue
        fd = fd_grad(loss_value, p.data)
        assert rel_err(p.grad, fd) < 1e-3, name
        checked += 1
    assert checked == len(ae.params())


# ---------------------------------------------------------------------------
# composite loss
# ---------------------------------------------------------------------------


def quantized_pair(seed=6):
    rng = np.random.default_rng(seed)
    grid = LatentGrid(Tensor(rng.normal(size=(2, 2, 2, 3)), requires_grad=True))
    cb = Codebook(axis=AXIS_PATCH, entries=Tensor(rng.normal(size=(4, 3)), requires_grad=True))
    x = Tensor(rng.uniform(size=(2, 4, 4, 3)))
    x_hat = Tensor(rng.uniform(size=(2, 4, 4, 3)), requires_grad=True)
    return x, x_hat, grid, cb


def test_tokenizer_loss_hand_sum():
    x, x_hat, grid, cb = quantized_pair()
    with GradTape():
        quant = quantize_patchwise(grid, cb, record=False)
        total, comp = tokenizer_loss(x, x_hat, quant, beta=0.25)
    want_mse = np.mean((x.data - x_hat.data) ** 2)
    assert comp["mse"] == pytest.approx(want_mse)
    assert total.item() == pytest.approx(want_mse + comp["codebook"] + 0.25 * comp["commitment"])
    assert comp["lpips"] == 0.0 and comp["gan"] == 0.0
    assert comp["total"] == total.item()


def test_tokenizer_loss_with_plugins():
    x, x_hat, grid, cb = quantized_pair()
    with GradTape():
        quant = quantize_patchwise(grid, cb, record=False)
        lpips = lambda a, b: mean(mul(a, b))  # any scalar tensor fn works as a stub
        gan = lambda y: mean(mul(y, y))
        total, comp = tokenizer_loss(
            x, x_hat, quant, beta=0.5, lpips_fn=lpips, gan_fn=gan, lambda_lpips=2.0, lambda_gan=0.3
        )
    base = comp["mse"] + comp["codebook"] + 0.5 * comp["commitment"]
    assert total.item() == pytest.approx(base + 2.0 * comp["lpips"] + 0.3 * comp["gan"])
    assert comp["lambda_gan"] == 0.3


def test_tokenizer_loss_shape_guard():
    x, x_hat, grid, cb = quantized_pair()
    with GradTape():
        quant = quantize_patchwise(grid, cb, record=False)
        with pytest.raises(ShapeError):
            tokenizer_loss(x, Tensor(np.zeros((1, 4, 4, 3))), quant)
