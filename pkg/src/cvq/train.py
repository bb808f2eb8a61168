"""Training loops, run logging, and checkpoint serialization.

Determinism contract: everything a run does derives from ``cfg.seed``
through named RNG streams with a fixed spawn order.  Dropout branch draws
get their own stream, so an alpha=0 run consumes exactly the same draws
from every other stream as a dropout-free run and produces bit-identical
results.  Logs are append-only CSVs flushed per step with repr-formatted
floats, so re-running a config reproduces them byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cvq.car import CarModel
from cvq.config import RunConfig
from cvq.errors import ConfigError, DataError
from cvq.nested_dropout import DropoutSchedule, hybrid_step_loss
from cvq.ntb import read_ntb, write_ntb
from cvq.optim import Adam
from cvq.quantizer import Codebook, quantize
from cvq.tensor import GradTape, Tensor
from cvq.tokenizer import Autoencoder

_STREAM_NAMES = ("init", "codebook", "data", "dropout", "car_init", "car_data", "sample")


def derive_streams(seed: int) -> dict:
    """Named, order-stable RNG streams spawned from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(_STREAM_NAMES))
    return {name: np.random.Generator(np.random.PCG64(ss)) for name, ss in zip(_STREAM_NAMES, children)}


def iter_batches(count: int, batch_size: int, rng: np.random.Generator):
    """Endless shuffled epochs of full batches (remainders dropped)."""
    if count < batch_size:
        raise ConfigError(f"dataset of {count} items cannot fill a batch of {batch_size}")
    while True:
        perm = rng.permutation(count)
        for start in range(0, count - batch_size + 1, batch_size):
            yield perm[start : start + batch_size]


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


class CsvLog:
    """Append-only CSV with a fixed column order, flushed on every row."""

    def __init__(self, path: Path, columns):
        self.columns = list(columns)
        self._fh = open(path, "w")
        self._fh.write(",".join(self.columns) + "\n")
        self._fh.flush()

    def row(self, values: dict) -> None:
        self._fh.write(",".join(_fmt(values[c]) for c in self.columns) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# tokenizer training
# ---------------------------------------------------------------------------


@dataclass
class TokenizerRun:
    autoenc: Autoencoder
    codebook: Codebook
    config: RunConfig
    checkpoint_dir: Path | None


def train_tokenizer(cfg: RunConfig, images: np.ndarray, out_dir: str | Path | None = None) -> TokenizerRun:
    """Train the quantized autoencoder on a stack of [B, H, W, ch] images.

    The codebook initializes from the very first training batch's token
    vectors, then learns purely by gradient.  With ``out_dir`` set, writes
    logs/{losses,usage,dropout}.csv and checkpoint/.
    """
    streams = derive_streams(cfg.seed)
    autoenc = Autoencoder(
        cfg.image_height, cfg.image_width, cfg.image_channels,
        cfg.downsample, cfg.latent_channels, cfg.hidden, cfg.blocks,
        streams["init"],
    )
    schedule = DropoutSchedule(cfg.alpha, cfg.latent_channels, cfg.eta, cfg.lambda0)
    batches = iter_batches(images.shape[0], cfg.batch_size, streams["data"])

    logs = {}
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        (out / "logs").mkdir(parents=True, exist_ok=True)
        logs["losses"] = CsvLog(out / "logs" / "losses.csv",
                                ["step", "total", "mse", "codebook", "commitment", "lpips", "gan"])
        logs["usage"] = CsvLog(out / "logs" / "usage.csv",
                               ["step", "utilization", "distinct", "dead", "batch_distinct"])
        logs["dropout"] = CsvLog(out / "logs" / "dropout.csv",
                                 ["step", "branch", "c_keep", "lambda_gan"])

    codebook = None
    adam = None
    try:
        for step in range(cfg.steps):
            idx = next(batches)
            x = Tensor(images[idx])
            if codebook is None:
                first_grid = autoenc.encode(x)
                codebook = Codebook.init_from_vectors(
                    cfg.axis, cfg.codebook_size, first_grid.vectors(cfg.axis).data, streams["codebook"]
                )
                adam = Adam(
                    autoenc.params() + [codebook.entries],
                    lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                    weight_decay=cfg.weight_decay,
                )
            with GradTape() as tape:
                grid = autoenc.encode(x)
                total, comp = hybrid_step_loss(
                    x, grid, codebook, autoenc, schedule, streams["dropout"],
                    beta=cfg.beta, lambda_lpips=cfg.lambda_lpips,
                    compat_patch_mask=cfg.patch_mask_compat,
                )
                tape.backward(total)
            adam.step()
            adam.zero_grad()

            if logs:
                logs["losses"].row({"step": step, **{k: comp[k] for k in
                                    ("total", "mse", "codebook", "commitment", "lpips", "gan")}})
                distinct = int(np.count_nonzero(codebook.lifetime_counts))
                logs["usage"].row({
                    "step": step,
                    "utilization": distinct / codebook.n,
                    "distinct": distinct,
                    "dead": codebook.n - distinct,
                    "batch_distinct": int(codebook.batch_distinct[-1].size),
                })
                logs["dropout"].row({"step": step, "branch": comp["branch"],
                                     "c_keep": comp["c_keep"], "lambda_gan": comp["lambda_gan"]})
    finally:
        for log in logs.values():
            log.close()

    ckpt = None
    if out is not None:
        ckpt = out / "checkpoint"
        save_tokenizer(ckpt, autoenc, codebook, cfg)
    return TokenizerRun(autoenc, codebook, cfg, ckpt)


def save_tokenizer(ckpt_dir: str | Path, autoenc: Autoencoder, codebook: Codebook, cfg: RunConfig) -> None:
    out = Path(ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = {}
    for i, (name, tensor) in enumerate(autoenc.named_params()):
        fname = f"param_{i:03d}.ntb"
        write_ntb(out / fname, tensor.data)
        params[name] = fname
    write_ntb(out / "codebook.ntb", codebook.entries.data)
    write_ntb(out / "lifetime_counts.ntb", codebook.lifetime_counts.astype(np.float64))
    write_json(out / "manifest.json", {
        "kind": "tokenizer-checkpoint",
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "params": params,
        "codebook": {"axis": codebook.axis, "size": codebook.n, "dim": codebook.dim,
                     "entries": "codebook.ntb", "lifetime_counts": "lifetime_counts.ntb"},
    })


def _read_manifest(ckpt_dir: Path, expected_kind: str) -> dict:
    mpath = ckpt_dir / "manifest.json"
    if not mpath.is_file():
        raise DataError(f"no checkpoint manifest at {mpath}")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt checkpoint manifest {mpath}: {exc}") from None
    if manifest.get("kind") != expected_kind:
        raise DataError(f"{mpath} holds {manifest.get('kind')!r}, expected {expected_kind!r}")
    return manifest


def _load_params(ckpt_dir: Path, named_params, file_map: dict) -> None:
    for name, tensor in named_params:
        if name not in file_map:
            raise DataError(f"checkpoint is missing parameter {name!r}")
        data = read_ntb(ckpt_dir / file_map[name])
        if data.shape != tensor.shape:
            raise DataError(f"parameter {name!r} has shape {data.shape}, model expects {tensor.shape}")
        tensor.data = data


def load_tokenizer(ckpt_dir: str | Path):
    """Rebuild (autoenc, codebook, cfg) from a tokenizer checkpoint."""
    root = Path(ckpt_dir)
    manifest = _read_manifest(root, "tokenizer-checkpoint")
    cfg = RunConfig.from_dict(manifest["config"])
    autoenc = Autoencoder(
        cfg.image_height, cfg.image_width, cfg.image_channels,
        cfg.downsample, cfg.latent_channels, cfg.hidden, cfg.blocks,
        np.random.default_rng(0),
    )
    _load_params(root, autoenc.named_params(), manifest["params"])
    meta = manifest["codebook"]
    entries = read_ntb(root / meta["entries"])
    if entries.shape != (meta["size"], meta["dim"]):
        raise DataError(f"codebook entries shape {entries.shape} contradicts manifest {meta}")
    codebook = Codebook(
        axis=meta["axis"],
        entries=Tensor(entries, requires_grad=True),
        lifetime_counts=read_ntb(root / meta["lifetime_counts"]).astype(np.int64),
    )
    return autoenc, codebook, cfg


# ---------------------------------------------------------------------------
# token extraction
# ---------------------------------------------------------------------------


def extract_tokens(
    autoenc: Autoencoder,
    codebook: Codebook,
    cfg: RunConfig,
    images: np.ndarray,
    labels: np.ndarray,
    out_dir: str | Path | None = None,
):
    """Tokenize a corpus in storage order. Returns (tokens [count, L], labels).

    With ``out_dir``, writes tokens.ntb / labels.ntb / codewords.ntb and a
    manifest so the generator stage is self-contained.
    """
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    chunks = []
    for start in range(0, images.shape[0], cfg.eval_batch):
        grid = autoenc.encode(images[start : start + cfg.eval_batch])
        chunks.append(quantize(grid, codebook, record=False).indices)
    tokens = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 0), dtype=np.int64)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_ntb(out / "tokens.ntb", tokens.astype(np.float64))
        write_ntb(out / "labels.ntb", np.asarray(labels, dtype=np.float64))
        write_ntb(out / "codewords.ntb", codebook.entries.data)
        write_json(out / "manifest.json", {
            "kind": "cvq-tokens",
            "axis": codebook.axis,
            "codebook_size": codebook.n,
            "token_dim": codebook.dim,
            "seq_len": int(tokens.shape[1]) if tokens.size else 0,
            "count": int(tokens.shape[0]),
            "num_classes": cfg.num_classes,
            "config": cfg.to_dict(),
            "config_hash": cfg.config_hash(),
        })
    return tokens, np.asarray(labels, dtype=np.int64)


def load_tokens(tokens_dir: str | Path):
    """Read a token dataset: (tokens, labels, codewords, manifest)."""
    root = Path(tokens_dir)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DataError(f"no token manifest at {mpath}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "cvq-tokens":
        raise DataError(f"{mpath} is not a token dataset manifest")
    tokens = read_ntb(root / "tokens.ntb").astype(np.int64)
    labels = read_ntb(root / "labels.ntb").astype(np.int64)
    codewords = read_ntb(root / "codewords.ntb")
    if tokens.shape[0] != labels.shape[0]:
        raise DataError("token/label count mismatch in dataset")
    return tokens, labels, codewords, manifest


# ---------------------------------------------------------------------------
# autoregressive generator training
# ---------------------------------------------------------------------------


@dataclass
class CarRun:
    model: CarModel
    codewords: np.ndarray
    config: RunConfig
    checkpoint_dir: Path | None


def train_car(
    cfg: RunConfig,
    tokens: np.ndarray,
    labels: np.ndarray,
    codewords: np.ndarray,
    out_dir: str | Path | None = None,
) -> CarRun:
    """Train next-token prediction over channel sequences (AdamW)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    codewords = np.asarray(codewords, dtype=np.float64)
    streams = derive_streams(cfg.seed)
    model = CarModel(
        vocab=codewords.shape[0],
        seq_len=tokens.shape[1],
        token_dim=codewords.shape[1],
        num_classes=cfg.num_classes,
        d_model=cfg.car_dim,
        layers=cfg.car_layers,
        heads=cfg.car_heads,
        rng=streams["car_init"],
        input_mode=cfg.car_input_mode,
        mlp_ratio=cfg.car_mlp_ratio,
    )
    adam = Adam(
        model.params(),
        lr=cfg.car_lr, beta1=cfg.car_beta1, beta2=cfg.car_beta2,
        weight_decay=cfg.car_weight_decay, decoupled=True,
    )
    batches = iter_batches(tokens.shape[0], cfg.car_batch, streams["car_data"])

    log = None
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        (out / "logs").mkdir(parents=True, exist_ok=True)
        log = CsvLog(out / "logs" / "car_losses.csv", ["step", "nll", "accuracy"])
    try:
        for step in range(cfg.car_steps):
            idx = next(batches)
            with GradTape() as tape:
                nll, acc = model.loss(tokens[idx], labels[idx], codewords)
                tape.backward(nll)
            adam.step()
            adam.zero_grad()
            if log:
                log.row({"step": step, "nll": nll.item(), "accuracy": acc})
    finally:
        if log:
            log.close()

    ckpt = None
    if out is not None:
        ckpt = out / "checkpoint"
        save_car(ckpt, model, codewords, cfg)
    return CarRun(model, codewords, cfg, ckpt)


def save_car(ckpt_dir: str | Path, model: CarModel, codewords: np.ndarray, cfg: RunConfig) -> None:
    out = Path(ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = {}
    for i, (name, tensor) in enumerate(model.named_params()):
        fname = f"param_{i:03d}.ntb"
        write_ntb(out / fname, tensor.data)
        params[name] = fname
    write_ntb(out / "codewords.ntb", np.asarray(codewords, dtype=np.float64))
    write_json(out / "manifest.json", {
        "kind": "car-checkpoint",
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "params": params,
        "model": {
            "vocab": model.vocab, "seq_len": model.seq_len, "token_dim": model.token_dim,
            "num_classes": model.num_classes, "codewords": "codewords.ntb",
        },
    })


def load_car(ckpt_dir: str | Path):
    """Rebuild (model, codewords, cfg) from a generator checkpoint."""
    root = Path(ckpt_dir)
    manifest = _read_manifest(root, "car-checkpoint")
    cfg = RunConfig.from_dict(manifest["config"])
    meta = manifest["model"]
    model = CarModel(
        vocab=meta["vocab"],
        seq_len=meta["seq_len"],
        token_dim=meta["token_dim"],
        num_classes=meta["num_classes"],
        d_model=cfg.car_dim,
        layers=cfg.car_layers,
        heads=cfg.car_heads,
        rng=np.random.default_rng(0),
        input_mode=cfg.car_input_mode,
        mlp_ratio=cfg.car_mlp_ratio,
    )
    _load_params(root, model.named_params(), manifest["params"])
    codewords = read_ntb(root / meta["codewords"])
    return model, codewords, cfg
