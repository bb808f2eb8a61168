"""Command-line pipeline driver.

Every subcommand resolves its configuration the same way: package defaults,
then ``--config FILE`` (JSON), then individual flags.  The resolved config
is echoed to ``<out>/config.json`` so any run directory can be reproduced
by re-running against its own echo.  Failures print one machine-parseable
line ``error[<class>]: <message>`` to stderr and exit nonzero.

Environment knobs: ``CVQ_THREADS`` caps BLAS/numba threads (set to 1 for
bit-reproducible runs), ``CVQ_NUMBA`` selects the kernel backend
(``0``/``1``/``auto``).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

import cvq
from cvq import metrics as M
from cvq import train as T
from cvq.car import progressive_decode
from cvq.config import RunConfig
from cvq.data import CorpusSpec, generate_corpus, ingest_directory, load_corpus, write_pnm
from cvq.errors import ConfigError, CvqError, DataError
from cvq.ntb import write_ntb

_DEFAULTS = RunConfig()


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _parse_list(text: str) -> list:
    items = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        items.append(int(part) if part.lstrip("-").isdigit() else part)
    return items


def _parse_labels(text: str) -> list:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"labels must be comma-separated integers, got {text!r}")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", help="JSON config file; flags override its values")
    group = parser.add_argument_group("config overrides")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(_DEFAULTS, f.name)
        kwargs = {"default": argparse.SUPPRESS, "dest": f.name}
        if f.type == "bool":
            kwargs.update(type=_parse_bool, metavar="BOOL")
        elif f.type == "list":
            kwargs.update(type=_parse_list, metavar="CSV")
            default = ",".join(str(v) for v in default)
        elif f.type == "int":
            kwargs.update(type=int, metavar="N")
        elif f.type == "float":
            kwargs.update(type=float, metavar="X")
        else:
            kwargs.update(type=str, metavar="S")
        group.add_argument(flag, help=f"[default: {default}]", **kwargs)


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if hasattr(args, f.name)}
    return cfg.updated(**overrides) if overrides else cfg


def _prepare_out(out: str, cfg: RunConfig) -> Path:
    path = Path(out)
    if (path / "config.json").exists():
        raise ConfigError(f"run directory {path} already holds a config.json; refusing to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    cfg.save(path / "config.json")
    return path


def _load_split(data_dir: str):
    images, labels, train_ids, val_ids, manifest = load_corpus(data_dir)
    return images, labels, train_ids, val_ids, manifest


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args.out, cfg)
    spec = CorpusSpec(
        kind=cfg.corpus_kind, count=cfg.corpus_count,
        height=cfg.image_height, width=cfg.image_width, channels=cfg.image_channels,
        classes=cfg.num_classes, seed=cfg.seed, val_fraction=cfg.val_fraction,
    )
    if args.ingest:
        _, _, summary = ingest_directory(args.ingest, spec, out)
        print(f"ingested {summary['ingested']}/{summary['scanned']} images into {out}")
        for failure in summary["failed"]:
            print(f"  skipped {failure['file']}: {failure['reason']}")
    else:
        images, labels, train_ids, val_ids, _ = generate_corpus(spec, out)
        print(f"generated {images.shape[0]} images "
              f"({train_ids.size} train / {val_ids.size} val) into {out}")
    return 0


def _cmd_train_tokenizer(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args.out, cfg)
    images, _, train_ids, _, _ = _load_split(args.data)
    run = T.train_tokenizer(cfg, images[train_ids], out)
    from cvq.quantizer import usage_stats

    usage = usage_stats(run.codebook)
    print(f"trained tokenizer for {cfg.steps} steps; "
          f"lifetime utilization {usage['utilization']:.3f} "
          f"({usage['distinct']}/{usage['codebook_size']} codewords); "
          f"checkpoint at {run.checkpoint_dir}")
    return 0


def _cmd_extract_tokens(args) -> int:
    cfg_cli = _resolve_config(args)
    out = _prepare_out(args.out, cfg_cli)
    autoenc, codebook, cfg = T.load_tokenizer(Path(args.checkpoint))
    images, labels, train_ids, val_ids, _ = _load_split(args.data)
    tokens, _ = T.extract_tokens(autoenc, codebook, cfg, images, labels, out)
    manifest_path = out / "manifest.json"
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    manifest["train_ids"] = [int(i) for i in train_ids]
    manifest["val_ids"] = [int(i) for i in val_ids]
    T.write_json(manifest_path, manifest)
    print(f"extracted {tokens.shape[0]} sequences of {tokens.shape[1]} tokens into {out}")
    return 0


def _cmd_train_car(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args.out, cfg)
    tokens, labels, codewords, manifest = T.load_tokens(args.tokens)
    cfg = cfg.updated(num_classes=int(manifest["num_classes"]))
    train_ids = np.asarray(manifest.get("train_ids", list(range(tokens.shape[0]))), dtype=np.int64)
    run = T.train_car(cfg, tokens[train_ids], labels[train_ids], codewords, out)
    print(f"trained generator for {cfg.car_steps} steps on {train_ids.size} sequences; "
          f"checkpoint at {run.checkpoint_dir}")
    return 0


def _cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args.out, cfg)
    model, codewords, _ = T.load_car(Path(args.car))
    autoenc, codebook, _ = T.load_tokenizer(Path(args.checkpoint))
    if args.labels is not None:
        labels = np.asarray(args.labels, dtype=np.int64)
    else:
        labels = np.arange(cfg.gen_count, dtype=np.int64) % model.num_classes
    rng = T.derive_streams(cfg.seed)["sample"]
    top_k = None if cfg.top_k == 0 else cfg.top_k
    tokens = model.generate(labels, codewords, rng, temperature=cfg.temperature, top_k=top_k)
    k = args.channels if args.channels is not None else model.seq_len
    images = progressive_decode(tokens[:, :k], codebook, autoenc)
    for i in range(images.shape[0]):
        write_pnm(out / f"gen_{i:03d}_class{int(labels[i])}.ppm", images[i])
    write_ntb(out / "tokens.ntb", tokens.astype(np.float64))
    print(f"sampled {images.shape[0]} images (first {k}/{model.seq_len} channels decoded) into {out}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args.out, cfg)
    autoenc, codebook, tok_cfg = T.load_tokenizer(Path(args.checkpoint))
    images, _, _, val_ids, _ = _load_split(args.data)
    val = images[val_ids][: cfg.eval_batch]
    counts = [n for n in cfg.sweep_channels if n <= autoenc.c]
    report = M.progressive_sweep(autoenc, codebook, val, counts, batch_size=cfg.eval_batch)
    report.meta = {"config_hash": tok_cfg.config_hash(), "images": int(val.shape[0])}
    report.write_csv(out / "sweep.csv")
    T.write_json(out / "sweep.json", {"meta": report.meta, "rows": report.rows})
    for row in report.rows:
        print(f"n={row['n_channels']:3d}  psnr={row['psnr']:6.2f} dB  "
              f"ssim={row['ssim']:.4f}  mse={row['mse']:.6f}")
    return 0


def _cmd_compare(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args.out, cfg)
    images, _, train_ids, val_ids, _ = _load_split(args.data)
    report = M.run_comparison(cfg, images[train_ids], images[val_ids], out)
    for row in report.rows:
        print(f"{row['axis']:7s} N={row['codebook_size']:4d}  "
              f"lifetime util {row['lifetime_utilization']:.3f}  "
              f"psnr {row['psnr']:6.2f} dB  overlap {row['overlap_ratio']:.3f}")
    return 0


def _cmd_ablate_channel(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args.out, cfg)
    autoenc, codebook, _ = T.load_tokenizer(Path(args.checkpoint))
    images, _, _, val_ids, _ = _load_split(args.data)
    batch = images[val_ids][: min(cfg.gen_count, val_ids.size)]
    if batch.shape[0] == 0:
        raise DataError("no validation images available for ablation")
    result = M.channel_ablation(autoenc, codebook, batch, args.channel)
    for i in range(batch.shape[0]):
        write_pnm(out / f"baseline_{i:03d}.ppm", result["baseline"][i])
        write_pnm(out / f"ablated_{i:03d}.ppm", result["ablated"][i])
        write_pnm(out / f"diff_{i:03d}.ppm", np.clip(0.5 + 0.5 * result["diff"][i], 0.0, 1.0))
    write_ntb(out / "diff.ntb", result["diff"])
    log = T.CsvLog(out / "energy.csv", ["image", "energy"])
    try:
        for i, e in enumerate(result["energy"]):
            log.row({"image": i, "energy": float(e)})
    finally:
        log.close()
    print(f"ablated channel {args.channel} over {batch.shape[0]} images; "
          f"mean diff energy {float(result['energy'].mean()):.6f}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args.out, cfg)
    autoenc, codebook, tok_cfg = T.load_tokenizer(Path(args.checkpoint))
    images, _, _, val_ids, _ = _load_split(args.data)
    val = images[val_ids][: cfg.eval_batch]
    if val.shape[0] < 2:
        raise DataError("evaluation needs at least 2 validation images")
    from cvq.quantizer import quantize, separability_stats

    grid = autoenc.encode(val)
    quant = quantize(grid, codebook, record=False)
    recon = autoenc.decode_eval(quant.zq)
    quality = M.reconstruction_metrics(val, recon)
    sep = separability_stats(grid, codebook.axis)
    distinct = int(np.unique(quant.indices).size)
    payload = {
        "axis": codebook.axis,
        "codebook_size": codebook.n,
        "val_images": int(val.shape[0]),
        "val_batch_distinct": distinct,
        "val_batch_utilization": distinct / codebook.n,
        "tokenizer_config_hash": tok_cfg.config_hash(),
        **quality,
        **sep,
    }
    T.write_json(out / "eval.json", payload)
    log = T.CsvLog(out / "metrics.csv", ["mse", "psnr", "ssim", "val_batch_utilization"])
    try:
        log.row(payload)
    finally:
        log.close()
    print(f"eval on {val.shape[0]} images: psnr {quality['psnr']:.2f} dB, "
          f"ssim {quality['ssim']:.4f}, batch utilization {payload['val_batch_utilization']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cvq",
        description="Channel-token image quantization pipeline: data, tokenizer, "
                    "generator, sampling, and evaluation.",
        epilog="Environment: CVQ_THREADS caps thread counts (1 = reproducible); "
               "CVQ_NUMBA picks the kernel backend (0, 1, or auto).",
    )
    parser.add_argument("--version", action="version", version=f"cvq {cvq.__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text, **extra_args):
        p = sub.add_parser(name, help=help_text, description=help_text)
        for flag, kwargs in extra_args.items():
            p.add_argument(flag, **kwargs)
        _add_config_flags(p)
        p.set_defaults(func=func)
        return p

    add("gen-data", _cmd_gen_data, "Synthesize a labeled image corpus (or ingest netpbm files)",
        **{"--out": {"required": True, "help": "corpus output directory"},
           "--ingest": {"metavar": "DIR", "help": "ingest .pgm/.ppm files from DIR instead of synthesizing"}})
    add("train-tokenizer", _cmd_train_tokenizer, "Train the quantized autoencoder on a corpus",
        **{"--data": {"required": True, "help": "corpus directory (from gen-data)"},
           "--out": {"required": True, "help": "run directory"}})
    add("extract-tokens", _cmd_extract_tokens, "Tokenize a corpus with a trained tokenizer",
        **{"--checkpoint": {"required": True, "help": "tokenizer checkpoint directory"},
           "--data": {"required": True, "help": "corpus directory"},
           "--out": {"required": True, "help": "token dataset output directory"}})
    add("train-car", _cmd_train_car, "Train the autoregressive generator on extracted tokens",
        **{"--tokens": {"required": True, "help": "token dataset directory"},
           "--out": {"required": True, "help": "run directory"}})
    add("generate", _cmd_generate, "Sample images class-conditionally from a trained generator",
        **{"--car": {"required": True, "help": "generator checkpoint directory"},
           "--checkpoint": {"required": True, "help": "tokenizer checkpoint directory"},
           "--out": {"required": True, "help": "output directory for sampled images"},
           "--labels": {"type": _parse_labels, "metavar": "CSV", "help": "explicit class labels to sample"},
           "--channels": {"type": int, "metavar": "K", "help": "decode only the first K channel tokens"}})
    add("sweep", _cmd_sweep, "Measure reconstruction quality vs. channel-token budget",
        **{"--checkpoint": {"required": True, "help": "tokenizer checkpoint directory"},
           "--data": {"required": True, "help": "corpus directory"},
           "--out": {"required": True, "help": "report output directory"}})
    add("compare", _cmd_compare, "Train patch-wise vs channel-wise cells and compare codebook usage",
        **{"--data": {"required": True, "help": "corpus directory"},
           "--out": {"required": True, "help": "report output directory"}})
    add("ablate-channel", _cmd_ablate_channel, "Reconstruct with one channel token zeroed out",
        **{"--checkpoint": {"required": True, "help": "tokenizer checkpoint directory"},
           "--data": {"required": True, "help": "corpus directory"},
           "--out": {"required": True, "help": "output directory"},
           "--channel": {"type": int, "required": True, "metavar": "K", "help": "1-based channel to ablate"}})
    add("eval", _cmd_eval, "Reconstruction metrics + token statistics on the validation split",
        **{"--checkpoint": {"required": True, "help": "tokenizer checkpoint directory"},
           "--data": {"required": True, "help": "corpus directory"},
           "--out": {"required": True, "help": "report output directory"}})
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CvqError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"error[internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
