"""Synthetic image corpus, PGM/PPM ingestion, and corpus serialization.

The default ("mixed") corpus is built to expose the token-redundancy
contrast the quantizer modules care about.  Every 8x8 pixel tile of every
image is drawn from a small discrete family — grid-aligned texture tiles
plus solid palette colors — so patch tokens repeat exactly within and
across images and patch-wise codebooks have only a few dozen distinct
targets.  The *arrangement* of those tiles (a class-specific sprite of
solid cells placed on the tile grid over a texture background, with
independently drawn colors and placement) varies combinatorially, so
whole-channel latent maps are almost never identical between images.
Labels cycle round-robin through the classes, giving a uniform class
histogram.  The "shapes" kind instead places smooth class shapes at
continuous position/size on solid backgrounds.

Corpora are stored as a directory of fixed-size tensor shards plus a JSON
manifest carrying the generation parameters, SHA-256 content hashes and the
train/validation split.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from cvq.errors import ConfigError, DataError
from cvq.ntb import read_ntb, write_ntb

SHARD_SIZE = 512
MANIFEST_NAME = "manifest.json"

CORPUS_KINDS = ("mixed", "shapes", "textures")


@dataclass(frozen=True)
class CorpusSpec:
    """Parameters that fully determine a synthetic corpus."""

    kind: str = "mixed"
    count: int = 5000
    height: int = 32
    width: int = 32
    channels: int = 3
    classes: int = 10
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.kind not in CORPUS_KINDS:
            raise ConfigError(f"unknown corpus kind {self.kind!r}; expected one of {CORPUS_KINDS}")
        if self.count < 0:
            raise ConfigError(f"corpus count must be >= 0, got {self.count}")
        if min(self.height, self.width) < 1 or self.channels not in (1, 3):
            raise ConfigError("corpus images must be HxWx1 or HxWx3 with positive size")
        if self.classes < 1:
            raise ConfigError(f"need at least one class, got {self.classes}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val fraction must be in [0, 1), got {self.val_fraction}")


# ---------------------------------------------------------------------------
# texture bank: deterministic patterns from a tiny discrete family, all with
# period-8-aligned structure so 8x8 patches repeat exactly across images
# ---------------------------------------------------------------------------


def _texture(idx: int, h: int, w: int) -> np.ndarray:
    y, x = np.ogrid[0:h, 0:w]
    lo, hi = 0.3, 0.7
    if idx == 0:
        t = np.where((y // 4 + x // 4) % 2 == 0, lo, hi)
    elif idx == 1:
        t = np.where((y // 8 + x // 8) % 2 == 0, lo, hi)
    elif idx == 2:
        t = np.where((y // 4) % 2 == 0, lo, hi)
    elif idx == 3:
        t = np.where((x // 4) % 2 == 0, lo, hi)
    elif idx == 4:
        t = np.where((y // 2) % 2 == 0, 0.35, 0.65)
    elif idx == 5:
        t = np.where((x // 2) % 2 == 0, 0.35, 0.65)
    elif idx == 6:
        t = np.where(((x + y) // 8) % 2 == 0, lo, hi)
    elif idx == 7:
        t = np.full((h, w), 0.25)
    elif idx == 8:
        t = np.full((h, w), 0.5)
    elif idx == 9:
        t = np.full((h, w), 0.75)
    elif idx == 10:
        t = np.where((np.abs(y % 8 - 3.5) < 1.0) & (np.abs(x % 8 - 3.5) < 1.0), 0.8, 0.2)
    elif idx == 11:
        t = np.where((y % 8 == 0) | (x % 8 == 0), 0.2, 0.6)
    else:
        raise ConfigError(f"texture index {idx} out of range")
    return np.broadcast_to(t, (h, w)).astype(np.float64)


TEXTURE_BANK_SIZE = 12

_PALETTE = np.array(
    [
        (0.90, 0.10, 0.10),
        (0.10, 0.80, 0.15),
        (0.15, 0.25, 0.90),
        (0.90, 0.85, 0.10),
        (0.85, 0.15, 0.85),
        (0.10, 0.80, 0.85),
        (0.95, 0.55, 0.10),
        (0.95, 0.95, 0.95),
    ]
)

_SOLID_BACKGROUNDS = (0.2, 0.5, 0.8)


def _shape_mask(cls: int, h: int, w: int, cy: float, cx: float, s: float) -> np.ndarray:
    """Boolean mask of the class's shape at continuous center/size."""
    y, x = np.ogrid[0:h, 0:w]
    dy = y - cy
    dx = x - cx
    r2 = dy * dy + dx * dx
    if cls == 0:  # disc
        return r2 <= s * s
    if cls == 1:  # ring
        return (r2 <= s * s) & (r2 >= (0.55 * s) ** 2)
    if cls == 2:  # square
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if cls == 3:  # square frame
        inside = (np.abs(dy) <= s) & (np.abs(dx) <= s)
        hole = (np.abs(dy) <= 0.55 * s) & (np.abs(dx) <= 0.55 * s)
        return inside & ~hole
    if cls == 4:  # diamond
        return np.abs(dy) + np.abs(dx) <= s
    if cls == 5:  # upward triangle
        return (dy >= -s) & (dy <= s) & (np.abs(dx) <= (dy + s) / 2.0)
    if cls == 6:  # plus
        box = (np.abs(dy) <= s) & (np.abs(dx) <= s)
        return box & ((np.abs(dx) <= s / 3.0) | (np.abs(dy) <= s / 3.0))
    if cls == 7:  # horizontal bar
        return (np.abs(dy) <= s / 2.5) & (np.abs(dx) <= s)
    if cls == 8:  # vertical bar
        return (np.abs(dx) <= s / 2.5) & (np.abs(dy) <= s)
    if cls == 9:  # diagonal cross
        box = (np.abs(dy) <= s) & (np.abs(dx) <= s)
        return box & (np.abs(np.abs(dx) - np.abs(dy)) <= s / 3.5)
    raise ConfigError(f"shape class {cls} out of range (10 shape classes)")


CELL = 8  # sprite cell = patch tile, in pixels

# Class sprites on a 3x3 cell grid: 0 = background texture shows through,
# 1 = primary color cell, 2 = secondary color cell.  Geometries are mutually
# distinct and no pair differs only by swapping the two color roles.
_SPRITES = np.array(
    [
        [[0, 1, 0], [1, 1, 1], [0, 1, 0]],  # disc (solid plus)
        [[1, 1, 1], [1, 0, 1], [1, 1, 1]],  # ring
        [[1, 1, 1], [1, 1, 1], [1, 1, 1]],  # square
        [[1, 1, 1], [1, 2, 1], [1, 1, 1]],  # frame (odd center)
        [[0, 1, 0], [1, 2, 1], [0, 1, 0]],  # diamond (hollow plus)
        [[1, 0, 0], [1, 1, 0], [1, 1, 1]],  # triangle (corner wedge)
        [[1, 0, 1], [0, 2, 0], [1, 0, 1]],  # cross (X)
        [[0, 0, 0], [1, 1, 1], [0, 0, 0]],  # horizontal bar
        [[0, 1, 0], [0, 1, 0], [0, 1, 0]],  # vertical bar
        [[1, 1, 1], [0, 1, 0], [0, 1, 0]],  # tee
    ]
)


def render_image(spec: CorpusSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    """One [H, W, ch] image in [0, 1]; consumes a fixed number of draws."""
    h, w = spec.height, spec.width
    texture_idx = int(rng.integers(TEXTURE_BANK_SIZE))
    color_idx = int(rng.integers(len(_PALETTE)))
    color2_idx = (color_idx + 1 + int(rng.integers(len(_PALETTE) - 1))) % len(_PALETTE)
    solid_idx = int(rng.integers(len(_SOLID_BACKGROUNDS)))
    s = rng.uniform(min(h, w) / 6.0, min(h, w) / 3.0)
    cy = rng.uniform(s, h - s)
    cx = rng.uniform(s, w - s)
    gh, gw = h // CELL, w // CELL
    py = int(rng.integers(max(1, gh - _SPRITES.shape[1] + 1)))
    px = int(rng.integers(max(1, gw - _SPRITES.shape[2] + 1)))

    if spec.kind == "textures":
        base = _texture(label % TEXTURE_BANK_SIZE, h, w)
    elif spec.kind == "shapes":
        base = np.full((h, w), _SOLID_BACKGROUNDS[solid_idx])
    else:  # mixed
        base = _texture(texture_idx, h, w)
    img = np.repeat(base[:, :, None], 3, axis=2)

    if spec.kind == "shapes":
        mask = _shape_mask(label % 10, h, w, cy, cx, s)
        img[mask] = _PALETTE[color_idx]
    elif spec.kind == "mixed":
        colors = (_PALETTE[color_idx], _PALETTE[color2_idx])
        sprite = _SPRITES[label % len(_SPRITES)]
        for sy in range(min(sprite.shape[0], gh)):
            for sx in range(min(sprite.shape[1], gw)):
                if sprite[sy, sx]:
                    y0, x0 = (py + sy) * CELL, (px + sx) * CELL
                    img[y0 : y0 + CELL, x0 : x0 + CELL] = colors[sprite[sy, sx] - 1]

    if spec.channels == 1:
        img = img.mean(axis=2, keepdims=True)
    return img


def generate_corpus(spec: CorpusSpec, out_dir: str | Path | None = None):
    """Render the corpus and (optionally) write shards + manifest.

    Returns (images [count,H,W,ch], labels [count], train_ids, val_ids,
    manifest dict).  Same spec -> identical corpus, shard bytes and hashes.
    """
    content_rng, split_rng = [
        np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(spec.seed).spawn(2)
    ]
    labels = np.arange(spec.count, dtype=np.int64) % spec.classes
    images = np.zeros((spec.count, spec.height, spec.width, spec.channels))
    for i in range(spec.count):
        images[i] = render_image(spec, int(labels[i]), content_rng)

    n_val = int(spec.count * spec.val_fraction)
    perm = split_rng.permutation(spec.count)
    val_ids = np.sort(perm[:n_val])
    train_ids = np.sort(perm[n_val:])

    manifest = {
        "format": "cvq-corpus-v1",
        "spec": asdict(spec),
        "count": spec.count,
        "shards": [],
        "labels_file": "labels.ntb",
        "train_ids": [int(i) for i in train_ids],
        "val_ids": [int(i) for i in val_ids],
    }
    if out_dir is not None:
        _write_corpus(Path(out_dir), images, labels, manifest)
    return images, labels, train_ids, val_ids, manifest


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_corpus(out: Path, images: np.ndarray, labels: np.ndarray, manifest: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    count = images.shape[0]
    for start in range(0, count, SHARD_SIZE):
        chunk = images[start : start + SHARD_SIZE]
        name = f"images_{start // SHARD_SIZE:03d}.ntb"
        write_ntb(out / name, chunk)
        manifest["shards"].append({"file": name, "count": int(chunk.shape[0]), "sha256": _sha256(out / name)})
    write_ntb(out / manifest["labels_file"], labels.astype(np.float64))
    manifest["labels_sha256"] = _sha256(out / manifest["labels_file"])
    with open(out / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_corpus(corpus_dir: str | Path, verify: bool = False):
    """Read a corpus directory back into memory.

    Returns (images, labels, train_ids, val_ids, manifest).  ``verify``
    re-hashes every shard against the manifest.
    """
    root = Path(corpus_dir)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise DataError(f"no corpus manifest at {mpath}")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt corpus manifest {mpath}: {exc}") from None
    if manifest.get("format") != "cvq-corpus-v1":
        raise DataError(f"unrecognized corpus format {manifest.get('format')!r}")

    parts = []
    for shard in manifest["shards"]:
        spath = root / shard["file"]
        if verify and _sha256(spath) != shard["sha256"]:
            raise DataError(f"corpus shard {shard['file']} fails its checksum")
        parts.append(read_ntb(spath))
    spec = manifest["spec"]
    empty_shape = (0, spec["height"], spec["width"], spec["channels"])
    images = np.concatenate(parts, axis=0) if parts else np.zeros(empty_shape)
    if images.shape[0] != manifest["count"]:
        raise DataError(f"manifest promises {manifest['count']} images, shards hold {images.shape[0]}")
    labels = read_ntb(root / manifest["labels_file"]).astype(np.int64)
    if verify and _sha256(root / manifest["labels_file"]) != manifest["labels_sha256"]:
        raise DataError("corpus labels fail their checksum")
    train_ids = np.asarray(manifest["train_ids"], dtype=np.int64)
    val_ids = np.asarray(manifest["val_ids"], dtype=np.int64)
    return images, labels, train_ids, val_ids, manifest


# ---------------------------------------------------------------------------
# PGM/PPM (netpbm) reading and writing
# ---------------------------------------------------------------------------

_PNM_MAGICS = {b"P2": ("pgm", False), b"P3": ("ppm", False), b"P5": ("pgm", True), b"P6": ("ppm", True)}


def _pnm_header_tokens(raw: bytes):
    """Yield whitespace-separated header tokens, skipping # comments."""
    pos = 0
    while True:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated netpbm header")
        yield raw[start:pos], pos


def read_pnm(path: str | Path) -> np.ndarray:
    """Read a P2/P3/P5/P6 netpbm file to [H, W, 1|3] float64 in [0, 1]."""
    raw = Path(path).read_bytes()
    if len(raw) < 2 or raw[:2] not in _PNM_MAGICS:
        raise DataError(f"{path}: not a supported netpbm file (P2/P3/P5/P6)")
    kind, binary = _PNM_MAGICS[raw[:2]]
    tokens = _pnm_header_tokens(raw[2:])
    fields = []
    end = 0
    try:
        for _ in range(3):
            tok, end = next(tokens)
            fields.append(int(tok))
    except (StopIteration, ValueError):
        raise DataError(f"{path}: malformed netpbm header") from None
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DataError(f"{path}: invalid netpbm dimensions {width}x{height} maxval={maxval}")
    channels = 3 if kind == "ppm" else 1
    count = width * height * channels

    if binary:
        body = raw[2 + end + 1 :]  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = count * dtype.itemsize
        if len(body) < need:
            raise DataError(f"{path}: netpbm payload truncated ({len(body)} < {need} bytes)")
        samples = np.frombuffer(body[:need], dtype=dtype).astype(np.float64)
    else:
        text = raw[2 + end :]
        text = re.sub(rb"#[^\n]*", b"", text)
        values = text.split()
        if len(values) < count:
            raise DataError(f"{path}: netpbm payload truncated ({len(values)} < {count} samples)")
        try:
            samples = np.array([int(v) for v in values[:count]], dtype=np.float64)
        except ValueError:
            raise DataError(f"{path}: non-numeric netpbm sample") from None
    if samples.max() > maxval:
        raise DataError(f"{path}: sample exceeds declared maxval {maxval}")
    return (samples / maxval).reshape(height, width, channels)


def write_pnm(path: str | Path, image: np.ndarray) -> None:
    """Write [H, W, 1|3] floats in [0, 1] as binary PGM/PPM, maxval 255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise DataError(f"cannot write image of shape {np.asarray(image).shape} as netpbm")
    if img.min() < 0.0 or img.max() > 1.0:
        raise DataError("netpbm output expects pixels in [0, 1]")
    magic = b"P6" if img.shape[2] == 3 else b"P5"
    data = np.rint(img * 255.0).astype(np.uint8)
    header = b"%s\n%d %d\n255\n" % (magic, img.shape[1], img.shape[0])
    Path(path).write_bytes(header + data.tobytes())


# ---------------------------------------------------------------------------
# external image ingestion (crop to aspect, area resample, shard)
# ---------------------------------------------------------------------------


def center_crop_to_aspect(img: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Largest centered crop with the target aspect ratio (no resampling)."""
    h, w = img.shape[:2]
    if h * tw > w * th:  # too tall: trim rows
        new_h = max(1, (w * th) // tw)
        top = (h - new_h) // 2
        return img[top : top + int(new_h)]
    new_w = max(1, (h * tw) // th)
    left = (w - new_w) // 2
    return img[:, left : left + int(new_w)]


def _resample_weights(src: int, dst: int) -> np.ndarray:
    """[dst, src] box-filter weights: output cell i integrates the source
    span [i*src/dst, (i+1)*src/dst); rows sum to 1."""
    w = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        start = i * scale
        stop = (i + 1) * scale
        lo = int(np.floor(start))
        hi = min(src, int(np.ceil(stop)))
        for r in range(lo, hi):
            w[i, r] = min(stop, r + 1) - max(start, r)
    return w / scale


def area_resize(img: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Box-filter (pixel-area) resample of [H, W, ch] to [th, tw, ch].

    Same-size input is returned unchanged; a 1x1 input replicates its pixel.
    """
    h, w = img.shape[:2]
    if th < 1 or tw < 1:
        raise DataError(f"resize target {th}x{tw} must be positive")
    if (h, w) == (th, tw):
        return img.copy()
    out = np.einsum("ih,hwc->iwc", _resample_weights(h, th), img)
    return np.einsum("jw,iwc->ijc", _resample_weights(w, tw), out)


def ingest_directory(src_dir: str | Path, spec: CorpusSpec, out_dir: str | Path | None = None):
    """Build a corpus from a directory of netpbm images.

    Files are processed in sorted-name order; unreadable files are collected
    as failures rather than aborting the batch.  All images are center
    cropped to the target aspect and area-resampled to the target size;
    labels are 0 (external images carry no class structure).
    Returns (images, labels, summary dict).
    """
    root = Path(src_dir)
    if not root.is_dir():
        raise DataError(f"ingest source {root} is not a directory")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in (".pgm", ".ppm", ".pnm"))
    ingested, failures = [], []
    for path in files:
        try:
            img = read_pnm(path)
            img = center_crop_to_aspect(img, spec.height, spec.width)
            img = area_resize(img, spec.height, spec.width)
            if spec.channels == 3 and img.shape[2] == 1:
                img = np.repeat(img, 3, axis=2)
            elif spec.channels == 1 and img.shape[2] == 3:
                img = img.mean(axis=2, keepdims=True)
            ingested.append(np.clip(img, 0.0, 1.0))
        except DataError as exc:
            failures.append({"file": path.name, "reason": str(exc)})
    if ingested:
        images = np.stack(ingested)
    else:
        images = np.zeros((0, spec.height, spec.width, spec.channels))
    labels = np.zeros(images.shape[0], dtype=np.int64)

    if out_dir is not None and images.shape[0] > 0:
        n_val = int(images.shape[0] * spec.val_fraction)
        split_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed).spawn(2)[1]))
        perm = split_rng.permutation(images.shape[0])
        manifest = {
            "format": "cvq-corpus-v1",
            "spec": {**asdict(spec), "kind": "ingested", "count": int(images.shape[0]), "classes": 1},
            "count": int(images.shape[0]),
            "shards": [],
            "labels_file": "labels.ntb",
            "train_ids": sorted(int(i) for i in perm[n_val:]),
            "val_ids": sorted(int(i) for i in perm[:n_val]),
            "source_files": [p.name for p in files],
        }
        _write_corpus(Path(out_dir), images, labels, manifest)
    summary = {"ingested": int(images.shape[0]), "failed": failures, "scanned": len(files)}
    return images, labels, summary
