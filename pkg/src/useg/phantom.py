"""Synthetic multi-organ phantoms and their on-disk dataset layout.

Each phantom is a grid with M non-overlapping elliptical "organs" on a
dark background, each organ with a characteristic intensity. Full label
maps can be reduced to the partial views used for training: first-K
organs (teacher data) or a single organ with everything else as
background (incremental data).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PhantomError(Exception):
    pass


class PgmError(PhantomError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 32
    num_organs: int = 3
    organ_means: tuple = (0.35, 0.6, 0.85)
    background_mean: float = 0.1
    noise_sigma: float = 0.03
    radius_range: tuple = (2.5, 5.0)
    seed: int = 0

    def __post_init__(self):
        if self.num_organs < 1:
            raise PhantomError("need at least one organ")
        if len(self.organ_means) != self.num_organs:
            raise PhantomError("organ_means length must equal num_organs")
        if self.radius_range[0] < 1.7:
            raise PhantomError("minimum radius too small for the 9-pixel organ floor")
        object.__setattr__(self, "organ_means", tuple(self.organ_means))
        object.__setattr__(self, "radius_range", tuple(self.radius_range))


@dataclass
class PhantomSample:
    image: np.ndarray   # [1,H,W] float64 in [0,1]
    labels: np.ndarray  # [H,W] int, 0 = background


MAX_PLACEMENT_ATTEMPTS = 1000


def _ellipse_mask(size: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _generate_sample(cfg: PhantomConfig, rng: np.random.Generator) -> PhantomSample:
    labels = np.zeros((cfg.size, cfg.size), dtype=np.int64)
    occupied = np.zeros((cfg.size, cfg.size), dtype=bool)
    lo, hi = cfg.radius_range
    for organ in range(1, cfg.num_organs + 1):
        for attempt in range(MAX_PLACEMENT_ATTEMPTS):
            ry, rx = rng.uniform(lo, hi, size=2)
            cy = rng.uniform(ry, cfg.size - 1 - ry)
            cx = rng.uniform(rx, cfg.size - 1 - rx)
            mask = _ellipse_mask(cfg.size, cy, cx, ry, rx)
            if mask.sum() >= 9 and not (mask & occupied).any():
                labels[mask] = organ
                occupied |= mask
                break
        else:
            raise PhantomError(
                f"could not place organ {organ} after {MAX_PLACEMENT_ATTEMPTS} attempts")
    image = np.full((cfg.size, cfg.size), cfg.background_mean)
    for organ, mean in enumerate(cfg.organ_means, start=1):
        image[labels == organ] = mean
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return PhantomSample(image=image[None], labels=labels)


def generate_dataset(cfg: PhantomConfig, n: int) -> list:
    """n i.i.d. phantoms, deterministic per cfg.seed (per-sample substreams)."""
    if n < 1:
        raise PhantomError("n must be >= 1")
    root = np.random.SeedSequence(cfg.seed)
    return [_generate_sample(cfg, np.random.Generator(np.random.PCG64(ss)))
            for ss in root.spawn(n)]


def to_single_organ(sample: PhantomSample, organ: int, num_organs: int) -> PhantomSample:
    """Keep one organ as class 1; every other pixel becomes background."""
    if not 1 <= organ <= num_organs:
        raise PhantomError(f"organ id {organ} out of range 1..{num_organs}")
    return PhantomSample(image=sample.image,
                         labels=(sample.labels == organ).astype(np.int64))


def to_first_k_organs(sample: PhantomSample, k: int, num_organs: int) -> PhantomSample:
    """Keep organ ids 1..k; organs above k become background."""
    if k > num_organs or k < 0:
        raise PhantomError(f"k={k} out of range 0..{num_organs}")
    labels = np.where(sample.labels <= k, sample.labels, 0)
    return PhantomSample(image=sample.image, labels=labels)


# -- PGM I/O ------------------------------------------------------------------

def write_pgm(values: np.ndarray, path, maxval: int) -> None:
    """Binary PGM (P5). maxval <= 255 writes u8, else big-endian u16."""
    arr = np.asarray(values)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise PgmError(f"cannot write array of shape {values.shape} as PGM")
    if not 0 < maxval < 65536:
        raise PgmError("maxval must be in 1..65535")
    if np.issubdtype(arr.dtype, np.floating):
        quant = np.rint(arr * maxval).astype(np.int64)
    else:
        quant = arr.astype(np.int64)
    if quant.min() < 0 or quant.max() > maxval:
        raise PgmError("values out of PGM range")
    h, w = arr.shape
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(quant.astype(dtype).tobytes())


def read_pgm(path) -> tuple:
    """Read binary PGM; returns (array of ints [H,W], maxval)."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise PgmError(f"{path}: not a binary PGM")
    # header: magic, width, height, maxval, separated by whitespace/comments
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmError(f"{path}: truncated header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise PgmError(f"{path}: malformed header field {data[start:pos]!r}")
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise PgmError(f"{path}: bad dimensions or maxval")
    dtype = ">u2" if maxval > 255 else "u1"
    itemsize = 2 if maxval > 255 else 1
    expected = w * h * itemsize
    raster = data[pos:pos + expected]
    if len(raster) != expected:
        raise PgmError(f"{path}: raster truncated ({len(raster)} of {expected} bytes)")
    arr = np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(np.int64)
    return arr, maxval


IMAGE_MAXVAL = 65535


def image_to_pgm(image: np.ndarray, path) -> None:
    write_pgm(image, path, IMAGE_MAXVAL)


def image_from_pgm(path) -> np.ndarray:
    arr, maxval = read_pgm(path)
    return (arr / maxval)[None]


# -- dataset directory layout -------------------------------------------------

def split_indices(n: int) -> tuple:
    """Deterministic 4:1 train/test split by index."""
    n_train = (n * 4) // 5
    return list(range(n_train)), list(range(n_train, n))


def write_dataset(root, cfg: PhantomConfig, samples) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels_full").mkdir(exist_ok=True)
    for k in range(1, cfg.num_organs + 1):
        (root / f"labels_organ{k}").mkdir(exist_ok=True)
    for i, s in enumerate(samples):
        image_to_pgm(s.image, root / "images" / f"{i}.pgm")
        write_pgm(s.labels, root / "labels_full" / f"{i}.pgm", cfg.num_organs)
        for k in range(1, cfg.num_organs + 1):
            view = to_single_organ(s, k, cfg.num_organs)
            write_pgm(view.labels, root / f"labels_organ{k}" / f"{i}.pgm", 1)
    train, test = split_indices(len(samples))
    manifest = {
        "phantom": dataclasses.asdict(cfg),
        "num_samples": len(samples),
        "train_indices": train,
        "test_indices": test,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise PhantomError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise PhantomError(f"corrupt manifest at {path}: {e}") from e
    for key in ("phantom", "num_samples", "train_indices", "test_indices"):
        if key not in manifest:
            raise PhantomError(f"manifest missing key {key!r}")
    return manifest


def load_dataset(root) -> tuple:
    """Returns (cfg, samples with full labels, train_indices, test_indices)."""
    root = Path(root)
    manifest = read_manifest(root)
    cfg = PhantomConfig(**{k: tuple(v) if isinstance(v, list) else v
                           for k, v in manifest["phantom"].items()})
    samples = []
    for i in range(manifest["num_samples"]):
        image = image_from_pgm(root / "images" / f"{i}.pgm")
        labels, maxval = read_pgm(root / "labels_full" / f"{i}.pgm")
        if maxval != cfg.num_organs or labels.max() > cfg.num_organs:
            raise PhantomError(f"label file {i} inconsistent with manifest")
        samples.append(PhantomSample(image=image, labels=labels))
    return cfg, samples, manifest["train_indices"], manifest["test_indices"]
