"""Synthetic fine-grained image task and the class-balanced pair sampler.

Every superclass has its own global stripe texture; the subclasses inside a
superclass differ only by a small glyph stamped at a random position. Telling
subclasses apart therefore depends on a small, local detail.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import ConfigError, DataError

BATCH_CLASSES = 4
BATCH_PER_CLASS = 5
FORMAT = "cin-dataset-1"


@dataclass(frozen=True)
class SyntheticTaskConfig:
    num_superclasses: int = 2
    subclasses_per_superclass: int = 4
    image_size: int = 32
    glyph_size: int = 5
    noise_std: float = 0.05
    texture_amplitude: float = 0.1
    train_per_class: int = 100
    val_per_class: int = 25
    seed: int = 0

    def __post_init__(self):
        for f in ("num_superclasses", "subclasses_per_superclass", "image_size", "glyph_size"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive", f)
        if self.glyph_size + 2 > self.image_size:
            raise ConfigError("glyph must fit inside the image with a margin of 1", "glyph_size")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative", "noise_std")
        if not 0 <= self.texture_amplitude <= 0.5:
            raise ConfigError("texture_amplitude must lie in [0, 0.5]", "texture_amplitude")
        if self.train_per_class < 0 or self.val_per_class < 0:
            raise ConfigError("samples per class must be non-negative", "train_per_class")
        if 2 ** (self.glyph_size ** 2) < self.num_classes:
            raise ConfigError("glyph too small to give every class a distinct pattern", "glyph_size")

    @property
    def num_classes(self) -> int:
        return self.num_superclasses * self.subclasses_per_superclass


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    class_id: int
    superclass_id: int


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n, H, W, 3), values in [0, 1]
    class_ids: np.ndarray
    superclass_ids: np.ndarray
    num_classes: int

    def __post_init__(self):
        for arr in (self.images, self.class_ids, self.superclass_ids):
            arr.flags.writeable = False
        if not (len(self.images) == len(self.class_ids) == len(self.superclass_ids)):
            raise DataError("images and labels differ in length")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.class_ids[i]), int(self.superclass_ids[i]))


@dataclass(frozen=True)
class PairBatch:
    """2N images ordered as [A_1..A_N, B_1..B_N]; pair i is (i, N + i)."""

    images: np.ndarray
    labels: np.ndarray
    y_ab: np.ndarray
    indices: np.ndarray

    @property
    def n_pairs(self) -> int:
        return len(self.y_ab)

    @property
    def a_index(self) -> np.ndarray:
        return np.arange(self.n_pairs)

    @property
    def b_index(self) -> np.ndarray:
        return np.arange(self.n_pairs, 2 * self.n_pairs)


def _class_layout(config: SyntheticTaskConfig):
    rng = np.random.default_rng([config.seed, 0])
    n = config.image_size
    yy, xx = np.mgrid[0:n, 0:n] / n
    textures = []
    for s in range(config.num_superclasses):
        theta = math.pi * s / config.num_superclasses + rng.uniform(0, math.pi / 8)
        freq = 3.0 + 2.0 * s + rng.uniform(0, 1)
        color = rng.uniform(0.3, 1.0, size=3)
        wave = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)))
        textures.append(0.5 + config.texture_amplitude * wave[..., None] * color)
    g = config.glyph_size
    glyphs, seen = [], set()
    while len(glyphs) < config.num_classes:
        flat = rng.random(g * g) < 0.5
        if flat.tobytes() not in seen:
            seen.add(flat.tobytes())
            glyphs.append(flat.reshape(g, g))
    return textures, glyphs


def render(config: SyntheticTaskConfig, class_id: int, row: int, col: int, noise=None, _layout=None) -> np.ndarray:
    """Draw one image of ``class_id`` with its glyph's top-left corner at (row, col)."""
    textures, glyphs = _layout or _class_layout(config)
    sup = class_id // config.subclasses_per_superclass
    img = textures[sup].copy()
    g = config.glyph_size
    patch = img[row:row + g, col:col + g]
    patch[...] = 0.0
    patch[glyphs[class_id]] = 1.0
    if noise is not None:
        img = img + noise
    return np.clip(img, 0.0, 1.0)


def _make_split(config, layout, per_class: int, rng) -> Dataset:
    n, g = config.image_size, config.glyph_size
    images, cls, sup = [], [], []
    for k in range(config.num_classes):
        for _ in range(per_class):
            row, col = rng.integers(1, n - g, size=2)
            noise = rng.normal(0.0, config.noise_std, size=(n, n, 3)) if config.noise_std > 0 else None
            images.append(render(config, k, int(row), int(col), noise, layout))
            cls.append(k)
            sup.append(k // config.subclasses_per_superclass)
    shape = (len(images), n, n, 3)
    return Dataset(
        np.array(images, dtype=np.float64).reshape(shape),
        np.array(cls, dtype=np.int64),
        np.array(sup, dtype=np.int64),
        config.num_classes,
    )


def generate(config: SyntheticTaskConfig) -> Dict[str, Dataset]:
    """Deterministic ``{"train": ..., "val": ...}`` splits for ``config``."""
    layout = _class_layout(config)
    return {
        "train": _make_split(config, layout, config.train_per_class, np.random.default_rng([config.seed, 1])),
        "val": _make_split(config, layout, config.val_per_class, np.random.default_rng([config.seed, 2])),
    }


def random_pairing(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random perfect matching of ``n`` items as an (n/2, 2) index array."""
    if n % 2:
        raise DataError("cannot pair an odd number of items")
    return rng.permutation(n).reshape(-1, 2)


def sample_batch(
    dataset: Dataset,
    rng: np.random.Generator,
    n_classes: int = BATCH_CLASSES,
    per_class: int = BATCH_PER_CLASS,
    flip: bool = False,
) -> PairBatch:
    """Draw ``n_classes`` categories with ``per_class`` images each and split them into random pairs."""
    by_class = {int(k): np.flatnonzero(dataset.class_ids == k) for k in np.unique(dataset.class_ids)}
    eligible = sorted(k for k, idx in by_class.items() if len(idx) >= per_class)
    if len(eligible) < n_classes:
        raise DataError(
            f"need {n_classes} classes with >= {per_class} images each, only {len(eligible)} qualify"
        )
    chosen = rng.choice(eligible, size=n_classes, replace=False)
    members = np.concatenate([rng.choice(by_class[int(k)], size=per_class, replace=False) for k in chosen])
    pairs = members[random_pairing(len(members), rng)]
    order = np.concatenate([pairs[:, 0], pairs[:, 1]])
    images = dataset.images[order]
    if flip:
        mask = rng.random(len(order)) < 0.5
        images = np.where(mask[:, None, None, None], images[:, :, ::-1], images)
    labels = dataset.class_ids[order]
    n = len(pairs)
    return PairBatch(images, labels, (labels[:n] == labels[n:]).astype(np.int64), order)


def batches_per_epoch(dataset: Dataset, batch_size: int = BATCH_CLASSES * BATCH_PER_CLASS) -> int:
    return max(1, math.ceil(len(dataset) / batch_size))


# ---------------------------------------------------------------- on-disk format


def save_dataset(splits: Dict[str, Dataset], config: SyntheticTaskConfig, out_dir) -> Path:
    """Write raw little-endian float64 image arrays plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format": FORMAT, "config": asdict(config), "seed": config.seed,
                "num_classes": config.num_classes, "splits": {}}
    for name, ds in splits.items():
        fname = f"{name}_images.f64"
        raw = np.ascontiguousarray(ds.images, dtype="<f8").tobytes()
        (out / fname).write_bytes(raw)
        manifest["splits"][name] = {
            "file": fname,
            "shape": list(ds.images.shape),
            "sha256": hashlib.sha256(raw).hexdigest(),
            "class_ids": ds.class_ids.tolist(),
            "superclass_ids": ds.superclass_ids.tolist(),
        }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return path


def manifest_hash(data_dir) -> str:
    return hashlib.sha256((Path(data_dir) / "manifest.json").read_bytes()).hexdigest()


def load_dataset(data_dir) -> Tuple[Dict[str, Dataset], SyntheticTaskConfig]:
    root = Path(data_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read dataset manifest in {root}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise DataError(f"unsupported dataset format {manifest.get('format')!r}")
    known = {f.name for f in fields(SyntheticTaskConfig)}
    config = SyntheticTaskConfig(**{k: v for k, v in manifest["config"].items() if k in known})
    splits = {}
    for name, meta in manifest["splits"].items():
        raw = (root / meta["file"]).read_bytes()
        if hashlib.sha256(raw).hexdigest() != meta["sha256"]:
            raise DataError(f"{meta['file']} does not match its manifest checksum")
        images = np.frombuffer(raw, dtype="<f8").reshape(meta["shape"]).astype(np.float64)
        splits[name] = Dataset(
            images,
            np.asarray(meta["class_ids"], dtype=np.int64),
            np.asarray(meta["superclass_ids"], dtype=np.int64),
            manifest["num_classes"],
        )
    return splits, config
