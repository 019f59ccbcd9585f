"""On-disk multiview datasets: manifests, splits and model-ready batches.

Layout (synthetic and captured data alike)::

    <root>/<crop>/labels.csv                      plant,day,age_days,leaf_count
    <root>/<crop>/<plant>/day_<d>/L<k>/angle_<a>.png

Input tensors stack views level-major, then by ascending angle; view ``i``
occupies channels ``3i .. 3i+2``. Pixels are mapped to [-1, 1] by
``(x / 255 - 0.5) / 0.5``.
"""

from __future__ import annotations

import csv
import functools
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .tensor import RngStream, Tensor

NUM_LEVELS = 5
ANGLES = tuple(range(0, 360, 15))
NORM_MEAN = 0.5
NORM_STD = 0.5

_DAY_RE = re.compile(r"^day_(\d+)$")
_LEVEL_RE = re.compile(r"^L(\d+)$")
_ANGLE_RE = re.compile(r"^angle_(\d+)\.png$")

MANIFEST_HEADER = ("crop", "plant", "day", "level", "angle", "age_days", "leaf_count", "path")
MANIFEST_MAGIC = "#mvvt-manifest"
MANIFEST_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Record:
    crop: str
    plant: str
    day: int
    level: int
    angle: int
    path: str = field(compare=False)
    age_days: int = field(compare=False)
    leaf_count: int = field(compare=False)

    @property
    def key(self) -> tuple:
        return (self.crop, self.plant, self.day)


def plant_number(plant: str) -> int:
    m = re.search(r"(\d+)$", plant)
    return int(m.group(1)) if m else -1


class Manifest:
    """Immutable, sorted catalogue of view images keyed by (crop, plant, day, level, angle)."""

    def __init__(self, records: Sequence[Record]):
        self.records = tuple(sorted(records, key=lambda r: (r.crop, plant_number(r.plant), r.plant, r.day, r.level, r.angle)))
        self._index = {}
        for r in self.records:
            k = (r.crop, r.plant, r.day, r.level, r.angle)
            if k in self._index:
                raise DatasetError(f"duplicate view {k}")
            self._index[k] = r
        self._labels = {}
        for r in self.records:
            lab = (r.age_days, r.leaf_count)
            if self._labels.setdefault(r.key, lab) != lab:
                raise DatasetError(f"inconsistent labels across views of {r.key}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def keys(self) -> list:
        """Sorted unique (crop, plant, day) items."""
        return list(self._labels)

    def crops(self) -> list:
        return sorted({r.crop for r in self.records})

    def plants(self, crop: str) -> list:
        return sorted({r.plant for r in self.records if r.crop == crop}, key=lambda p: (plant_number(p), p))

    def label(self, key: tuple) -> tuple:
        """(age_days, leaf_count) of a (crop, plant, day) item."""
        return self._labels[key]

    def view(self, key: tuple, level: int, angle: int) -> Record:
        try:
            return self._index[(*key, level, angle)]
        except KeyError:
            raise DatasetError(f"view L{level} angle {angle} of {key} is not in the manifest") from None

    def levels(self) -> list:
        return sorted({r.level for r in self.records})

    def angles(self) -> list:
        return sorted({r.angle for r in self.records})

    def save(self, path) -> None:
        """Tab-separated cache; paths are stored relative to the cache's directory."""
        path = Path(path)
        base = path.parent.resolve()
        with open(path, "w") as fh:
            fh.write(f"{MANIFEST_MAGIC}\t{MANIFEST_VERSION}\n")
            fh.write("\t".join(MANIFEST_HEADER) + "\n")
            for r in self.records:
                rel = Path(r.path).resolve().relative_to(base)
                fh.write(f"{r.crop}\t{r.plant}\t{r.day}\t{r.level}\t{r.angle}\t{r.age_days}\t{r.leaf_count}\t{rel.as_posix()}\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        lines = path.read_text().splitlines()
        if not lines or lines[0] != f"{MANIFEST_MAGIC}\t{MANIFEST_VERSION}":
            raise DatasetError(f"{path}: not a version-{MANIFEST_VERSION} manifest cache")
        if tuple(lines[1].split("\t")) != MANIFEST_HEADER:
            raise DatasetError(f"{path}: unexpected column header")
        records = []
        for n, line in enumerate(lines[2:], start=3):
            parts = line.split("\t")
            if len(parts) != len(MANIFEST_HEADER):
                raise DatasetError(f"{path}:{n}: expected {len(MANIFEST_HEADER)} columns")
            crop, plant, day, level, angle, age, leaves, rel = parts
            records.append(Record(crop, plant, int(day), int(level), int(angle),
                                  str(path.parent / rel), int(age), int(leaves)))
        return cls(records)


# --- scanning --------------------------------------------------------------


def _read_labels(path: Path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["plant", "day", "age_days", "leaf_count"]:
            raise DatasetError(f"{path}: header must be plant,day,age_days,leaf_count")
        for row in reader:
            try:
                out[(row["plant"], int(row["day"]))] = (int(row["age_days"]), int(row["leaf_count"]))
            except (TypeError, ValueError):
                raise DatasetError(f"{path}: malformed row {row}") from None
    return out


def _scan_crop(crop_dir: Path, num_levels: int, angles: Sequence[int]) -> list:
    labels = _read_labels(crop_dir / "labels.csv")
    crop = crop_dir.name
    records = []
    expected = {(lv, a) for lv in range(1, num_levels + 1) for a in angles}
    for plant_dir in sorted(p for p in crop_dir.iterdir() if p.is_dir()):
        for day_dir in sorted(plant_dir.iterdir()):
            m = _DAY_RE.match(day_dir.name)
            if not m or not day_dir.is_dir():
                raise DatasetError(f"unparsable day directory: {day_dir}")
            day = int(m.group(1))
            found = {}
            for level_dir in sorted(day_dir.iterdir()):
                ml = _LEVEL_RE.match(level_dir.name)
                if not ml or not level_dir.is_dir():
                    raise DatasetError(f"unparsable level directory: {level_dir}")
                level = int(ml.group(1))
                for img in sorted(level_dir.iterdir()):
                    ma = _ANGLE_RE.match(img.name)
                    if not ma:
                        raise DatasetError(f"unparsable image name: {img}")
                    found[(level, int(ma.group(1)))] = img
            key = (plant_dir.name, day)
            if key not in labels:
                raise DatasetError(f"no label row for plant {plant_dir.name}, day {day} in {crop_dir / 'labels.csv'}")
            missing = sorted(expected - found.keys())
            if missing:
                pairs = ", ".join(f"L{lv}/angle {a}" for lv, a in missing)
                raise DatasetError(f"incomplete views for {crop}/{plant_dir.name}/day {day}: missing {pairs}")
            age, leaves = labels[key]
            for (level, angle), path in sorted(found.items()):
                records.append(Record(crop, plant_dir.name, day, level, angle, str(path), age, leaves))
    return records


def scan_layout(root, num_levels: int = NUM_LEVELS, angles: Sequence[int] = ANGLES) -> Manifest:
    """Walk ``root`` (a dataset root or a single crop directory) into a Manifest."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    if (root / "labels.csv").exists():
        crop_dirs = [root]
    else:
        crop_dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "labels.csv").exists())
    records = []
    for crop_dir in crop_dirs:
        records.extend(_scan_crop(crop_dir, num_levels, angles))
    if not records:
        raise DatasetError(f"no images found under {root}")
    return Manifest(records)


# --- splits ----------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    test_plants: dict
    train_items: tuple
    val_items: tuple
    test_items: tuple
    seed: int
    ratio: float


def make_splits(manifest: Manifest, ratio: float = 0.8, seed: int = 0, test_plant: Optional[str] = None) -> SplitSpec:
    """Hold out one plant per crop; split the rest by (plant, day) into ratio : 1 - ratio.

    The held-out plant defaults to the highest-numbered plant of each crop.
    """
    if not 0.0 < ratio <= 1.0:
        raise DatasetError(f"ratio must lie in (0, 1], got {ratio}")
    keys = manifest.keys()
    test_plants, train, val, test = {}, [], [], []
    for ci, crop in enumerate(manifest.crops()):
        plants = manifest.plants(crop)
        if len(plants) < 2:
            raise DatasetError(f"crop {crop} has a single plant; nothing left to train on after holding one out")
        held = plants[-1] if test_plant is None else test_plant
        if held not in plants:
            raise DatasetError(f"test plant {held} not found for crop {crop}")
        test_plants[crop] = held
        rest = [k for k in keys if k[0] == crop and k[1] != held]
        test.extend(k for k in keys if k[0] == crop and k[1] == held)
        order = RngStream(seed, ci).permutation(len(rest))
        n_train = int(round(ratio * len(rest)))
        train.extend(rest[i] for i in order[:n_train])
        val.extend(rest[i] for i in order[n_train:])
    return SplitSpec(test_plants, tuple(train), tuple(val), tuple(test), seed, ratio)


# --- samples ---------------------------------------------------------------


@dataclass(frozen=True)
class Sampling:
    """How views are picked for one sample.

    ``views_per_level`` is one count for every level or one count per level.
    """

    views_per_level: Union[int, tuple] = 4
    strategy: str = "stride"
    seed: int = 0
    size: Optional[tuple] = None

    def __post_init__(self):
        if self.strategy not in ("stride", "seeded-random"):
            raise DatasetError(f"unknown sampling strategy {self.strategy!r}")

    def counts(self, num_levels: int) -> tuple:
        v = self.views_per_level
        counts = (v,) * num_levels if isinstance(v, int) else tuple(v)
        if len(counts) != num_levels:
            raise DatasetError(f"views_per_level {v} does not cover {num_levels} levels")
        return counts

    def num_views(self, num_levels: int = NUM_LEVELS) -> int:
        return sum(self.counts(num_levels))


@dataclass(frozen=True)
class MultiViewSample:
    x: np.ndarray
    age_days: int
    leaf_count: int
    key: tuple
    views: tuple


def _key_hash(key: tuple) -> int:
    return zlib.crc32("/".join(str(k) for k in key).encode())


def select_views(manifest: Manifest, key: tuple, sampling: Sampling) -> list:
    """Canonical (level, angle) list: level-major, ascending angle within a level."""
    levels = manifest.levels()
    angles = manifest.angles()
    a = len(angles)
    out = []
    rng = RngStream(sampling.seed, _key_hash(key)) if sampling.strategy == "seeded-random" else None
    for level, v in zip(levels, sampling.counts(len(levels))):
        if not 1 <= v <= a:
            raise DatasetError(f"cannot take {v} views from {a} angles")
        if rng is None:
            if a % v:
                raise DatasetError(f"stride sampling needs views_per_level dividing {a}, got {v}")
            idx = range(0, a, a // v)
        else:
            idx = sorted(int(i) for i in rng.choice(a, v))
        out.extend((level, angles[i]) for i in idx)
    return out


@functools.lru_cache(maxsize=65536)
def _decode(path: str, size: Optional[tuple]) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
    arr.flags.writeable = False
    return arr


def normalize(pixels: np.ndarray) -> np.ndarray:
    return (pixels / 255.0 - NORM_MEAN) / NORM_STD


def denormalize(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize`, back to 0..255 integers."""
    return np.round((x * NORM_STD + NORM_MEAN) * 255.0).astype(np.uint8)


def assemble_sample(manifest: Manifest, key: tuple, sampling: Sampling = Sampling(), dtype=np.float64) -> MultiViewSample:
    views = select_views(manifest, key, sampling)
    blocks = []
    for level, angle in views:
        rec = manifest.view(key, level, angle)
        blocks.append(_decode(rec.path, sampling.size).transpose(2, 0, 1))
    x = normalize(np.concatenate(blocks, axis=0)).astype(dtype)
    age, leaves = manifest.label(key)
    return MultiViewSample(x, age, leaves, tuple(key), tuple(views))


def batch_iter(
    items: Sequence[tuple],
    manifest: Manifest,
    batch_size: int = 8,
    shuffle: bool = False,
    seed: int = 0,
    epoch: int = 0,
    sampling: Sampling = Sampling(),
    dtype=np.float32,
) -> Iterator[tuple]:
    """Yield (X, ages, leaf_counts) batches; the last batch may be short.

    With ``shuffle`` the order is a seeded permutation fixed by (seed, epoch).
    """
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    items = list(items)
    if not items:
        raise DatasetError("cannot iterate an empty split")
    order = RngStream(seed, epoch).permutation(len(items)) if shuffle else range(len(items))
    order = list(order)
    for start in range(0, len(order), batch_size):
        samples = [assemble_sample(manifest, items[i], sampling, dtype) for i in order[start:start + batch_size]]
        x = Tensor(np.stack([s.x for s in samples]))
        ages = Tensor(np.array([[s.age_days] for s in samples], dtype=dtype))
        leaves = Tensor(np.array([[s.leaf_count] for s in samples], dtype=dtype))
        yield x, ages, leaves
