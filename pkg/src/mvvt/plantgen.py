"""Procedural multiview plant images with exact age and leaf-count labels.

A plant is a vertical stem plus flat elliptical leaves. Leaf ``i`` emerges on
a fixed day, stays attached at a fixed point and grows by scaling about that
point, so the rendered foreground of a fixed view never shrinks as days pass.
Views are orthographic: the plant is rotated about the vertical axis by the
view angle, the camera is tilted by the level's elevation, and each level
sees its own vertical window (L1 at the base, the last level at the top).
"""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .tensor import RngStream

CROPS = ("wheat", "mustard", "radish", "okra")

_GROWTH_KEYS = ("initial_leaves", "leaf_rate", "max_leaves", "height_rate", "max_height")
_MORPH_KEYS = ("leaf_length", "leaf_width", "stem_width", "leaf_droop", "phyllotaxis_angle", "leaf_mature_days")


@dataclass(frozen=True)
class Growth:
    initial_leaves: int
    leaf_rate: float
    max_leaves: int
    height_rate: float
    max_height: float


@dataclass(frozen=True)
class Morphology:
    leaf_length: float
    leaf_width: float
    stem_width: float
    leaf_droop: float
    phyllotaxis_angle: float
    leaf_mature_days: float = 10.0


@dataclass(frozen=True)
class PlantSpec:
    crop: str
    plant_id: str
    seed: int
    growth: Growth
    morphology: Morphology
    max_day: int

    def __post_init__(self):
        g, m = self.growth, self.morphology
        if self.crop not in CROPS:
            raise ValueError(f"unknown crop {self.crop!r}; expected one of {CROPS}")
        if g.initial_leaves < 1 or g.leaf_rate <= 0 or g.max_leaves < g.initial_leaves:
            raise ValueError(f"{self.plant_id}: need initial_leaves >= 1, leaf_rate > 0, max_leaves >= initial_leaves")
        pixel = (g.height_rate, g.max_height, m.leaf_length, m.leaf_width, m.stem_width, m.leaf_mature_days)
        if min(pixel) <= 0:
            raise ValueError(f"{self.plant_id}: size and rate parameters must be positive")
        if self.max_day < 1:
            raise ValueError("max_day must be >= 1")


@dataclass(frozen=True)
class LeafPlacement:
    azimuth: float
    attach_height: float
    length: float
    droop: float
    width: float
    shade: float


@dataclass(frozen=True)
class GrowthState:
    day: int
    leaf_count: int
    height: float
    leaves: tuple = ()
    stem_width: float = 4.0


@dataclass(frozen=True)
class RenderConfig:
    height: int = 224
    width: int = 224
    num_angles: int = 24
    angle_step: int = 15
    num_levels: int = 5
    background: float = 0.85
    camera_elevation: tuple = (-10.0, -5.0, 0.0, 10.0, 20.0)
    world_height: float = 224.0

    def __post_init__(self):
        if self.num_angles * self.angle_step != 360:
            raise ValueError(f"num_angles * angle_step must be 360, got {self.num_angles} * {self.angle_step}")
        if len(self.camera_elevation) != self.num_levels:
            raise ValueError("camera_elevation needs one entry per level")
        if not 0.0 <= self.background <= 1.0:
            raise ValueError("background must lie in [0, 1]")

    @property
    def angles(self) -> tuple:
        return tuple(range(0, 360, self.angle_step))


# --- archetypes ------------------------------------------------------------


def load_archetypes(path=None) -> dict:
    """Crop name -> parameter dict, from the bundled file or ``path``."""
    parser = configparser.ConfigParser()
    if path is None:
        parser.read_string(resources.files("mvvt").joinpath("archetypes.cfg").read_text())
    else:
        with open(path) as fh:
            parser.read_file(fh)
    out = {}
    for crop in parser.sections():
        sec = parser[crop]
        out[crop] = {k: float(v) for k, v in sec.items()}
    return out


def archetype_specs(crop: str, plants: Optional[int] = None, seed: int = 0, archetypes=None) -> list:
    """PlantSpecs p1..pn for one crop, with seeded per-plant variation of the rates."""
    arch = (archetypes or load_archetypes())[crop]
    n = int(arch["plants"]) if plants is None else plants
    jit = arch.get("plant_jitter", 0.0)
    specs = []
    crop_idx = CROPS.index(crop)
    for i in range(1, n + 1):
        rng = RngStream(seed, crop_idx, i)
        a, b = (float(v) for v in 1.0 + jit * (2.0 * rng.uniform(2) - 1.0))
        growth = Growth(
            initial_leaves=int(arch["initial_leaves"]),
            leaf_rate=arch["leaf_rate"] * a,
            max_leaves=int(arch["max_leaves"]),
            height_rate=arch["height_rate"] * b,
            max_height=arch["max_height"],
        )
        morph = Morphology(*(arch[k] for k in _MORPH_KEYS))
        specs.append(PlantSpec(crop, f"p{i}", int(rng.integers(0, 2**31)), growth, morph, int(arch["max_day"])))
    return specs


def write_spec(spec: PlantSpec, path) -> None:
    parser = configparser.ConfigParser()
    parser["plant"] = {"crop": spec.crop, "plant_id": spec.plant_id, "seed": str(spec.seed), "max_day": str(spec.max_day)}
    parser["growth"] = {k: repr(getattr(spec.growth, k)) for k in _GROWTH_KEYS}
    parser["morphology"] = {k: repr(getattr(spec.morphology, k)) for k in _MORPH_KEYS}
    with open(path, "w") as fh:
        parser.write(fh)


def read_spec(path) -> PlantSpec:
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    p, g, m = parser["plant"], parser["growth"], parser["morphology"]
    growth = Growth(int(g["initial_leaves"]), float(g["leaf_rate"]), int(g["max_leaves"]),
                    float(g["height_rate"]), float(g["max_height"]))
    morph = Morphology(*(float(m[k]) for k in _MORPH_KEYS))
    return PlantSpec(p["crop"], p["plant_id"], int(p["seed"]), growth, morph, int(p["max_day"]))


# --- growth ----------------------------------------------------------------


def leaf_count(spec: PlantSpec, day: int) -> int:
    g = spec.growth
    return min(g.max_leaves, g.initial_leaves + math.floor(g.leaf_rate * day))


def stem_height(spec: PlantSpec, day: float) -> float:
    return min(spec.growth.max_height, spec.growth.height_rate * day)


def emergence_day(spec: PlantSpec, i: int) -> int:
    """First day on which leaf ``i`` (0-based) exists."""
    g = spec.growth
    if i < g.initial_leaves:
        return 1
    d = max(1, math.ceil((i - g.initial_leaves + 1) / g.leaf_rate))
    while d > 1 and leaf_count(spec, d - 1) > i:
        d -= 1
    while leaf_count(spec, d) <= i:
        d += 1
    return d


def growth_state(spec: PlantSpec, day: int) -> GrowthState:
    """Exact ground truth for ``spec`` on ``day`` (1-based)."""
    if not 1 <= day <= spec.max_day:
        raise ValueError(f"day {day} outside 1..{spec.max_day} for {spec.crop}/{spec.plant_id}")
    m = spec.morphology
    n = leaf_count(spec, day)
    leaves = []
    for i in range(n):
        rng = RngStream(spec.seed, i)
        u = rng.uniform(5)
        born = emergence_day(spec, i)
        scale = min(1.0, (day - born + 1) / m.leaf_mature_days) * (0.85 + 0.3 * u[0])
        length = m.leaf_length * scale
        leaves.append(LeafPlacement(
            azimuth=i * m.phyllotaxis_angle + 0.3 * (u[1] - 0.5),
            attach_height=stem_height(spec, born) * (0.55 + 0.4 * u[2]),
            length=length,
            droop=m.leaf_droop * (0.7 + 0.6 * u[3]),
            width=m.leaf_width / m.leaf_length * length,
            shade=float(u[4]),
        ))
    return GrowthState(day, n, stem_height(spec, day), tuple(leaves), m.stem_width)


# --- rendering -------------------------------------------------------------

STEM_RGB = np.array([0.22, 0.42, 0.12])
FORESHORTEN_FLOOR = 0.7


def _leaf_rgb(shade: float) -> np.ndarray:
    return np.array([0.12 + 0.12 * shade, 0.45 + 0.3 * shade, 0.10 + 0.08 * shade])


def level_window(level: int, cfg: RenderConfig) -> tuple:
    """Vertical world range (bottom, top) seen at ``level``.

    Windows are half the canvas tall and evenly staggered from base to top.
    """
    win = cfg.world_height / 2.0
    stride = (cfg.world_height - win) / max(cfg.num_levels - 1, 1)
    bottom = (level - 1) * stride - 0.05 * win
    return bottom, bottom + win


def render_view(state: GrowthState, angle: float, level: int, cfg: RenderConfig) -> np.ndarray:
    """Render one view as a (3, H, W) float array in [0, 1]."""
    if angle not in cfg.angles:
        raise ValueError(f"angle {angle} is not one of 0..{360 - cfg.angle_step} step {cfg.angle_step}")
    if not 1 <= level <= cfg.num_levels:
        raise ValueError(f"level {level} outside 1..{cfg.num_levels}")
    img = np.empty((cfg.height, cfg.width, 3))
    img[:] = cfg.background
    if state.height <= 0:
        return img.transpose(2, 0, 1)

    bottom, top = level_window(level, cfg)
    scale = cfg.height / (top - bottom)
    half_w = cfg.width / scale / 2.0
    # pixel centres in world screen coordinates
    us = -half_w + (np.arange(cfg.width) + 0.5) / scale
    vs = top - (np.arange(cfg.height) + 0.5) / scale
    U, V = np.meshgrid(us, vs)

    beta = math.radians(cfg.camera_elevation[level - 1])
    cb, sb = math.cos(beta), math.sin(beta)
    theta = math.radians(angle)

    def project(x, y, z):
        return x, z * cb + y * sb, y * cb - z * sb

    shapes = []
    _, v0, _ = project(0.0, 0.0, 0.0)
    _, v1, _ = project(0.0, 0.0, state.height)
    stem = (np.abs(U) <= 0.5 * state.stem_width) & (V >= min(v0, v1)) & (V <= max(v0, v1))
    shapes.append((0.0, stem, STEM_RGB))

    for leaf in state.leaves:
        elev = math.pi / 4 - leaf.droop
        phi = leaf.azimuth + theta
        d = (math.cos(elev) * math.cos(phi), math.cos(elev) * math.sin(phi), math.sin(elev))
        half = leaf.length / 2.0
        bu, bv, _ = project(0.0, 0.0, leaf.attach_height)
        au, av, depth = project(d[0] * half, d[1] * half, d[2] * half)
        cu, cv = bu + au, bv + av
        semi_minor = leaf.width / 2.0
        major_len = math.hypot(au, av)
        if major_len < 1e-12:
            eu, ev = 1.0, 0.0
        else:
            eu, ev = au / major_len, av / major_len
        # foreshortening floor keeps end-on leaves visible
        semi_major = max(major_len, semi_minor, FORESHORTEN_FLOOR * half)
        du, dv = U - cu, V - cv
        s = du * eu + dv * ev
        t = -du * ev + dv * eu
        mask = (s / semi_major) ** 2 + (t / semi_minor) ** 2 <= 1.0
        centre_depth = depth + project(0.0, 0.0, leaf.attach_height)[2]
        shapes.append((centre_depth, mask, _leaf_rgb(leaf.shade)))

    # painter's order: farthest first
    for _, mask, rgb in sorted(shapes, key=lambda s: -s[0]):
        img[mask] = rgb
    return img.transpose(2, 0, 1)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, H, W) in [0, 1] -> (H, W, 3) uint8 via round(255 v)."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def foreground_pixels(img: np.ndarray, background: float) -> int:
    q = to_uint8(img)
    bg = np.uint8(round(background * 255))
    return int(np.any(q != bg, axis=-1).sum())


# --- dataset writer --------------------------------------------------------


def image_path(root, crop: str, plant: str, day: int, level: int, angle: int) -> Path:
    return Path(root) / crop / plant / f"day_{day:03d}" / f"L{level}" / f"angle_{angle:03d}.png"


def _write_png(path: Path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG", compress_level=6)


def generate_crop(specs: Sequence[PlantSpec], days: Iterable[int], cfg: RenderConfig, out_root):
    """Render every (plant, day, level, angle) view and write ``labels.csv`` per crop.

    Returns the :class:`~mvvt.data.Manifest` of everything written.
    """
    from .data import Manifest, Record

    specs = list(specs)
    if not specs:
        raise ValueError("generate_crop needs at least one PlantSpec")
    ids = [(s.crop, s.plant_id) for s in specs]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise ValueError(f"duplicate plant ids: {dupes}")
    days = list(days)
    out_root = Path(out_root)
    records, labels = [], {}
    for spec in specs:
        for day in days:
            state = growth_state(spec, day)
            labels.setdefault(spec.crop, []).append((spec.plant_id, day, day, state.leaf_count))
            for level in range(1, cfg.num_levels + 1):
                level_dir = image_path(out_root, spec.crop, spec.plant_id, day, level, 0).parent
                level_dir.mkdir(parents=True, exist_ok=True)
                for angle in cfg.angles:
                    path = image_path(out_root, spec.crop, spec.plant_id, day, level, angle)
                    _write_png(path, render_view(state, angle, level, cfg))
                    records.append(Record(spec.crop, spec.plant_id, day, level, angle, str(path), day, state.leaf_count))
    for crop, rows in labels.items():
        with open(out_root / crop / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["plant", "day", "age_days", "leaf_count"])
            w.writerows(rows)
    return Manifest(records)
