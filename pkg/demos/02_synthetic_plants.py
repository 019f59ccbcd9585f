"""
A synthetic multi-view plant dataset
====================================

Render one radish plant across growth days and angles, then write a small
dataset in the on-disk layout the loaders expect.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from mvvt.data import Sampling, assemble_sample, make_splits, scan_layout
from mvvt.plantgen import RenderConfig, archetype_specs, foreground_pixels, generate_crop, growth_state, render_view

specs = archetype_specs("radish", seed=0)
print(len(specs), "radish plants, max day", specs[0].max_day)

# leaves and height only ever grow
plant = specs[0]
for day in (1, 10, 20, 40, 59):
    g = growth_state(plant, day)
    print(f"day {day:2d}: {g.leaf_count:2d} leaves, height {g.height:5.1f}")

# more pixels as the plant grows, roughly the same across angles
cfg = RenderConfig(height=64, width=64)
for day in (5, 20, 40):
    state = growth_state(plant, day)
    counts = [foreground_pixels(render_view(state, a, 1, cfg), cfg.background) for a in cfg.angles]
    print(f"day {day}: foreground {min(counts)}..{max(counts)} px over 24 angles")

# write 3 plants x 5 days to disk: 3 * 5 * 5 levels * 24 angles images
root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
manifest = generate_crop(specs[:3], range(1, 6), RenderConfig(height=32, width=32), root)
print(len(manifest), "images under", root)

m = scan_layout(root)
split = make_splits(m)
print("held-out plant:", split.test_plants, "train/val/test items:",
      len(split.train_items), len(split.val_items), len(split.test_items))

# one model input: 4 angles per level stacked channel-wise, 20 views * 3 channels
sample = assemble_sample(m, split.train_items[0], Sampling(4))
print("sample", sample.key, "x", sample.x.shape, "range", float(np.min(sample.x)), float(np.max(sample.x)))
