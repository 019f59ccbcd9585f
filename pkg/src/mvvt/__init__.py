"""Multi-view vision transformer for plant age and leaf-count regression.

Built on a small numpy reverse-mode autodiff engine, with a deterministic
synthetic multi-view plant generator for testing the pipeline end to end.
"""

from .data import Manifest, Sampling, SplitSpec, assemble_sample, batch_iter, make_splits, scan_layout
from .model import MvvtConfig, count_params, forward, init_params, load_checkpoint, save_checkpoint
from .plantgen import PlantSpec, RenderConfig, archetype_specs, generate_crop, growth_state, render_view
from .tensor import RngStream, Tensor, backward, grad_check, no_grad
from .train import MetricsReport, TrainConfig, evaluate, mae, rmse, train

__version__ = "0.1.0"

__all__ = [
    "Manifest", "Sampling", "SplitSpec", "assemble_sample", "batch_iter", "make_splits", "scan_layout",
    "MvvtConfig", "count_params", "forward", "init_params", "load_checkpoint", "save_checkpoint",
    "PlantSpec", "RenderConfig", "archetype_specs", "generate_crop", "growth_state", "render_view",
    "RngStream", "Tensor", "backward", "grad_check", "no_grad",
    "MetricsReport", "TrainConfig", "evaluate", "mae", "rmse", "train",
]
