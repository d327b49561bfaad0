"""Desk-scale flood-filling-network segmentation.

From-scratch 3D conv primitives and the FFN architecture, synchronous
data-parallel training over a ring-allreduce collective, flood-fill
inference, and the Rand/VOI evaluation suite, all wired into one CLI.
"""

from .data import extract_examples, gen_synthetic, load_volume, save_volume
from .inference import FfnPredictor, find_seeds, segment_volume
from .metrics import evaluate_segmentation, rand_counts_fast, voi
from .model import FfnConfig, FfnParams, forward, init_params, load_checkpoint, save_checkpoint
from .optim import AdamState, LrPolicy, adam_step, effective_lr
from .trainer import TrainSettings, bench_scaling, run_training

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "FfnConfig",
    "FfnParams",
    "FfnPredictor",
    "LrPolicy",
    "TrainSettings",
    "adam_step",
    "bench_scaling",
    "effective_lr",
    "evaluate_segmentation",
    "extract_examples",
    "find_seeds",
    "forward",
    "gen_synthetic",
    "init_params",
    "load_checkpoint",
    "load_volume",
    "rand_counts_fast",
    "run_training",
    "save_checkpoint",
    "save_volume",
    "segment_volume",
    "voi",
    "__version__",
]
