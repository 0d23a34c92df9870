"""Class-incremental learning by fusing frozen per-round feature extractors."""

from .engine import PRESETS, MethodFlags, TrainConfig, run_continual, run_round
from .evalkit import run_ablation_suite
from .stream import SyntheticSpec, make_class_order, make_synthetic, split_rounds

__version__ = "0.1.0"

__all__ = [
    "MethodFlags", "PRESETS", "SyntheticSpec", "TrainConfig", "make_class_order",
    "make_synthetic", "run_ablation_suite", "run_continual", "run_round", "split_rounds",
]
