"""Two-stage heatmap policy with skill-routed mixture-of-experts decoders,
trained from scripted demonstrations in a synthetic tabletop environment."""
from .config import ExperimentConfig, preset
from .pipeline import Policy, build_examples, run_benchmark, train

__all__ = ["ExperimentConfig", "Policy", "build_examples", "preset", "run_benchmark", "train"]
__version__ = "0.1.0"
