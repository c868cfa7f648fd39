"""Disentangled physical/residual video forecasting on a small numpy autodiff core."""

from .config import RunConfig, load_config
from .model import PhyDNet
from .train import evaluate, train

__all__ = ["PhyDNet", "RunConfig", "evaluate", "load_config", "train"]
