"""Wasserstein proximal policy gradient: tabular theory lab and off-policy agents."""

from .agent import TrainConfig, evaluate, train
from .ot1d import ActionGrid, GridDistribution
from .theory_lab import FiniteMdp, TabularPolicy, exact_prox_step, wppg_iterate

__all__ = ["TrainConfig", "train", "evaluate", "ActionGrid", "GridDistribution", "FiniteMdp",
           "TabularPolicy", "exact_prox_step", "wppg_iterate"]
__version__ = "0.1.0"
