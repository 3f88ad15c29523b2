"""Leaky integrate-and-fire networks, STBP training and temporal Fisher analysis."""
from .estimator import SpikingClassifier
from .fisher import FisherProfile, fisher_profile, fisher_trace, information_centroid, layerwise_fisher
from .lif import NetworkConfig, SpikingNetwork, build_network, forward, load_network, save_network
from .pruning import PruningSchedule, compute_efficiency, iterative_prune, tic_select_timestep
from .robustness import AttackParams, deficit_sweep, fgsm, pgd, robust_accuracy
from .stbp import LossConfig, OptimizerConfig, TrainReport, stbp_backward, train

__version__ = "0.1.0"

__all__ = [
    "AttackParams", "FisherProfile", "LossConfig", "NetworkConfig", "OptimizerConfig",
    "PruningSchedule", "SpikingClassifier", "SpikingNetwork", "TrainReport", "build_network",
    "compute_efficiency", "deficit_sweep", "fgsm", "fisher_profile", "fisher_trace", "forward",
    "information_centroid", "iterative_prune", "layerwise_fisher", "load_network", "pgd",
    "robust_accuracy", "save_network", "stbp_backward", "tic_select_timestep", "train",
]
