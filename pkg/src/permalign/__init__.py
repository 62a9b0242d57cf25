"""Permutation alignment and linear mode connectivity for MLPs."""

from .align import MatchReport, activation_match, align, match, partial_perm, weight_match
from .connectivity import barrier_curve, evaluate, is_linearly_connected, triplet_test
from .data import Dataset, DataBundle, load_data
from .lsa import BACKEND, solve_lsa
from .model import (
    ArchitectureSpec,
    NetworkParams,
    Permutation,
    PermutationSpec,
    apply_permutation,
    build_mlp_spec,
    compose,
    forward,
    interpolate,
    invert,
)
from .sparsity import Mask, imp, magnitude_prune, one_shot_prune, permute_mask
from .train import TrainConfig, init_params, train

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec", "BACKEND", "DataBundle", "Dataset", "Mask", "MatchReport",
    "NetworkParams", "Permutation", "PermutationSpec", "TrainConfig", "activation_match",
    "align", "apply_permutation", "barrier_curve", "build_mlp_spec", "compose", "evaluate",
    "forward", "imp", "init_params", "interpolate", "invert", "is_linearly_connected",
    "load_data", "magnitude_prune", "match", "one_shot_prune", "partial_perm", "permute_mask",
    "solve_lsa", "train", "triplet_test", "weight_match",
]
