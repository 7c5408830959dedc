"""Ranking policy gradient and off-policy learning via near-optimal replay."""
from __future__ import annotations

from .envs import (BinaryTreeParams, Env, MdpSpec, Trajectory, enumerate_trajectories, make_binary_tree,
                   make_chain, make_grid, parse_env, reset, rollout)
from .model import LambdaModel, finite_difference_check, load_checkpoint, make_model, save_checkpoint, sgd_update
from .offpolicy import ShapingConfig, TrainRunConfig, evaluate, train
from .policy import ListwisePolicy, PairwisePolicy, select_action

__version__ = "0.1.0"

__all__ = [
    "BinaryTreeParams", "Env", "MdpSpec", "Trajectory", "enumerate_trajectories", "make_binary_tree",
    "make_chain", "make_grid", "parse_env", "reset", "rollout", "LambdaModel", "finite_difference_check",
    "load_checkpoint", "make_model", "save_checkpoint", "sgd_update", "ShapingConfig", "TrainRunConfig",
    "evaluate", "train", "ListwisePolicy", "PairwisePolicy", "select_action",
]
