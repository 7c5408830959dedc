"""Off-policy ranking on a binary tree, next to on-policy REINFORCE.

A depth-6 tree has 64 leaves and exactly one leaf pays 1 (the rest pay 0.1).
A uniform random explorer stumbles on the good leaf about once every 64
episodes; every time it does, the whole path goes into the near-optimal
buffer and the ranking model imitates it with a pairwise hinge loss.

Then a second tree with leaves worth 10, 8 and 2 shows what the acceptance
threshold c buys: a stricter c waits longer for its first useful episode.

Run:  python demos/tree_training.py
"""
from __future__ import annotations

import numpy as np

from rankgrad.envs import BinaryTreeParams, make_binary_tree
from rankgrad.harness import aggregate, onpolicy_reinforce_baseline
from rankgrad.offpolicy import TrainRunConfig, train

SEEDS = range(5)


def convergence_demo():
    spec = make_binary_tree(BinaryTreeParams(6, optimal_leaves=(37,)))
    print(f"depth-6 tree, best trajectory reward {spec.max_trajectory_reward():.6f}")
    rpg, rf = [], []
    for seed in SEEDS:
        rpg.append(train(TrainRunConfig(seed=seed, eval_period=240, max_env_steps=50_000), spec))
        rf.append(onpolicy_reinforce_baseline(
            TrainRunConfig(algorithm="reinforce", seed=seed, eval_period=240, max_env_steps=50_000, lr=0.1), spec))
    for name, logs in (("rpg", rpg), ("reinforce", rf)):
        steps = [log.converged_step for log in logs]
        print(f"  {name:9s} steps to greedy-optimal: {steps}")
    # the averaged curve is cut to the grid of the shortest run
    for p in aggregate(rpg)[:5]:
        print(f"  rpg step {p.step:5d}: mean return {p.mean:.3f} +- {p.half_width:.3f}")


def threshold_demo():
    leaves = [2.0] * 32
    leaves[5], leaves[26] = 10.0, 8.0
    spec = make_binary_tree(BinaryTreeParams(5, leaf_rewards=leaves))
    print("\ntree with one leaf worth 10, one worth 8, the rest 2")
    for c in (8.0, 10.0):
        logs = [train(TrainRunConfig(seed=s, threshold=c, max_env_steps=50_000), spec) for s in SEEDS]
        first = np.median([log.first_insert_episode for log in logs])
        final = np.median([log.final_return for log in logs])
        print(f"  c = {c:4.1f}: median first insert at episode {first:5.1f}, median final return {final:.3f}")


if __name__ == "__main__":
    convergence_demo()
    threshold_demo()
