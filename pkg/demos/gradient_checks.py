"""Are the hand-written gradients right, and how noisy are they?

First every loss is compared with central finite differences on random
parameters for tabular, linear and MLP models.  Then, on a depth-5 tree, the
per-coordinate variance of the REINFORCE gradient is set beside the variance
of the supervised hinge gradient used by the off-policy learner.

Run:  python demos/gradient_checks.py
"""
from __future__ import annotations

import numpy as np

from rankgrad.envs import BinaryTreeParams, Env, make_binary_tree, rollout
from rankgrad.gradients import (grad_variance_report, hinge_loss_and_grad, lpg_trajectory_grad,
                                policy_log_grad_max_norm, supervised_grad_max_norm)
from rankgrad.harness import GRADCHECK_LOSSES, MODEL_KINDS, run_gradcheck
from rankgrad.model import make_model
from rankgrad.policy import sample_index, softmax

for loss in GRADCHECK_LOSSES:
    for kind in MODEL_KINDS:
        trials = run_gradcheck([loss], [kind], trials=20)
        worst = max(t.report.max_rel_error for t in trials)
        print(f"{loss:10s} {kind:8s} max relative error {worst:.2e}")

spec = make_binary_tree(BinaryTreeParams(5, optimal_leaves=(11,)))
rng = np.random.default_rng(1)
model = make_model("tabular", spec.state_count, 2, seed=rng)
model.theta = rng.normal(size=model.n_params)
env = Env(spec, 2)
trajs = [rollout(env, lambda s: sample_index(softmax(model.forward(s)), rng)) for _ in range(5000)]
pg = grad_variance_report([lpg_trajectory_grad(model, t) for t in trajs], policy_log_grad_max_norm(model, trajs),
                          T=spec.horizon, r_max=spec.max_trajectory_reward())
buf = (rng.integers(0, spec.state_count, 64), rng.integers(0, 2, 64))
picks = rng.integers(0, 64, 5000)
sup = grad_variance_report([hinge_loss_and_grad(model, [(int(buf[0][i]), int(buf[1][i]))]) for i in picks],
                           supervised_grad_max_norm(model, buf), kind="supervised")
print(f"\npolicy gradient:     max variance {pg.max_variance:.3e}, ceiling {pg.bound:.3e}")
print(f"supervised gradient: max variance {sup.max_variance:.3e}, ceiling {sup.bound:.3e}")
