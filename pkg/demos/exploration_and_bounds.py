"""How many random episodes does it take to see the good trajectories?

With N equally likely trajectories of which n_opt are near-optimal, the
chance that k random episodes reveal at least i distinct near-optimal ones
has an inclusion-exclusion closed form.  We print it beside a Monte Carlo
estimate, then turn the numbers into sample-size requirements.

Run:  python demos/exploration_and_bounds.py
"""
from __future__ import annotations

import numpy as np

from rankgrad import theory

rng = np.random.default_rng(0)

print("N  n_opt  k   i   closed    simulated")
for N, n_opt in ((8, 2), (16, 3)):
    for k in (5, 20, 60):
        counts = theory.simulate_exploration(N, n_opt, k, 100_000, rng)
        for i in range(1, n_opt + 1):
            closed = theory.exploration_efficiency_random(N, n_opt, k, i)
            print(f"{N:<3d}{n_opt:<7d}{k:<4d}{i:<4d}{closed:.4f}    {np.mean(counts >= i):.4f}")

print("\nexpected distinct near-optimal trajectories, N=64, n_opt=4")
for k in (16, 64, 256, 1024):
    print(f"  k={k:5d}: {theory.expected_exploration_efficiency(64, 4, k).mean:.3f}")

# supervised samples for a 0.1 gap with 16 hypotheses at 90% confidence
print("\nsamples for gap 0.1, |H|=16, delta=0.1:", theory.sl_sample_complexity(0.1, 0.1, 16))
# samples for a half-optimal policy on a horizon-5 binary problem
print("samples for epsilon=0.5, D=1, m=2, T=5:", theory.rl_sample_complexity(0.5, 1.0, 2, 5, 16, 0.1))
jb = theory.joint_bound(0.5, 9, 200, 8, 3, 16, 2, 3, 1.0)
print(f"joint bound with 200 random episodes: eta {jb.eta:.3f}, return >= {jb.bound:.4f}")
