"""Policy-iteration laboratory.

Exact tabular schemes (policy iteration, value iteration, modified policy
iteration, and soft greedy variants) with machine-checked monotone
convergence, plus an off-policy clipped-surrogate actor-critic (MoPPO) and
a PPO baseline on small control tasks.
"""

__version__ = "0.1.0"
