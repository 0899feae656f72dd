"""Layer-wise structured pruning of a small transformer LM.

A single-step PPO agent proposes per-unit retention scores, which are mapped
to a budget-exact grid policy, applied with a weight-times-activation
criterion and optionally followed by ridge-regression weight calibration.
"""

__version__ = "0.1.0"
