"""rankalloc: communication-aware low-rank adapter rank allocation.

A coarse continuous PPO policy proposes per-module adapter ranks; a
conditional DDIM sampler refines the proposal; a simulated fading channel
plus a surrogate fine-tuning-loss model score the deployed configuration.
"""

__version__ = "0.1.0"
