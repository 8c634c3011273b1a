"""Preference-aligned realism tuning for desk-scale traffic simulation.

Pipeline: procedurally generate scenes and reference-driver demonstrations,
behavior-clone a stochastic traffic policy, collect best-of-N realism
preferences (synthetic oracle or the bundled annotation service), train a
pairwise reward model, then fine-tune the policy with PPO against the mixed
objective of its original imitation loss plus the scaled learned reward.
"""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
