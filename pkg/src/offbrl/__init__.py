"""Batch (offline) RL for discrete actions: batch Q, dropout lower-bounded
targets, discrete BCQ, KL-control Q and Psi-learning."""

from ._kernels import USE_NUMBA
from .core import (ActionDistribution, Batch, State, TrainingError, Trajectory, Transition, UsageError,
                   kl_divergence, log_sum_exp, softmax)

__version__ = "0.1.0"
