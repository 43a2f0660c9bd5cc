"""BitVI: variational inference over fixed-point bitstring representations.

The variational family is a deterministic probabilistic circuit on the
dyadic partition induced by a fixed-point number format, giving closed-form
entropy and an exact linear-time inverse CDF for reparameterized gradients.
"""

from .circuit import BitCircuit, CircuitSample, SmoothingSchedule, new_circuit
from .fixedpoint import FixedPointFormat, parse_bits
from .multivariate import JointTreeCircuit, MeanFieldPosterior, load_posterior
from .targets import TargetDensity, make_target, target_names
from .train import (AdamState, EarlyStopConfig, ElboEstimate, TrainConfig,
                    TrainingError, TrainTrace, adam_step, elbo_estimate, fit,
                    grad_check, reverse_kl)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "BitCircuit",
    "CircuitSample",
    "EarlyStopConfig",
    "ElboEstimate",
    "FixedPointFormat",
    "JointTreeCircuit",
    "MeanFieldPosterior",
    "SmoothingSchedule",
    "TargetDensity",
    "TrainConfig",
    "TrainTrace",
    "TrainingError",
    "adam_step",
    "elbo_estimate",
    "fit",
    "grad_check",
    "load_posterior",
    "make_target",
    "new_circuit",
    "parse_bits",
    "reverse_kl",
    "target_names",
]
