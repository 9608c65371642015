"""Deep Koopman surrogate models and linear MPC for a Jansen-Rit EEG plant."""

from .koopman import KoopmanModel, LiftingConfig
from .mpc import MpcConfig
from .neural_mass import DoubleColumnParams, JansenRitParams, SimTrace, generate_trace

__all__ = [
    "DoubleColumnParams",
    "JansenRitParams",
    "KoopmanModel",
    "LiftingConfig",
    "MpcConfig",
    "SimTrace",
    "generate_trace",
]
__version__ = "0.1.0"
