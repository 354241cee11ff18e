"""Proximal diffusion neural sampler for unnormalized Boltzmann targets."""
from .approximator import ControlNetSpec, ParamStore, ScoreNetSpec, init_params
from .kernels import BACKEND_NAME
from .ou import OUSchedule, TerminalReward
from .trainer import TrainConfig, World, run_pdns

__version__ = "0.1.0"

__all__ = [
    "BACKEND_NAME",
    "ControlNetSpec",
    "OUSchedule",
    "ParamStore",
    "ScoreNetSpec",
    "TerminalReward",
    "TrainConfig",
    "World",
    "init_params",
    "run_pdns",
]
