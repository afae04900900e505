"""Canards near a folded node under noise: deterministic geometry and stochastic sample paths."""
from .model import (CanardBranch, DomainError, Frame, GlobalReturnParams, JUMP_DENSITY_PARAMS,
                    TWO_LAO_PARAMS, PhasePoint, SystemParams)

__version__ = "0.1.0"

__all__ = ["CanardBranch", "DomainError", "Frame", "GlobalReturnParams", "JUMP_DENSITY_PARAMS",
           "TWO_LAO_PARAMS", "PhasePoint", "SystemParams"]
