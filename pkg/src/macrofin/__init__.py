"""PINN solvers and moment-based estimators for two continuous-time
macro-finance equilibrium models, with independent finite-difference and
shooting reference solvers for verification."""

from .tape import HAS_COMPILED_ENGINE, Tape, Var, check_gradient

__version__ = "0.1.0"

__all__ = ["Tape", "Var", "check_gradient", "HAS_COMPILED_ENGINE", "__version__"]
