"""krflow: invertible triangular flows with exact densities, plus a
residual-loss solver for steady-state Fokker-Planck equations."""

__version__ = "0.1.0"

from .flow import FlowConfig, KRNet, count_parameters, init_params, ndof_formula

__all__ = [
    "FlowConfig",
    "KRNet",
    "count_parameters",
    "init_params",
    "ndof_formula",
    "__version__",
]
