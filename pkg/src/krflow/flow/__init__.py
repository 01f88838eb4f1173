from .config import FlowConfig, count_parameters, mesh_knots, ndof_formula
from .layers import (
    SingularLayerError,
    coupling_forward,
    coupling_inverse,
    nonlinear_forward,
    nonlinear_inverse,
    rotation_forward,
    rotation_inverse,
    scale_bias_forward,
    scale_bias_inverse,
)
from .model import KRNet, krnet_forward, krnet_inverse, standard_normal_log_pdf
from .params import ParameterStore, copy_matching, init_params, param_specs

__all__ = [
    "FlowConfig",
    "KRNet",
    "ParameterStore",
    "SingularLayerError",
    "copy_matching",
    "count_parameters",
    "coupling_forward",
    "coupling_inverse",
    "init_params",
    "krnet_forward",
    "krnet_inverse",
    "mesh_knots",
    "ndof_formula",
    "nonlinear_forward",
    "nonlinear_inverse",
    "param_specs",
    "rotation_forward",
    "rotation_inverse",
    "scale_bias_forward",
    "scale_bias_inverse",
    "standard_normal_log_pdf",
]
