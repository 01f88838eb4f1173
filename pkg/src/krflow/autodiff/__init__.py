from .engine import (
    NonFiniteError,
    Tape,
    Var,
    add,
    component,
    concat,
    diagonal2d,
    exp,
    leaf,
    log,
    log_abs,
    matmul,
    mean_base,
    mul,
    narrow,
    reciprocal,
    relu,
    reshape_base,
    softplus,
    spatial_derivs,
    spatial_leaf,
    square,
    sub,
    sum_base,
    take_per_dim,
    tanh,
    transpose2d,
    where_mask,
)
from .dual import DualScalar, Jet, divergence
from .fd import fd_check, fd_check_norm, fd_grad, fd_jacobian, fd_second


def grad_params(loss_fn, store, validate: bool = False):
    """Gradient of a scalar loss with respect to every stored parameter.

    ``loss_fn(params, tape)`` receives a name->Var mapping over the store's
    entries and must return a scalar variable built from engine ops. Returns
    a float64 vector aligned with the store's flat layout.
    """
    tape = Tape(validate=validate)
    pvars = store.leaf_vars(tape)
    loss = loss_fn(pvars, tape)
    tape.backward(loss)
    grads = store.collect_grads(pvars)
    tape.release()
    return grads
