"""
Finite-difference gradient checking (run in double precision)
"""
import numpy as np

from utils.tensor import backward, no_grad, reset_graph


def relative_error(analytic, numeric):
    """Max absolute deviation scaled by the largest gradient magnitude"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


def numeric_gradient(loss_fn, param, eps=1e-6):
    """Central differences of a scalar loss_fn() with respect to param.data, perturbed in place"""
    grad = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = float(loss_fn().data)
            flat[i] = original - eps
            minus = float(loss_fn().data)
            flat[i] = original
            out[i] = (plus - minus) / (2.0 * eps)
    return grad


def check_gradients(loss_fn, params, eps=1e-6):
    """
    Compare analytic and numeric gradients.

    loss_fn: zero-argument callable returning a scalar Tensor
    params: dict name -> Tensor (float64, requires_grad)
    Returns dict name -> relative error.
    """
    reset_graph()
    for p in params.values():
        p.zero_grad()
    backward(loss_fn())
    errors = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        errors[name] = relative_error(analytic, numeric_gradient(loss_fn, p, eps))
    return errors
