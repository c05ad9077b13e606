"""Dense float64 helpers: cosine similarity, log-softmax, and a finite-difference oracle.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  Every function
that has a backward pass exposes it as a separate ``*_backward`` function taking
the upstream gradient, so loss modules can chain them by hand.
"""
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteFunction, NonPositiveTemperature, ShapeMismatch, ZeroVector

NORM_FLOOR = 1e-12


def as_matrix(x, name="matrix"):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeMismatch(f"{name}: expected a 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteFunction(f"{name}: contains non-finite entries")
    return a


def l2_normalize_rows(x):
    """Return ``(x / ||x_row||, norms)``; raises ZeroVector on a (near) zero row."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.sum(x * x, axis=-1))
    if np.any(norms < NORM_FLOOR):
        raise ZeroVector(f"row norm below {NORM_FLOOR:g}")
    return x / norms[..., None], norms


def l2_normalize_rows_backward(unit, norms, grad):
    """Pull ``grad`` (w.r.t. the unit rows) back through row normalization."""
    radial = np.sum(grad * unit, axis=-1, keepdims=True)
    return (grad - unit * radial) / norms[..., None]


def cosine_matrix(a, b):
    """Pairwise cosine similarity between the rows of ``a`` (p x d) and ``b`` (q x d)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"cosine_matrix: incompatible shapes {a.shape} and {b.shape}")
    ua, _ = l2_normalize_rows(a)
    ub, _ = l2_normalize_rows(b)
    return ua @ ub.T


def cosine_matrix_backward(a, b, grad):
    """Gradients of ``sum(grad * cosine_matrix(a, b))`` with respect to ``a`` and ``b``."""
    ua, na = l2_normalize_rows(a)
    ub, nb = l2_normalize_rows(b)
    da = l2_normalize_rows_backward(ua, na, grad @ ub)
    db = l2_normalize_rows_backward(ub, nb, grad.T @ ua)
    return da, db


def check_temperature(tau):
    if not tau > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau!r}")


def log_softmax(v, tau=1.0, axis=-1):
    """``v/tau - logsumexp(v/tau)`` along ``axis``, shifted by the max for stability."""
    check_temperature(tau)
    z = np.asarray(v, dtype=np.float64) / tau
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax(v, tau=1.0, axis=-1):
    return np.exp(log_softmax(v, tau, axis=axis))


def finite_diff_grad(f, x, eps=1e-6):
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    ``x`` is copied; each coordinate is perturbed by ``+-eps`` in turn.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteFunction(f"f is not finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    worst_coordinate: tuple
    passed: bool
    tolerance: float = 1e-4

    def merge(self, other):
        """Keep whichever report has the larger error; ``passed`` requires both."""
        worst = self if self.max_rel_err >= other.max_rel_err else other
        return GradCheckReport(worst.max_rel_err, worst.worst_coordinate,
                               self.passed and other.passed, self.tolerance)


def check_gradient(f, x, analytic, eps=1e-6, tol=1e-4):
    numeric = finite_diff_grad(f, x, eps)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ShapeMismatch(f"analytic gradient shape {analytic.shape} != {numeric.shape}")
    err = relative_error(analytic, numeric)
    if err.size == 0:
        return GradCheckReport(0.0, (), True, tol)
    idx = np.unravel_index(int(np.argmax(err)), err.shape)
    worst = float(err[idx])
    return GradCheckReport(worst, tuple(int(i) for i in idx), worst < tol, tol)
