"""Dense float64 helpers: normalization, GeM pooling, cosine logits and a
central-difference gradient checker.

Grids are numpy arrays shaped ``(d_c, d_w, d_h)``; matrices are 2-D arrays.
Everything here is a pure function of its inputs.
"""

from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np

from .errors import InvalidP, NonFinite, ZeroVector

ZERO_NORM = 1e-12
ACT_FLOOR = 1e-6


def l2_normalize(v):
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ZeroVector("cannot normalize an empty vector")
    norm = np.sqrt(np.sum(v * v))
    if not norm > ZERO_NORM:
        raise ZeroVector(f"vector norm {norm!r} is below {ZERO_NORM}")
    return v / norm


def l2_normalize_rows(m):
    m = np.asarray(m, dtype=np.float64)
    norms = np.sqrt(np.sum(m * m, axis=-1, keepdims=True))
    if np.any(~(norms > ZERO_NORM)):
        raise ZeroVector("matrix has a zero row")
    return m / norms, norms


def l2_normalize_backward(unit, norm, grad_unit):
    """Pull a gradient on ``unit = v / norm`` back to ``v`` (row-wise)."""
    proj = np.sum(grad_unit * unit, axis=-1, keepdims=True)
    return (grad_unit - unit * proj) / norm


def _check_p(p):
    if not p >= 1:
        raise InvalidP(f"GeM exponent must be >= 1, got {p!r}")


def gem_pool(grid, p=3.0):
    """Generalized mean over the spatial plane of a ``(d_c, d_w, d_h)`` grid.

    Values below ``ACT_FLOOR`` are clamped first so fractional powers exist.
    """
    _check_p(p)
    grid = np.asarray(grid, dtype=np.float64)
    x = np.maximum(grid.reshape(grid.shape[0], -1), ACT_FLOOR)
    return np.mean(x**p, axis=1) ** (1.0 / p)


def gem_pool_batch(x, p=3.0):
    """GeM over the last axis of ``(B, d_c, Z)``; returns ``(pooled, clamped)``."""
    _check_p(p)
    xc = np.maximum(x, ACT_FLOOR)
    return np.mean(xc**p, axis=-1) ** (1.0 / p), xc


def gem_pool_backward(xc, pooled, grad_pooled, p=3.0):
    """Gradient of GeM w.r.t. its (unclamped) input.

    d pooled_c / d x_ci = pooled_c^(1-p) * x_ci^(p-1) / Z, zero where the
    floor was active.
    """
    z = xc.shape[-1]
    scale = (pooled ** (1.0 - p) * grad_pooled)[..., None]
    return scale * xc ** (p - 1.0) / z


def cosine_logits(features, weights):
    """Cosine similarity between every feature row and every weight row."""
    f, _ = l2_normalize_rows(np.atleast_2d(features))
    w, _ = l2_normalize_rows(np.atleast_2d(weights))
    return f @ w.T


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float

    @property
    def passed(self):
        return self.max_rel_error < self.tol


def finite_diff_check(
    f: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    params,
    h: float = 1e-6,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare the analytic gradient returned by ``f`` against central differences.

    ``f(x)`` must return ``(value, grad)``. Per-coordinate relative error is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps coordinates whose true
    gradient is ~0 from dominating through round-off.
    """
    if not 0 < h <= 1e-2:
        raise ValueError(f"step h must lie in (0, 1e-2], got {h!r}")
    x = np.array(params, dtype=np.float64).ravel()
    value, grad = f(x.copy())
    if not np.isfinite(value):
        raise NonFinite(f"function value {value!r} at the base point")
    analytic = np.asarray(grad, dtype=np.float64).ravel()
    numeric = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(xp)[0]
        fm = f(xm)[0]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFinite(f"non-finite value while differencing coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * h)
    abs_err = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = abs_err / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    return GradCheckReport(
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        max_abs_error=float(abs_err.max()) if rel.size else 0.0,
        worst_index=worst,
        analytic=analytic,
        numeric=numeric,
        tol=tol,
    )
