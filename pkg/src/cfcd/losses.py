"""Margin-based softmax losses over cosine logits.

All losses take a ``(N, n)`` matrix of cosine logits plus integer labels and
return ``(loss, grad)`` where ``grad`` is d loss / d logits. Scale and margin
are constants as far as the gradient is concerned.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateMedian, InvalidLabel

ARCCOS_CLAMP = 1e-7
MEDIAN_CEILING = 1.0 - 1e-9
DEFAULT_RHO = 0.02
DEFAULT_EPS = math.exp(-7.0)


@dataclass(frozen=True)
class MarginParams:
    """Scale ``s`` with multiplicative angular, additive angular and additive
    cosine margins ``(m1, m2, m3)``. ``(1, 0, 0)`` is a plain normalized softmax."""

    s: float
    m1: float = 1.0
    m2: float = 0.0
    m3: float = 0.0

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"scale must be positive, got {self.s!r}")
        if self.m1 < 1 or self.m2 < 0 or self.m3 < 0:
            raise ValueError(f"invalid margins {(self.m1, self.m2, self.m3)!r}")

    @property
    def angular(self):
        return self.m1 != 1.0 or self.m2 != 0.0

    @classmethod
    def arcface(cls, s=30.0, m=0.15):
        return cls(s=s, m2=m)

    @classmethod
    def cosface(cls, s=30.0, m=0.35):
        return cls(s=s, m3=m)

    @classmethod
    def sphereface(cls, s=30.0, m=1.35):
        return cls(s=s, m1=m)


def _check_batch(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] < 1 or logits.shape[1] < 2:
        raise ValueError(f"logits must be (N>=1, n>=2), got shape {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise InvalidLabel(f"expected {logits.shape[0]} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise InvalidLabel(f"labels must lie in [0, {logits.shape[1]})")
    return logits, labels


def _logsumexp_rows(z):
    zmax = np.max(z, axis=1, keepdims=True)
    return zmax[:, 0] + np.log(np.sum(np.exp(z - zmax), axis=1))


def _softmax_xent(z, labels):
    """Mean cross-entropy of row-wise softmax(z); returns (loss, probs)."""
    rows = np.arange(z.shape[0])
    lse = _logsumexp_rows(z)
    loss = float(np.mean(lse - z[rows, labels]))
    probs = np.exp(z - lse[:, None])
    return loss, probs


def additive_cosine_loss(logits, labels, s, m):
    """Softmax cross-entropy over ``s * cos`` with ``m`` subtracted from the
    target cosine. Shared by CosFace mode and frozen MadaCos."""
    logits, labels = _check_batch(logits, labels)
    n = logits.shape[0]
    rows = np.arange(n)
    z = s * logits
    z[rows, labels] = s * (logits[rows, labels] - m)
    loss, probs = _softmax_xent(z, labels)
    probs[rows, labels] -= 1.0
    return loss, probs * (s / n)


def unified_margin_loss(logits, labels, params: MarginParams):
    """Combined margin softmax: target logit ``s*(cos(m1*theta + m2) - m3)``."""
    if not params.angular:
        return additive_cosine_loss(logits, labels, params.s, params.m3)
    logits, labels = _check_batch(logits, labels)
    n = logits.shape[0]
    rows = np.arange(n)
    s = params.s
    target = logits[rows, labels]
    lo, hi = -1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP
    c = np.clip(target, lo, hi)
    theta = np.arccos(c)
    phase = params.m1 * theta + params.m2
    z = s * logits
    z[rows, labels] = s * (np.cos(phase) - params.m3)
    loss, probs = _softmax_xent(z, labels)
    # d z_target / d cos = s * m1 * sin(m1*theta + m2) / sin(theta)
    dz_dc = s * params.m1 * np.sin(phase) / np.sqrt(1.0 - c * c)
    dz_dc = np.where((target > lo) & (target < hi), dz_dc, 0.0)
    grad = probs * (s / n)
    grad[rows, labels] = (probs[rows, labels] - 1.0) * dz_dc / n
    return loss, grad


@dataclass(frozen=True)
class MadaCosState:
    """Anchor constants plus the last per-batch scale/margin solution."""

    rho: float = DEFAULT_RHO
    eps: float = DEFAULT_EPS
    s: float = float("nan")
    m: float = float("nan")
    cos_m: float = float("nan")
    k: int = -1
    b_tilde: float = float("nan")
    log_b_tilde: float = float("nan")

    def __post_init__(self):
        if not 0 < self.rho < 0.5:
            raise ValueError(f"rho must lie in (0, 0.5), got {self.rho!r}")
        if not 0 < self.eps < 1e-3:
            raise ValueError(f"eps must lie in (0, 1e-3), got {self.eps!r}")


def median_target(logits, labels):
    """Lower median of the target logits and the smallest sample index holding it."""
    logits, labels = _check_batch(logits, labels)
    target = logits[np.arange(logits.shape[0]), labels]
    cos_m = float(np.sort(target)[(target.size - 1) // 2])
    k = int(np.flatnonzero(target == cos_m)[0])
    return cos_m, k


def madacos_scale(cos_m, rho=DEFAULT_RHO, eps=DEFAULT_EPS):
    if not cos_m < MEDIAN_CEILING:
        raise DegenerateMedian(f"median target logit {cos_m!r} leaves the scale unbounded")
    return math.log((1.0 - eps) * (1.0 - rho) / (rho * eps)) / (1.0 - cos_m)


def madacos_solve(logits, labels, state: MadaCosState) -> MadaCosState:
    """Per-batch closed form: scale from the median target logit, then the
    margin that pins the median sample's probability to ``rho``."""
    logits, labels = _check_batch(logits, labels)
    cos_m, k = median_target(logits, labels)
    s = madacos_scale(cos_m, state.rho, state.eps)
    others = np.delete(logits[k], labels[k])
    zo = s * others
    zmax = float(np.max(zo))
    log_b = zmax + math.log(float(np.sum(np.exp(zo - zmax))))
    m = cos_m - (math.log(state.rho) + log_b - math.log1p(-state.rho)) / s
    with np.errstate(over="ignore"):
        b_tilde = float(np.exp(log_b))
    return replace(state, s=s, m=m, cos_m=cos_m, k=k, b_tilde=b_tilde, log_b_tilde=log_b)


def madacos_step(logits, labels, state: MadaCosState):
    """Solve (s, m) for this batch and evaluate the additive-cosine loss with them.

    Returns ``(loss, grad, new_state)``; the input state is not modified.
    """
    new_state = madacos_solve(logits, labels, state)
    loss, grad = additive_cosine_loss(logits, labels, new_state.s, new_state.m)
    return loss, grad, new_state


def madacos_frozen(logits, labels, s, m):
    """MadaCos with scale and margin pinned; reduces to CosFace."""
    return additive_cosine_loss(logits, labels, s, m)


def adacos_scale(n_classes):
    if n_classes < 2:
        raise ValueError(f"need at least two classes, got {n_classes}")
    return math.sqrt(2.0) * math.log(n_classes - 1)


def adacos_baseline(logits, labels, n_classes):
    """Margin-free softmax with the fixed AdaCos scale sqrt(2)*ln(n-1).

    At ``n_classes == 2`` the scale is zero and the loss is ln 2 per sample.
    """
    s = adacos_scale(n_classes)
    logits, labels = _check_batch(logits, labels)
    if logits.shape[1] != n_classes:
        raise ValueError(f"logits have {logits.shape[1]} columns, expected {n_classes}")
    n = logits.shape[0]
    loss, probs = _softmax_xent(s * logits, labels)
    probs[np.arange(n), labels] -= 1.0
    return loss, probs * (s / n)
