"""Attention-restricted reciprocal nearest-neighbour matching of local
descriptors and the triplet hinge loss over the resulting matches.

A grid is a ``(d_c, d_w, d_h)`` array; a position is a ``(row, col)`` pair
indexing its spatial plane. Descriptors are used as-is (no normalization).
Ties are always broken towards the smallest ``(row, col)``.
"""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import EmptyCandidates, InvalidTau, ShapeMismatch

Position = Tuple[int, int]


@dataclass(frozen=True)
class AttentionRegion:
    positions: Tuple[Position, ...]  # descending l1 norm, ties by (row, col)
    tau: float

    def flat(self, width_h):
        return np.array([r * width_h + c for r, c in self.positions], dtype=np.int64)


@dataclass(frozen=True)
class MatchSet:
    pairs: Tuple[Tuple[Position, Position], ...]

    def __len__(self):
        return len(self.pairs)

    def swapped(self):
        return MatchSet(tuple(sorted((p, a) for a, p in self.pairs)))


def region_size(z, tau):
    return max(1, math.ceil(tau * z / 100.0))


def _flat_descriptors(grid):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3:
        raise ShapeMismatch(f"expected a (d_c, d_w, d_h) grid, got shape {grid.shape}")
    return grid.reshape(grid.shape[0], -1).T  # (Z, d_c)


def attention_select(grid, tau) -> AttentionRegion:
    """Top ``tau`` percent of positions by descriptor l1 norm."""
    if not 0 < tau <= 100:
        raise InvalidTau(f"tau must lie in (0, 100], got {tau!r}")
    grid = np.asarray(grid, dtype=np.float64)
    desc = _flat_descriptors(grid)
    l1 = np.sum(np.abs(desc), axis=1)
    order = np.argsort(-l1, kind="stable")[: region_size(l1.size, tau)]
    h = grid.shape[2]
    return AttentionRegion(tuple((int(i // h), int(i % h)) for i in order), tau)


def _sq_dist(a, b):
    """Pairwise squared Euclidean distances via explicit differences, so that
    d(a, b) and d(b, a) are bitwise equal."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sum(diff * diff, axis=-1)


def nearest_neighbor(f, candidates: Sequence[Tuple[Position, np.ndarray]]):
    """Closest candidate to ``f`` in Euclidean distance; returns ``(position, descriptor)``."""
    if len(candidates) == 0:
        raise EmptyCandidates("nearest_neighbor needs at least one candidate")
    cands = sorted(candidates, key=lambda pc: tuple(pc[0]))
    stack = np.array([np.asarray(d, dtype=np.float64) for _, d in cands])
    d = _sq_dist(np.asarray(f, dtype=np.float64)[None, :], stack)[0]
    best = int(np.argmin(d))
    return tuple(cands[best][0]), cands[best][1]


def match_pairs(F_a, F_p, tau) -> MatchSet:
    """Reciprocal nearest neighbours between the attention regions of two grids."""
    F_a = np.asarray(F_a, dtype=np.float64)
    F_p = np.asarray(F_p, dtype=np.float64)
    if F_a.shape[0] != F_p.shape[0]:
        raise ShapeMismatch(f"channel mismatch {F_a.shape[0]} vs {F_p.shape[0]}")
    ha, hp = F_a.shape[2], F_p.shape[2]
    ia = np.sort(attention_select(F_a, tau).flat(ha))
    ip = np.sort(attention_select(F_p, tau).flat(hp))
    da = _flat_descriptors(F_a)[ia]
    dp = _flat_descriptors(F_p)[ip]
    dist = _sq_dist(da, dp)
    nn_ap = np.argmin(dist, axis=1)  # for each anchor descriptor, its NN among positives
    nn_pa = np.argmin(dist, axis=0)
    keep = np.flatnonzero(nn_pa[nn_ap] == np.arange(ia.size))
    pairs = tuple(
        ((int(ia[i] // ha), int(ia[i] % ha)), (int(ip[nn_ap[i]] // hp), int(ip[nn_ap[i]] % hp)))
        for i in keep
    )
    return MatchSet(pairs)


def local_triplet_loss(matches: MatchSet, F_a, F_p, negatives: List[np.ndarray], mu=0.1):
    """Hinge ``max(0, |va-vp|^2 - |va-vn_j|^2 + mu)`` summed over matches and negatives.

    ``vn_j`` is the nearest descriptor to ``va`` anywhere in negative grid ``j``.
    Returns ``(loss, grad_a, grad_p, grads_n)`` with gradients shaped like the
    grids; nearest-neighbour choices are held fixed.
    """
    if mu < 0:
        raise ValueError(f"mu must be non-negative, got {mu!r}")
    F_a = np.asarray(F_a, dtype=np.float64)
    F_p = np.asarray(F_p, dtype=np.float64)
    grad_a = np.zeros_like(F_a)
    grad_p = np.zeros_like(F_p)
    grads_n = [np.zeros(np.shape(n)) for n in negatives]
    if len(matches) == 0 or not negatives:
        return 0.0, grad_a, grad_p, grads_n
    ha, hp = F_a.shape[2], F_p.shape[2]
    ia = np.array([r * ha + c for (r, c), _ in matches.pairs], dtype=np.int64)
    ip = np.array([r * hp + c for _, (r, c) in matches.pairs], dtype=np.int64)
    va = _flat_descriptors(F_a)[ia]  # (M, d_c)
    vp = _flat_descriptors(F_p)[ip]
    d_ap = va - vp
    pos = np.sum(d_ap * d_ap, axis=1)
    ga = np.zeros_like(va)
    gp = np.zeros_like(vp)
    loss = 0.0
    for j, neg in enumerate(negatives):
        nd = _flat_descriptors(neg)
        # expanded form is fine here: only the argmin is used, exact d_an follows
        idx = np.argmin(np.sum(nd * nd, axis=1)[None, :] - 2.0 * (va @ nd.T), axis=1)
        d_an = va - nd[idx]
        hinge = pos - np.sum(d_an * d_an, axis=1) + mu
        act = hinge > 0
        if not np.any(act):
            continue
        loss += float(np.sum(hinge[act]))
        ga[act] += 2.0 * (d_ap[act] - d_an[act])
        gp[act] -= 2.0 * d_ap[act]
        gn = np.zeros((nd.shape[0], nd.shape[1]))
        np.add.at(gn, idx[act], 2.0 * d_an[act])
        grads_n[j] = gn.T.reshape(np.shape(neg))
    # positions are unique per side, so plain scatter is safe
    grad_a.reshape(F_a.shape[0], -1)[:, ia] = ga.T
    grad_p.reshape(F_p.shape[0], -1)[:, ip] = gp.T
    return loss, grad_a, grad_p, grads_n


def pooled_triplet_loss(g_a, g_p, g_negs, mu=0.1):
    """Triplet hinge on whole-image vectors (the no-matching ablation)."""
    g_a = np.asarray(g_a, dtype=np.float64)
    d_ap = g_a - g_p
    pos = float(np.sum(d_ap * d_ap))
    grad_a = np.zeros_like(g_a)
    grad_p = np.zeros_like(g_a)
    grads_n = [np.zeros_like(g_a) for _ in g_negs]
    loss = 0.0
    for j, g_n in enumerate(g_negs):
        d_an = g_a - g_n
        hinge = pos - float(np.sum(d_an * d_an)) + mu
        if hinge > 0:
            loss += hinge
            grad_a += 2.0 * (d_ap - d_an)
            grad_p -= 2.0 * d_ap
            grads_n[j] += 2.0 * d_an
    return loss, grad_a, grad_p, grads_n
