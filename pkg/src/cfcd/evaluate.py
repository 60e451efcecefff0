"""Retrieval evaluation: multi-scale global descriptors, cosine ranking,
revisited-style mAP with junk removal, and cosine-logit diagnostics."""

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .errors import EmptyBenchmark, ShapeMismatch
from .model import forward
from .numeric import l2_normalize_rows

SCALES_1 = (1.0,)
SCALES_3 = (1 / math.sqrt(2), 1.0, math.sqrt(2))
SCALES_5 = (1 / (2 * math.sqrt(2)), 0.5, 1 / math.sqrt(2), 1.0, math.sqrt(2))


@dataclass
class Benchmark:
    queries: List[int]
    database: List[int]
    positives: Dict[int, List[int]]
    junk: Dict[int, List[int]] = field(default_factory=dict)
    split: str = "medium"

    def __post_init__(self):
        if self.split not in ("medium", "hard"):
            raise ValueError(f"split must be 'medium' or 'hard', got {self.split!r}")
        for q in self.queries:
            overlap = set(self.positives.get(q, ())) & set(self.junk.get(q, ()))
            if overlap:
                raise ValueError(f"query {q}: ids {sorted(overlap)[:5]} are both positive and junk")

    def to_json(self):
        return json.dumps({
            "queries": self.queries,
            "database": self.database,
            "positives": {str(k): v for k, v in self.positives.items()},
            "junk": {str(k): v for k, v in self.junk.items()},
            "split": self.split,
        })

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(
            queries=[int(q) for q in d["queries"]],
            database=[int(i) for i in d["database"]],
            positives={int(k): [int(i) for i in v] for k, v in d["positives"].items()},
            junk={int(k): [int(i) for i in v] for k, v in d.get("junk", {}).items()},
            split=d.get("split", "medium"),
        )

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


# --- descriptor extraction --------------------------------------------------

def _resize_axis(x, axis, out_len):
    """Linear resampling along one axis with half-pixel centres (edges clamped)."""
    in_len = x.shape[axis]
    if out_len == in_len:
        return x
    src = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    src = np.clip(src, 0.0, in_len - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_len - 1)
    w = src - lo
    shape = [1] * x.ndim
    shape[axis] = out_len
    w = w.reshape(shape)
    return np.take(x, lo, axis=axis) * (1.0 - w) + np.take(x, hi, axis=axis) * w


def resize_bilinear(grid, scale):
    """Spatially rescale ``(..., d_w, d_h)`` by ``scale``; at least 1x1."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale!r}")
    grid = np.asarray(grid, dtype=np.float64)
    w, h = grid.shape[-2:]
    out_w = max(1, int(round(w * scale)))
    out_h = max(1, int(round(h * scale)))
    return _resize_axis(_resize_axis(grid, grid.ndim - 2, out_w), grid.ndim - 1, out_h)


def extract_global_batch(model, images, scales: Sequence[float] = SCALES_1, chunk=512):
    """Unit descriptors for ``(B, d_in, d_w, d_h)`` images: per-scale F^g are
    l2-normalized, averaged, then normalized again."""
    if len(scales) == 0:
        raise ValueError("need at least one scale")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1] != model.d_in:
        raise ShapeMismatch(f"expected (B, {model.d_in}, d_w, d_h), got {images.shape}")
    out = []
    for start in range(0, images.shape[0], chunk):
        part = images[start : start + chunk]
        acc = np.zeros((part.shape[0], model.d_g))
        for s in scales:
            g, _ = l2_normalize_rows(forward(model, resize_bilinear(part, s)).glob)
            acc += g
        out.append(l2_normalize_rows(acc / len(scales))[0])
    return np.concatenate(out) if out else np.zeros((0, model.d_g))


def extract_global(model, image, scales: Sequence[float] = SCALES_1):
    return extract_global_batch(model, np.asarray(image)[None], scales)[0]


# --- ranking and mAP --------------------------------------------------------

def rank(query, database, ids=None):
    """Database ids by descending cosine similarity, ties by ascending id."""
    db = np.atleast_2d(np.asarray(database, dtype=np.float64))
    if db.shape[0] == 0:
        raise ValueError("database is empty")
    ids = np.arange(db.shape[0]) if ids is None else np.asarray(ids)
    q, _ = l2_normalize_rows(np.atleast_2d(query))
    d, _ = l2_normalize_rows(db)
    sims = (d @ q[0])
    order = np.lexsort((ids, -sims))
    return [int(i) for i in ids[order]]


def average_precision(ranking: Sequence[int], positives, junk=()):
    """Mean over positives of (k / filtered rank of the k-th positive), with
    junk ids dropped from the ranking first. ``None`` without positives."""
    positives = set(positives)
    if not positives:
        return None
    junk = set(junk)
    k = 0
    total = 0.0
    r = 0
    for i in ranking:
        if i in junk:
            continue
        r += 1
        if i in positives:
            k += 1
            total += k / r
    return total / len(positives)


def average_precisions(benchmark: Benchmark, rankings: Dict[int, Sequence[int]]):
    out = {}
    db = set(benchmark.database)
    for q in benchmark.queries:
        pos = benchmark.positives.get(q, [])
        if not pos:
            continue
        ranking = rankings[q]
        if not db.issubset(ranking):
            raise ValueError(f"ranking for query {q} does not cover the database")
        out[q] = average_precision(ranking, pos, benchmark.junk.get(q, ()))
    return out


def mean_average_precision(benchmark: Benchmark, rankings: Dict[int, Sequence[int]]):
    aps = average_precisions(benchmark, rankings)
    if not aps:
        raise EmptyBenchmark("no query has positives")
    return float(np.mean([aps[q] for q in benchmark.queries if q in aps]))


def rank_all(query_desc, db_desc, db_ids):
    """Rankings for a whole query matrix at once (same order as ``rank``)."""
    q, _ = l2_normalize_rows(np.atleast_2d(query_desc))
    d, _ = l2_normalize_rows(np.atleast_2d(db_desc))
    sims = q @ d.T
    ids = np.asarray(db_ids)
    return [[int(i) for i in ids[np.lexsort((ids, -row))]] for row in sims]


def evaluate_benchmark(model, database, queries, benchmark: Benchmark, scales=SCALES_1):
    """Extract, rank and score; returns ``(mAP, {query: AP})``."""
    db = database.subset(benchmark.database)
    qs = queries.subset(benchmark.queries)
    db_desc = extract_global_batch(model, db.images, scales)
    q_desc = extract_global_batch(model, qs.images, scales)
    rankings = dict(zip(benchmark.queries, rank_all(q_desc, db_desc, db.ids)))
    aps = average_precisions(benchmark, rankings)
    if not aps:
        raise EmptyBenchmark("no query has positives")
    return float(np.mean(list(aps.values()))), aps


def write_ap_csv(path, aps, mean_ap, meta=None):
    with open(path, "w", newline="") as fh:
        if meta:
            for k, v in meta.items():
                fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh)
        w.writerow(["query", "ap"])
        for q, ap in aps.items():
            w.writerow([q, repr(float(ap))])
        w.writerow(["mean", repr(float(mean_ap))])


# --- logit diagnostics ------------------------------------------------------

HIST_EDGES = np.linspace(-2.0, 2.0, 201)  # bin width 0.02


@dataclass
class LogitDiagnostics:
    target: np.ndarray  # cos theta_y per sample
    gap: np.ndarray  # cos theta_y - max_{j != y} cos theta_j
    gap_margin: np.ndarray  # cos(theta_y + margin) - max_{j != y} cos theta_j
    margin: float
    edges: np.ndarray = field(default_factory=lambda: HIST_EDGES.copy())

    def histogram(self, values):
        counts, _ = np.histogram(np.clip(values, self.edges[0], self.edges[-1]), bins=self.edges)
        return counts

    @property
    def misaligned_fraction(self):
        return float(np.mean(self.gap < 0))

    @property
    def misaligned_fraction_margin(self):
        return float(np.mean(self.gap_margin < 0))

    def write_csv(self, path):
        cols = {
            "target": self.histogram(self.target),
            "gap": self.histogram(self.gap),
            "gap_margin": self.histogram(self.gap_margin),
        }
        with open(path, "w", newline="") as fh:
            fh.write(f"# margin: {self.margin!r}\n")
            fh.write(f"# misaligned_fraction: {self.misaligned_fraction!r}\n")
            fh.write(f"# misaligned_fraction_margin: {self.misaligned_fraction_margin!r}\n")
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "target", "gap", "gap_margin"])
            for b in range(len(self.edges) - 1):
                w.writerow([f"{self.edges[b]:.2f}", f"{self.edges[b + 1]:.2f}",
                            cols["target"][b], cols["gap"][b], cols["gap_margin"][b]])


def diagnostics_from_logits(logits, labels, margin=0.0):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(logits.shape[0])
    target = logits[rows, labels]
    others = logits.copy()
    others[rows, labels] = -np.inf
    best_other = others.max(axis=1)
    theta = np.arccos(np.clip(target, -1.0, 1.0))
    return LogitDiagnostics(
        target=target,
        gap=target - best_other,
        gap_margin=np.cos(theta + margin) - best_other,
        margin=float(margin),
    )


def logit_diagnostics(model, dataset, margin=0.0, chunk=512):
    """Target-logit and target-vs-best-other gap distributions over a dataset."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    logits = np.concatenate([
        forward(model, dataset.images[i : i + chunk]).logits for i in range(0, len(dataset), chunk)
    ])
    return diagnostics_from_logits(logits, dataset.labels, margin)
