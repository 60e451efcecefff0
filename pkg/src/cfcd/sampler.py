"""Prediction-aware triplet construction with hard negatives.

Given ground-truth labels and the frozen predictions of a model, every image
is used once as an anchor per epoch. Negatives are spread evenly over pools
defined by what the model predicts for them:

* anchor predicted correctly (class C): ``{P(x)=C}`` (hard) and ``{P(x)!=C}``;
* anchor predicted as D != C: ``{P(x)=C}``, ``{P(x)=D}`` and the rest.

Each pool receives ``Q // k`` slots; the ``Q % k`` leftover slots go to
distinct pools picked at random. A pool that runs dry hands its slot to the
union of the other pools.
"""

import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Mapping, Tuple

import numpy as np

from .errors import InsufficientClass


@dataclass(frozen=True)
class TripletTuple:
    anchor: int
    positive: int
    negatives: Tuple[int, ...]
    cls: int

    def to_json(self):
        return json.dumps(
            {"anchor": self.anchor, "positive": self.positive,
             "negatives": list(self.negatives), "class": self.cls}
        )

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        return cls(int(d["anchor"]), int(d["positive"]), tuple(int(n) for n in d["negatives"]), int(d["class"]))


def negative_pools(cls, anchor_pred, labels, predictions):
    """Pools of candidate negatives (sorted ids) for an anchor of class ``cls``."""
    outside = sorted(i for i, c in labels.items() if c != cls)
    if anchor_pred == cls:
        return [
            [i for i in outside if predictions[i] == cls],
            [i for i in outside if predictions[i] != cls],
        ]
    return [
        [i for i in outside if predictions[i] == cls],
        [i for i in outside if predictions[i] == anchor_pred],
        [i for i in outside if predictions[i] not in (cls, anchor_pred)],
    ]


class _Pool:
    __slots__ = ("ids", "members")

    def __init__(self, ids):
        self.ids = list(ids)
        self.members = set(self.ids)

    def pick(self, rng, used):
        """Uniform draw among ids not in ``used``; None when exhausted."""
        if sum(1 for u in used if u in self.members) >= len(self.ids):
            return None
        while True:
            i = self.ids[int(rng.integers(len(self.ids)))]
            if i not in used:
                return i


def _draw_negatives(rng, pools, union, q):
    k = len(pools)
    slots = [q // k] * k
    if q % k:
        for j in rng.permutation(k)[: q % k]:
            slots[int(j)] += 1
    used = set()
    chosen = []
    for pool, count in zip(pools, slots):
        for _ in range(count):
            pick = pool.pick(rng, used)
            if pick is None:
                pick = union.pick(rng, used)
            if pick is None:
                # fewer distinct negatives than Q: reuse rather than abort
                pick = union.pick(rng, set())
            used.add(pick)
            chosen.append(pick)
    return tuple(chosen)


def build_epoch_triplets(
    labels: Mapping[int, int],
    predictions: Mapping[int, int],
    q: int,
    seed: int,
) -> List[TripletTuple]:
    """One epoch of triplets: round-robin over classes (ascending id), one
    anchor per class per round, anchors drawn without replacement."""
    if q < 1:
        raise ValueError(f"Q must be >= 1, got {q}")
    by_class: Dict[int, List[int]] = defaultdict(list)
    for i in sorted(labels):
        by_class[labels[i]].append(i)
    if len(by_class) < 2:
        raise InsufficientClass("need at least two classes")
    for c, members in by_class.items():
        if len(members) < 2:
            raise InsufficientClass(f"class {c} has {len(members)} image(s), need >= 2")
    missing = [i for i in labels if i not in predictions]
    if missing:
        raise ValueError(f"{len(missing)} image(s) have no prediction, e.g. {missing[0]}")

    rng = np.random.default_rng(seed)
    classes = sorted(by_class)
    remaining = {c: list(by_class[c]) for c in classes}
    pool_cache = {}
    out = []
    while any(remaining.values()):
        for c in classes:
            rest = remaining[c]
            if not rest:
                continue
            anchor = rest.pop(int(rng.integers(len(rest))))
            pred_a = predictions[anchor]
            others = [i for i in by_class[c] if i != anchor]
            if pred_a != c:
                good = [i for i in others if predictions[i] == c]
                others = good or others
            positive = others[int(rng.integers(len(others)))]
            key = (c, pred_a)
            if key not in pool_cache:
                pools = negative_pools(c, pred_a, labels, predictions)
                union = _Pool(sorted(i for p in pools for i in p))
                pool_cache[key] = ([_Pool(p) for p in pools], union)
            negs = _draw_negatives(rng, *pool_cache[key], q)
            out.append(TripletTuple(anchor, positive, negs, c))
    return out


def write_jsonl(tuples, path):
    with open(path, "w") as fh:
        for t in tuples:
            fh.write(t.to_json() + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [TripletTuple.from_json(line) for line in fh if line.strip()]
