"""Ablation runs over the synthetic benchmark, shared by scripts/ and the
acceptance tests."""

import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence

import numpy as np

from .data import SyntheticSpec, generate
from .evaluate import SCALES_1, evaluate_benchmark
from .trainer import TrainConfig, TrainLog, train

# name -> TrainConfig overrides; single_phase trains all T epochs without triplets
VARIANTS: Dict[str, dict] = {
    "arcface": {"single_phase": True, "fixed_arcface": True},
    "madacos": {"single_phase": True},
    "madacos_two_phase_no_triplet": {"lam": 0.0},
    "madacos_triplet_no_hns": {"no_hns": True},
    "madacos_triplet_no_matching": {"no_matching": True},
    "cfcd": {},
}


@dataclass
class RunResult:
    variant: str
    seed: int
    maps: Dict[str, float]
    seconds: float
    log: TrainLog = field(repr=False, default=None)


def run_variants(
    variants: Sequence[str],
    seeds: Sequence[int],
    spec: SyntheticSpec = None,
    base: TrainConfig = None,
    scales=SCALES_1,
) -> List[RunResult]:
    spec = spec or SyntheticSpec()
    base = base or TrainConfig(validate=False)
    out = []
    for seed in seeds:
        g = generate(replace(spec, seed=seed))
        for name in variants:
            overrides = dict(VARIANTS[name])
            if overrides.pop("single_phase", False):
                overrides["E"] = base.T
            cfg = replace(base, seed=seed, **overrides).check()
            t0 = time.perf_counter()
            res = train(g.database, cfg)
            maps = {split: evaluate_benchmark(res.model, g.database, g.queries, b, scales)[0]
                    for split, b in g.benchmarks.items()}
            out.append(RunResult(name, seed, maps, time.perf_counter() - t0, res.log))
    return out


def median_map(results: Sequence[RunResult], variant, split="hard"):
    return float(np.median([r.maps[split] for r in results if r.variant == variant]))


def scale_trend(log: TrainLog, phase=1):
    """Per-epoch mean of s, the share of consecutive epochs where it does not
    drop, and whether it ends above where it started."""
    s = log.epoch_mean("s", phase=phase)
    if s.size < 2:
        return s, 1.0, False
    share = float(np.mean(np.diff(s) >= 0))
    return s, share, bool(s[-1] > s[0])
