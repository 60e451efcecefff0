"""Two-phase coarse-to-fine training.

Phase 1 (epochs 1..E) trains with the classification loss alone on
class-balanced batches. At epoch E the model's predictions over the training
set are frozen; phase 2 (epochs E+1..T) builds triplet tuples every epoch,
batches whole tuples, and adds ``lam`` times the local triplet loss. Both
phases use SGD with momentum and their own cosine learning-rate decay.
"""

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional

import numpy as np
import yaml

from . import losses
from .data import Dataset
from .errors import ConfigError
from .evaluate import Benchmark, evaluate_benchmark
from .matching import local_triplet_loss, match_pairs, pooled_triplet_loss
from .model import ToyModel, backward, forward, init_model, save_checkpoint
from .sampler import build_epoch_triplets

log = logging.getLogger(__name__)

LOSSES = ("madacos", "arcface", "cosface", "adacos")
ARCFACE_S, ARCFACE_M = 30.0, 0.15
COSFACE_S, COSFACE_M = 48.33, 0.33


@dataclass
class TrainConfig:
    T: int = 30
    E: int = 20
    N: int = 64
    lr0: float = 0.01
    lr2: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lam: float = 0.05
    rho: float = losses.DEFAULT_RHO
    eps: float = losses.DEFAULT_EPS
    tau: float = 30.0
    mu: float = 0.1
    Q: int = 6
    seed: int = 0
    loss: str = "madacos"
    no_matching: bool = False
    no_hns: bool = False
    fixed_arcface: bool = False
    d_c: int = 64
    d_g: int = 64
    validate: bool = True

    def check(self):
        if not 0 <= self.E <= self.T:
            raise ConfigError(f"need 0 <= E <= T, got E={self.E}, T={self.T}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.N < 2:
            raise ConfigError(f"batch size N must be >= 2, got {self.N}")
        if self.Q < 1:
            raise ConfigError(f"Q must be >= 1, got {self.Q}")
        if not 0 < self.tau <= 100:
            raise ConfigError(f"tau must lie in (0, 100], got {self.tau}")
        if self.mu < 0:
            raise ConfigError(f"mu must be >= 0, got {self.mu}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not 0 < self.rho < 0.5 or not 0 < self.eps < 1e-3:
            raise ConfigError("rho must lie in (0, 0.5) and eps in (0, 1e-3)")
        if min(self.lr0, self.lr2) < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("invalid optimizer settings")
        return self

    @property
    def classifier(self):
        return "arcface" if self.fixed_arcface else self.loss

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            # python reserves the word; config files may use either spelling
            if "lam" in d:
                raise ConfigError("give either lambda or lam, not both")
            d["lam"] = d.pop("lambda")
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            kind = type(known[k].default)
            try:
                kwargs[k] = v if kind is bool and isinstance(v, bool) else kind(v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {k}: {v!r}") from exc
            if kind is bool and not isinstance(v, bool):
                raise ConfigError(f"{k} must be true/false, got {v!r}")
        return cls(**kwargs).check()

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            d = yaml.safe_load(fh) or {}
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a key-value mapping")
        return cls.from_dict(d)

    def dump(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(asdict(self), fh, sort_keys=False)


def cosine_lr(step, steps_in_phase, lr_start):
    if not 0 <= step < steps_in_phase:
        raise ValueError(f"step {step} outside [0, {steps_in_phase})")
    return lr_start * 0.5 * (1.0 + math.cos(math.pi * step / steps_in_phase))


STEP_FIELDS = ("epoch", "step", "phase", "loss_mda", "loss_trip", "total", "s", "m", "cos_m", "lr")
EPOCH_FIELDS = ("epoch", "phase", "train_acc", "val_map")


@dataclass
class TrainLog:
    steps: List[dict] = field(default_factory=list)
    epochs: List[dict] = field(default_factory=list)

    def column(self, name):
        return np.array([r[name] for r in self.steps])

    def epoch_mean(self, name, phase=None):
        by_epoch = {}
        for r in self.steps:
            if phase is None or r["phase"] == phase:
                by_epoch.setdefault(r["epoch"], []).append(r[name])
        return np.array([np.mean(by_epoch[e]) for e in sorted(by_epoch)])

    @staticmethod
    def _write(path, header, rows):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in header])

    def write_steps_csv(self, path):
        self._write(path, STEP_FIELDS, self.steps)

    def write_epochs_csv(self, path):
        self._write(path, EPOCH_FIELDS, self.epochs)

    @staticmethod
    def read_steps_csv(path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        out = []
        for r in rows:
            out.append({k: (int(v) if k in ("epoch", "step", "phase") else float(v)) for k, v in r.items()})
        return out


@dataclass
class TrainResult:
    model: ToyModel
    log: TrainLog
    checkpoints: List[str]
    predictions: Optional[dict] = None


class _SGD:
    """v <- momentum * v - lr * (g + wd * w); w <- w + v."""

    def __init__(self, model, momentum, weight_decay):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in model.params().items()}

    def step(self, model, grads, lr):
        for name, w in model.params().items():
            g = getattr(grads, name)
            v = self.velocity[name]
            v *= self.momentum
            v -= lr * (g + self.weight_decay * w)
            w += v
        model.version += 1


def _classification(cfg, state, logits, labels):
    """Returns (loss, grad, state, s, m) for the configured classifier."""
    kind = cfg.classifier
    if kind == "madacos":
        loss, grad, state = losses.madacos_step(logits, labels, state)
        return loss, grad, state, state.s, state.m
    if kind == "arcface":
        loss, grad = losses.unified_margin_loss(logits, labels, losses.MarginParams.arcface(ARCFACE_S, ARCFACE_M))
        return loss, grad, state, ARCFACE_S, ARCFACE_M
    if kind == "cosface":
        loss, grad = losses.madacos_frozen(logits, labels, COSFACE_S, COSFACE_M)
        return loss, grad, state, COSFACE_S, COSFACE_M
    n = logits.shape[1]
    loss, grad = losses.adacos_baseline(logits, labels, n)
    return loss, grad, state, losses.adacos_scale(n), 0.0


def balanced_batches(labels, batch_size, rng):
    """Shuffle within classes, interleave classes round-robin (class order
    reshuffled each round), then cut into batches. Tail batches below two
    samples are dropped."""
    classes = np.unique(labels)
    members = {int(c): list(rng.permutation(np.flatnonzero(labels == c))) for c in classes}
    order = []
    while any(members.values()):
        for c in rng.permutation(classes):
            if members[int(c)]:
                order.append(members[int(c)].pop())
    order = np.array(order, dtype=np.int64)
    batches = [order[i : i + batch_size] for i in range(0, order.size, batch_size)]
    return [b for b in batches if b.size >= 2]


def predict(model, images, chunk=512):
    return np.concatenate([
        np.argmax(forward(model, images[i : i + chunk]).logits, axis=1) for i in range(0, len(images), chunk)
    ])


def _triplet_grads(cfg, rec, n_tuples):
    """Mean local-triplet loss over the tuples laid out consecutively in the
    batch, with its gradient on F^l (or on the pooled vector for the
    no-matching ablation)."""
    width = cfg.Q + 2
    grids = rec.local_grids
    total = 0.0
    if cfg.no_matching:
        d_pooled = np.zeros_like(rec.pooled)
        for t in range(n_tuples):
            base = t * width
            g = rec.pooled[base : base + width]
            loss, ga, gp, gns = pooled_triplet_loss(g[0], g[1], list(g[2:]), cfg.mu)
            total += loss
            d_pooled[base] += ga
            d_pooled[base + 1] += gp
            for j, gn in enumerate(gns):
                d_pooled[base + 2 + j] += gn
        return total / n_tuples, None, d_pooled / n_tuples
    d_local = np.zeros_like(grids)
    for t in range(n_tuples):
        base = t * width
        fa, fp = grids[base], grids[base + 1]
        negs = [grids[base + 2 + j] for j in range(cfg.Q)]
        matches = match_pairs(fa, fp, cfg.tau)
        loss, ga, gp, gns = local_triplet_loss(matches, fa, fp, negs, cfg.mu)
        total += loss
        d_local[base] += ga
        d_local[base + 1] += gp
        for j, gn in enumerate(gns):
            d_local[base + 2 + j] += gn
    return total / n_tuples, d_local / n_tuples, None


def train(
    dataset: Dataset,
    config: TrainConfig,
    out_dir=None,
    benchmark: Optional[Benchmark] = None,
    queries: Optional[Dataset] = None,
    model: Optional[ToyModel] = None,
) -> TrainResult:
    cfg = config.check()
    n_classes = int(dataset.labels.max()) + 1
    if model is None:
        model = init_model(dataset.images.shape[1], cfg.d_c, cfg.d_g, n_classes, seed=cfg.seed)
    else:
        model = model.copy()
    if cfg.E < cfg.T:
        counts = np.bincount(dataset.labels, minlength=n_classes)
        if np.any(counts < 2) or n_classes < 2:
            raise ConfigError("phase 2 needs >= 2 classes with >= 2 images each")

    rng = np.random.default_rng([cfg.seed, 1])
    opt = _SGD(model, cfg.momentum, cfg.weight_decay)
    state = losses.MadaCosState(rho=cfg.rho, eps=cfg.eps)
    tlog = TrainLog()
    ckpts: List[str] = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    step = 0
    labels = dataset.labels
    images = dataset.images

    def end_epoch(epoch, phase, correct, seen):
        val = float("nan")
        if cfg.validate and benchmark is not None and queries is not None:
            val, _ = evaluate_benchmark(model, dataset, queries, benchmark)
        tlog.epochs.append({"epoch": epoch, "phase": phase, "train_acc": correct / max(seen, 1), "val_map": val})
        if out_dir is not None:
            path = os.path.join(out_dir, f"ckpt_epoch{epoch:03d}.bin")
            save_checkpoint(model, path)
            ckpts.append(path)
        log.info("epoch %d phase %d acc %.4f val mAP %.4f", epoch, phase, correct / max(seen, 1), val)

    # phase 1
    steps_per_epoch = len(balanced_batches(labels, cfg.N, np.random.default_rng(0)))
    phase_steps = cfg.E * steps_per_epoch
    k = 0
    for epoch in range(1, cfg.E + 1):
        correct = seen = 0
        for idx in balanced_batches(labels, cfg.N, rng):
            lr = cosine_lr(k, phase_steps, cfg.lr0)
            rec = forward(model, images[idx])
            loss, d_logits, state, s, m = _classification(cfg, state, rec.logits, labels[idx])
            grads = backward(model, rec, d_logits)
            opt.step(model, grads, lr)
            correct += int(np.sum(np.argmax(rec.logits, axis=1) == labels[idx]))
            seen += idx.size
            tlog.steps.append({"epoch": epoch, "step": step, "phase": 1, "loss_mda": loss, "loss_trip": 0.0,
                               "total": loss, "s": float(s), "m": float(m), "cos_m": _median(rec.logits, labels[idx]),
                               "lr": lr})
            step += 1
            k += 1
        end_epoch(epoch, 1, correct, seen)

    predictions = None
    if cfg.E < cfg.T:
        ids = [int(i) for i in dataset.ids]
        row_of = {i: r for r, i in enumerate(ids)}
        label_map = {i: int(labels[r]) for i, r in row_of.items()}
        if cfg.no_hns:
            predictions = dict(label_map)
        else:
            pred = predict(model, images)
            predictions = {i: int(pred[r]) for i, r in row_of.items()}
        per_batch = max(1, cfg.N // (cfg.Q + 2))
        tuples_per_epoch = len(ids)
        phase_steps = (cfg.T - cfg.E) * math.ceil(tuples_per_epoch / per_batch)
        k = 0
        for epoch in range(cfg.E + 1, cfg.T + 1):
            tuples = build_epoch_triplets(label_map, predictions, cfg.Q, seed=cfg.seed * 100003 + epoch)
            correct = seen = 0
            for start in range(0, len(tuples), per_batch):
                chunk = tuples[start : start + per_batch]
                rows = np.array([row_of[i] for t in chunk for i in (t.anchor, t.positive, *t.negatives)])
                lr = cosine_lr(k, phase_steps, cfg.lr2)
                rec = forward(model, images[rows])
                loss_mda, d_logits, state, s, m = _classification(cfg, state, rec.logits, labels[rows])
                loss_trip, d_local, d_pooled = _triplet_grads(cfg, rec, len(chunk))
                if d_local is not None:
                    d_local *= cfg.lam
                if d_pooled is not None:
                    d_pooled *= cfg.lam
                grads = backward(model, rec, d_logits, d_local, d_pooled)
                opt.step(model, grads, lr)
                correct += int(np.sum(np.argmax(rec.logits, axis=1) == labels[rows]))
                seen += rows.size
                tlog.steps.append({"epoch": epoch, "step": step, "phase": 2, "loss_mda": loss_mda,
                                   "loss_trip": loss_trip, "total": loss_mda + cfg.lam * loss_trip,
                                   "s": float(s), "m": float(m), "cos_m": _median(rec.logits, labels[rows]),
                                   "lr": lr})
                step += 1
                k += 1
            end_epoch(epoch, 2, correct, seen)

    if out_dir is not None:
        path = os.path.join(out_dir, "final.bin")
        save_checkpoint(model, path)
        ckpts.append(path)
    return TrainResult(model=model, log=tlog, checkpoints=ckpts, predictions=predictions)


def _median(logits, labels):
    return losses.median_target(logits, labels)[0]
