"""Synthetic retrieval data with background clutter, occlusion and viewpoint
shift, plus JSON-lines dataset I/O.

Every class owns a prototype patch of descriptors. A sample pastes a noisy
copy of its class patch into a noise background, cyclically shifted and with
a contiguous band of the patch occluded. "Hard" samples draw each corruption
from the upper half of its range, ordinary ones from the lower half.
"""

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List

import numpy as np

from .errors import SpecError
from .evaluate import Benchmark


@dataclass
class SyntheticSpec:
    n_classes: int = 50
    samples_per_class: int = 40
    queries_per_class: int = 4
    d_in: int = 16
    d_w: int = 8
    d_h: int = 8
    patch: int = 4
    sigma_proto: float = 0.3
    sigma_bg: float = 0.85
    occlusion_prob: float = 0.5
    occlusion_max: float = 0.6
    shift_max: int = 2
    hard_fraction: float = 0.3
    seed: int = 0

    def validate(self):
        for name in ("n_classes", "samples_per_class", "d_in", "d_w", "d_h", "patch"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be >= 1")
        if self.queries_per_class < 0 or self.shift_max < 0:
            raise SpecError("queries_per_class and shift_max must be >= 0")
        for name in ("occlusion_prob", "occlusion_max", "hard_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SpecError(f"{name} must lie in [0, 1]")
        if self.sigma_proto < 0 or self.sigma_bg < 0:
            raise SpecError("noise levels must be >= 0")
        if self.patch > min(self.d_w, self.d_h):
            raise SpecError("patch does not fit in the grid")
        return self

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown spec keys {sorted(unknown)}")
        try:
            return cls(**d).validate()
        except TypeError as exc:
            raise SpecError(str(exc)) from exc


@dataclass
class Dataset:
    ids: np.ndarray  # (N,) int
    labels: np.ndarray  # (N,) int
    images: np.ndarray  # (N, d_in, d_w, d_h)
    hard: np.ndarray = None  # (N,) bool, generator bookkeeping
    severity: np.ndarray = None  # (N,) mean corruption level in [0, 1]

    def __len__(self):
        return len(self.ids)

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1

    def index_of(self):
        return {int(i): k for k, i in enumerate(self.ids)}

    def subset(self, ids):
        lookup = self.index_of()
        rows = np.array([lookup[int(i)] for i in ids], dtype=np.int64)
        pick = lambda a: None if a is None else a[rows]
        return Dataset(self.ids[rows], self.labels[rows], self.images[rows], pick(self.hard), pick(self.severity))

    @staticmethod
    def concat(parts):
        parts = list(parts)
        opt = lambda name: None if any(getattr(p, name) is None for p in parts) else np.concatenate([getattr(p, name) for p in parts])
        return Dataset(
            np.concatenate([p.ids for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.images for p in parts]),
            opt("hard"),
            opt("severity"),
        )


@dataclass
class Generated:
    database: Dataset
    queries: Dataset
    benchmarks: Dict[str, Benchmark] = field(default_factory=dict)
    prototypes: np.ndarray = None


def _render(rng, spec, proto, hard):
    d_in, w, h, p = spec.d_in, spec.d_w, spec.d_h, spec.patch
    lo = 0.5 if hard else 0.0
    u_bg, u_occ, u_shift = rng.uniform(lo, lo + 0.5, size=3)

    bg_scale = spec.sigma_bg * (0.5 + u_bg)
    img = bg_scale * rng.standard_normal((d_in, w, h))
    patch = proto + spec.sigma_proto * rng.standard_normal(proto.shape)

    keep = np.ones((p, p), dtype=bool)
    occluded = 0.0
    if spec.occlusion_max > 0 and rng.uniform() < spec.occlusion_prob:
        band = int(round(u_occ * spec.occlusion_max * p))
        if band > 0:
            start = int(rng.integers(0, p - band + 1))
            if rng.uniform() < 0.5:
                keep[start : start + band, :] = False
            else:
                keep[:, start : start + band] = False
            occluded = band / p

    shift = np.zeros(2, dtype=int)
    if spec.shift_max > 0:
        mag = np.rint(u_shift * spec.shift_max * np.ones(2)).astype(int)
        shift = mag * rng.choice([-1, 1], size=2)

    r0, c0 = (w - p) // 2, (h - p) // 2
    rows = (np.arange(r0, r0 + p) + shift[0]) % w
    cols = (np.arange(c0, c0 + p) + shift[1]) % h
    for i in range(p):
        for j in range(p):
            if keep[i, j]:
                img[:, rows[i], cols[j]] = patch[:, i, j]
    return img, float((u_bg + u_occ + u_shift) / 3.0), occluded


def prototype_image(spec, proto):
    """The class prototype placed at its canonical position on a zero background."""
    img = np.zeros((spec.d_in, spec.d_w, spec.d_h))
    r0, c0 = (spec.d_w - spec.patch) // 2, (spec.d_h - spec.patch) // 2
    img[:, r0 : r0 + spec.patch, c0 : c0 + spec.patch] = proto
    return img


def _hard_mask(rng, n_classes, per_class, fraction):
    n_hard = int(round(fraction * per_class))
    mask = np.zeros((n_classes, per_class), dtype=bool)
    for c in range(n_classes):
        mask[c, rng.permutation(per_class)[:n_hard]] = True
    return mask


def generate(spec: SyntheticSpec) -> Generated:
    """Database, held-out queries and medium/hard benchmarks.

    The medium split uses ordinary query renders. The hard split swaps the
    first ``round(hard_fraction * queries_per_class)`` queries of every class
    for hard renders of the same class; the rest are shared with medium.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    protos = rng.standard_normal((spec.n_classes, spec.d_in, spec.patch, spec.patch))

    def render_many(labels, hard):
        imgs, sev = [], []
        for c, hd in zip(labels, hard):
            img, s, _ = _render(rng, spec, protos[c], bool(hd))
            imgs.append(img)
            sev.append(s)
        if not imgs:
            return np.zeros((0, spec.d_in, spec.d_w, spec.d_h)), np.zeros(0)
        return np.array(imgs), np.array(sev)

    spc = spec.samples_per_class
    db_labels = np.repeat(np.arange(spec.n_classes), spc)
    db_hard = _hard_mask(rng, spec.n_classes, spc, spec.hard_fraction).ravel()
    db_imgs, db_sev = render_many(db_labels, db_hard)
    database = Dataset(np.arange(db_labels.size), db_labels, db_imgs, db_hard, db_sev)

    qpc = spec.queries_per_class
    q_labels = np.repeat(np.arange(spec.n_classes), qpc)
    q_imgs, q_sev = render_many(q_labels, np.zeros(q_labels.size, dtype=bool))
    next_id = db_labels.size
    q_ids = next_id + np.arange(q_labels.size)
    medium_q = Dataset(q_ids, q_labels, q_imgs, np.zeros(q_labels.size, dtype=bool), q_sev)

    n_hard = int(round(spec.hard_fraction * qpc))
    swap = np.array([k % qpc < n_hard for k in range(q_labels.size)], dtype=bool) if qpc else np.zeros(0, bool)
    h_labels = q_labels[swap]
    h_imgs, h_sev = render_many(h_labels, np.ones(h_labels.size, dtype=bool))
    h_ids = next_id + q_labels.size + np.arange(h_labels.size)
    hard_only = Dataset(h_ids, h_labels, h_imgs, np.ones(h_labels.size, dtype=bool), h_sev)
    queries = Dataset.concat([medium_q, hard_only])

    hard_q_ids = q_ids.copy()
    hard_q_ids[swap] = h_ids

    def bench(query_ids, split):
        positives = {
            int(q): [int(i) for i in database.ids[database.labels == queries.labels[queries.index_of()[int(q)]]]]
            for q in query_ids
        }
        return Benchmark(
            queries=[int(q) for q in query_ids],
            database=[int(i) for i in database.ids],
            positives=positives,
            junk={int(q): [] for q in query_ids},
            split=split,
        )

    return Generated(
        database=database,
        queries=queries,
        benchmarks={"medium": bench(q_ids, "medium"), "hard": bench(hard_q_ids, "hard")},
        prototypes=protos,
    )


# --- JSON-lines I/O ---------------------------------------------------------

def write_dataset(ds: Dataset, path):
    with open(path, "w") as fh:
        for i, lab, img in zip(ds.ids, ds.labels, ds.images):
            rec = {"id": int(i), "label": int(lab), "dims": list(img.shape), "values": img.ravel().tolist()}
            fh.write(json.dumps(rec) + "\n")


def read_dataset(*paths) -> Dataset:
    ids: List[int] = []
    labels: List[int] = []
    images = []
    for path in paths:
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                dims = tuple(int(d) for d in rec["dims"])
                values = np.asarray(rec["values"], dtype=np.float64)
                if values.size != int(np.prod(dims)):
                    raise ValueError(f"record {rec['id']}: {values.size} values for dims {dims}")
                ids.append(int(rec["id"]))
                labels.append(int(rec["label"]))
                images.append(values.reshape(dims))
    if len({im.shape for im in images}) > 1:
        raise ValueError("records disagree on dims")
    return Dataset(np.array(ids, dtype=np.int64), np.array(labels, dtype=np.int64), np.array(images))


def write_spec(spec: SyntheticSpec, path):
    with open(path, "w") as fh:
        json.dump(asdict(spec), fh, indent=2)


def read_spec(path) -> SyntheticSpec:
    with open(path) as fh:
        return SyntheticSpec.from_dict(json.load(fh))
