import numpy as np
import pytest

from cfcd.data import (
    SyntheticSpec,
    generate,
    prototype_image,
    read_dataset,
    read_spec,
    write_dataset,
    write_spec,
)
from cfcd.errors import SpecError

SMALL = dict(n_classes=5, samples_per_class=6, queries_per_class=4)


class TestSpec:
    def test_defaults(self):
        s = SyntheticSpec()
        assert (s.n_classes, s.samples_per_class, s.d_in, s.d_w, s.d_h, s.hard_fraction) == (50, 40, 16, 8, 8, 0.3)

    @pytest.mark.parametrize("kw", [{"occlusion_prob": 1.5}, {"hard_fraction": -0.1}, {"d_in": 0},
                                    {"patch": 9}, {"sigma_bg": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(SpecError):
            generate(SyntheticSpec(**kw))

    def test_unknown_key(self):
        with pytest.raises(SpecError):
            SyntheticSpec.from_dict({"n_clases": 3})

    def test_json_round_trip(self, tmp_path):
        spec = SyntheticSpec(seed=4, sigma_bg=0.5)
        write_spec(spec, tmp_path / "s.json")
        assert read_spec(tmp_path / "s.json") == spec


class TestGenerate:
    def test_deterministic_bytes(self, tmp_path):
        for name in ("a", "b"):
            g = generate(SyntheticSpec(seed=7, **SMALL))
            write_dataset(g.database, tmp_path / f"{name}.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_seed_matters(self):
        a = generate(SyntheticSpec(seed=1, **SMALL)).database.images
        b = generate(SyntheticSpec(seed=2, **SMALL)).database.images
        assert not np.array_equal(a, b)

    def test_label_balance(self):
        g = generate(SyntheticSpec(seed=0, **SMALL))
        assert np.array_equal(np.bincount(g.database.labels), [6] * 5)
        assert g.database.images.shape == (30, 16, 8, 8)
        medium = g.benchmarks["medium"]
        assert len(medium.queries) == 20
        assert not set(medium.queries) & set(medium.database)

    def test_corruption_off(self):
        spec = SyntheticSpec(seed=3, sigma_bg=0.0, occlusion_max=0.0, shift_max=0, **SMALL)
        g = generate(spec)
        for img, lab in zip(g.database.images, g.database.labels):
            diff = img - prototype_image(spec, g.prototypes[lab])
            r0 = c0 = (8 - 4) // 2
            inside = diff[:, r0:r0 + 4, c0:c0 + 4]
            assert np.count_nonzero(diff) == inside.size  # only the patch carries noise
            assert abs(inside.std() - spec.sigma_proto) < 0.15

    def test_no_hard_fraction_splits_identical(self):
        g = generate(SyntheticSpec(seed=0, hard_fraction=0.0, **SMALL))
        assert g.benchmarks["hard"].queries == g.benchmarks["medium"].queries

    def test_hard_split_swaps_queries(self):
        g = generate(SyntheticSpec(seed=0, **SMALL))
        med, hard = g.benchmarks["medium"], g.benchmarks["hard"]
        swapped = set(hard.queries) - set(med.queries)
        assert len(swapped) == 5 * round(0.3 * 4)
        q = g.queries
        rows = q.index_of()
        assert all(q.hard[rows[i]] for i in swapped)

    def test_hard_more_corrupted(self):
        g = generate(SyntheticSpec(seed=0))
        db = g.database
        assert db.hard.sum() == 50 * 12
        assert db.severity[db.hard].min() > db.severity[~db.hard].max()
        q = g.queries
        assert q.severity[q.hard].mean() > q.severity[~q.hard].mean()

    def test_positives_are_same_class(self):
        g = generate(SyntheticSpec(seed=0, **SMALL))
        rows_q, rows_db = g.queries.index_of(), g.database.index_of()
        for split in ("medium", "hard"):
            b = g.benchmarks[split]
            for qid, pos in b.positives.items():
                lab = g.queries.labels[rows_q[qid]]
                assert sorted(pos) == sorted(int(i) for i in g.database.ids[g.database.labels == lab])
                assert all(g.database.labels[rows_db[i]] == lab for i in pos)
                assert b.junk[qid] == []

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_nearest_prototype_beats_chance(self, seed):
        spec = SyntheticSpec(seed=seed)
        g = generate(spec)
        cents = np.array([prototype_image(spec, p).mean(axis=(1, 2)) for p in g.prototypes])
        pooled = g.database.images.mean(axis=(2, 3))
        d = ((pooled[:, None, :] - cents[None]) ** 2).sum(-1)
        acc = float(np.mean(d.argmin(axis=1) == g.database.labels))
        assert acc >= 5.0 / spec.n_classes


class TestIO:
    def test_round_trip(self, tmp_path):
        g = generate(SyntheticSpec(seed=0, **SMALL))
        write_dataset(g.database, tmp_path / "db.jsonl")
        back = read_dataset(tmp_path / "db.jsonl")
        assert np.array_equal(back.ids, g.database.ids)
        assert np.array_equal(back.labels, g.database.labels)
        assert back.images.tobytes() == g.database.images.tobytes()

    def test_record_count(self, tmp_path):
        g = generate(SyntheticSpec(seed=0, **SMALL))
        write_dataset(g.database, tmp_path / "db.jsonl")
        assert len((tmp_path / "db.jsonl").read_text().splitlines()) == 5 * 6

    def test_bad_record(self, tmp_path):
        (tmp_path / "x.jsonl").write_text('{"id": 0, "label": 0, "dims": [1, 2, 2], "values": [1, 2, 3]}\n')
        with pytest.raises(ValueError):
            read_dataset(tmp_path / "x.jsonl")

    def test_concat_files(self, tmp_path):
        g = generate(SyntheticSpec(seed=0, **SMALL))
        write_dataset(g.database, tmp_path / "db.jsonl")
        write_dataset(g.queries, tmp_path / "q.jsonl")
        both = read_dataset(tmp_path / "db.jsonl", tmp_path / "q.jsonl")
        assert len(both) == len(g.database) + len(g.queries)
