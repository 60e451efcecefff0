import math

import numpy as np
import pytest

from cfcd.data import SyntheticSpec, generate
from cfcd.errors import ConfigError
from cfcd.model import checkpoint_bytes, load_checkpoint
from cfcd.trainer import (
    EPOCH_FIELDS,
    STEP_FIELDS,
    TrainConfig,
    TrainLog,
    balanced_batches,
    cosine_lr,
    train,
)


@pytest.fixture(scope="module")
def tiny():
    spec = SyntheticSpec(n_classes=4, samples_per_class=8, queries_per_class=2, d_in=4, sigma_bg=0.5, seed=0)
    return generate(spec)


def cfg(**kw):
    base = dict(T=4, E=2, N=16, d_c=8, d_g=8, Q=3, validate=False)
    base.update(kw)
    return TrainConfig(**base)


class TestCosineLR:
    def test_values(self):
        assert cosine_lr(0, 100, 0.01) == 0.01
        assert cosine_lr(50, 100, 0.01) == pytest.approx(0.005, abs=1e-15)
        assert cosine_lr(25, 100, 0.01) == pytest.approx(0.008536, abs=1e-6)
        assert cosine_lr(25, 100, 0.01) == pytest.approx(0.005 * (1 + math.cos(math.pi / 4)), abs=1e-15)

    @pytest.mark.parametrize("step", [-1, 100])
    def test_out_of_range(self, step):
        with pytest.raises(ValueError):
            cosine_lr(step, 100, 0.01)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.lam, c.lr0, c.lr2, c.momentum, c.weight_decay) == (0.05, 0.01, 0.005, 0.9, 1e-4)
        assert c.rho == 0.02 and c.eps == pytest.approx(math.exp(-7))

    @pytest.mark.parametrize("kw", [{"E": 5, "T": 4}, {"E": -1}, {"lam": -0.1}, {"N": 1}, {"Q": 0},
                                    {"tau": 0.0}, {"loss": "triplet"}, {"rho": 0.7}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw).check()

    def test_yaml_round_trip(self, tmp_path):
        c = TrainConfig(T=7, E=3, lam=0.1, no_hns=True)
        c.dump(tmp_path / "c.yaml")
        assert TrainConfig.load(tmp_path / "c.yaml") == c

    def test_lambda_spelling(self, tmp_path):
        (tmp_path / "c.yaml").write_text("lambda: 0.2\nT: 25\n")
        assert TrainConfig.load(tmp_path / "c.yaml").lam == 0.2
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"lambda": 0.1, "lam": 0.1})

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"epochs": 3})

    def test_bool_must_be_bool(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"no_hns": "yes"})

    def test_fixed_arcface_overrides_loss(self):
        assert TrainConfig(loss="adacos", fixed_arcface=True).classifier == "arcface"


class TestBalancedBatches:
    def test_covers_each_sample_once(self, rng):
        labels = np.repeat(np.arange(5), 7)
        batches = balanced_batches(labels, 8, rng)
        flat = np.concatenate(batches)
        assert sorted(flat) == list(range(35))

    def test_classes_interleaved(self, rng):
        labels = np.repeat(np.arange(4), 10)
        for b in balanced_batches(labels, 8, rng):
            assert np.all(np.bincount(labels[b], minlength=4) == 2)


class TestTrain:
    def test_pure_phase_one(self, tiny):
        res = train(tiny.database, cfg(E=4, T=4))
        assert np.all(res.log.column("loss_trip") == 0.0)
        assert set(res.log.column("phase")) == {1}
        assert res.predictions is None

    def test_log_shape(self, tiny):
        res = train(tiny.database, cfg())
        steps = res.log.column("step")
        assert np.array_equal(steps, np.arange(len(steps)))
        assert [e["epoch"] for e in res.log.epochs] == [1, 2, 3, 4]
        # phase 2: batches of N // (Q + 2) = 3 whole tuples, 32 tuples per epoch
        assert sum(1 for r in res.log.steps if r["epoch"] == 3) == math.ceil(32 / 3)

    def test_total_is_weighted_sum(self, tiny):
        res = train(tiny.database, cfg(lam=0.3))
        for r in res.log.steps:
            if r["phase"] == 2:
                assert abs(r["total"] - (r["loss_mda"] + 0.3 * r["loss_trip"])) <= 1e-12
        assert res.log.column("loss_trip").max() > 0

    def test_zero_lambda_ignores_triplet_settings(self, tiny):
        a = train(tiny.database, cfg(lam=0.0, mu=0.1, tau=30.0))
        b = train(tiny.database, cfg(lam=0.0, mu=0.9, tau=80.0))
        assert checkpoint_bytes(a.model) == checkpoint_bytes(b.model)
        c = train(tiny.database, cfg(lam=0.5))
        assert checkpoint_bytes(a.model) != checkpoint_bytes(c.model)

    def test_phase_one_unaffected_by_phase_two(self, tiny, tmp_path):
        train(tiny.database, cfg(E=2, T=2), out_dir=tmp_path / "a")
        train(tiny.database, cfg(E=2, T=4), out_dir=tmp_path / "b")
        for e in (1, 2):
            name = f"ckpt_epoch{e:03d}.bin"
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_deterministic(self, tiny, tmp_path):
        for run in ("a", "b"):
            res = train(tiny.database, cfg(), out_dir=tmp_path / run)
            res.log.write_steps_csv(tmp_path / run / "steps.csv")
        for name in ("steps.csv", "final.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_checkpoints(self, tiny, tmp_path):
        res = train(tiny.database, cfg(), out_dir=tmp_path)
        assert len(res.checkpoints) == 5
        assert checkpoint_bytes(load_checkpoint(res.checkpoints[-1])) == checkpoint_bytes(res.model)

    def test_fixed_arcface(self, tiny):
        log = train(tiny.database, cfg(fixed_arcface=True)).log
        assert np.all(log.column("s") == 30.0) and np.all(log.column("m") == 0.15)

    def test_cosface(self, tiny):
        log = train(tiny.database, cfg(loss="cosface")).log
        assert np.all(log.column("s") == 48.33) and np.all(log.column("m") == 0.33)

    def test_adacos(self, tiny):
        log = train(tiny.database, cfg(loss="adacos", E=2, T=2)).log
        assert np.allclose(log.column("s"), math.sqrt(2) * math.log(3))

    @pytest.mark.parametrize("flag", ["no_matching", "no_hns"])
    def test_ablations_run(self, tiny, flag):
        res = train(tiny.database, cfg(**{flag: True}))
        assert res.log.column("loss_trip").max() > 0
        if flag == "no_hns":
            assert res.predictions == {int(i): int(c) for i, c in zip(tiny.database.ids, tiny.database.labels)}

    def test_learns(self, tiny):
        res = train(tiny.database, cfg(E=8, T=8, lr0=0.05))
        accs = [e["train_acc"] for e in res.log.epochs]
        assert accs[-1] > accs[0]

    def test_does_not_mutate_initial_model(self, tiny):
        first = train(tiny.database, cfg(E=1, T=1)).model
        before = checkpoint_bytes(first)
        train(tiny.database, cfg(E=1, T=1), model=first)
        assert checkpoint_bytes(first) == before

    def test_validation_map_logged(self, tiny):
        res = train(tiny.database, cfg(E=1, T=1, validate=True),
                    benchmark=tiny.benchmarks["medium"], queries=tiny.queries)
        assert 0.0 < res.log.epochs[0]["val_map"] <= 1.0

    def test_bad_config(self, tiny):
        with pytest.raises(ConfigError):
            train(tiny.database, cfg(E=5, T=4))


class TestTrainLogCSV:
    def test_headers_and_round_trip(self, tiny, tmp_path):
        res = train(tiny.database, cfg())
        res.log.write_steps_csv(tmp_path / "steps.csv")
        res.log.write_epochs_csv(tmp_path / "epochs.csv")
        assert (tmp_path / "steps.csv").read_text().splitlines()[0] == ",".join(STEP_FIELDS)
        assert (tmp_path / "epochs.csv").read_text().splitlines()[0] == ",".join(EPOCH_FIELDS)
        back = TrainLog.read_steps_csv(tmp_path / "steps.csv")
        assert back == res.log.steps
