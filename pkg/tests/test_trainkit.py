import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmtrisk import numcore as nc
from mmtrisk.cohort import (
    Dataset,
    OutcomeLabel,
    SynthConfig,
    generate_cohort,
    split_by_patient,
)
from mmtrisk.trainkit import (
    MAGIC,
    CheckpointError,
    Ensemble,
    TrainConfig,
    TrainingDiverged,
    ensemble_predict,
    gradcheck_model,
    load_checkpoint,
    member_configs,
    save_checkpoint,
    select_top,
    train,
    train_ensemble,
)

TINY = dict(lr=3e-3, epochs=2, batch_size=8, d=8, n_layers=1, n_heads=2, k=4, patience=0)


@pytest.fixture(scope="module")
def tiny_data():
    data = Dataset(*generate_cohort(SynthConfig(n_patients=90, seed=4, rois_per_image=(2, 4))))
    return split_by_patient(data, (0.6, 0.4, 0.0), seed=4)


@pytest.fixture(scope="module")
def tiny_ckpt(tiny_data):
    return train(tiny_data["train"], tiny_data["val"], TrainConfig(**TINY))


class FixedPredictor:
    def __init__(self, values, auroc=None):
        self.values = np.asarray(values, dtype=float)
        self.validation_metrics = {"diagnosis": {"auroc": auroc}}

    def predict(self, seq):
        return self.values


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kwargs", [{"epochs": 0}, {"lr": 0.0}, {"lr": -1e-3}, {"batch_size": 0}, {"dropout": 1.0}]
    )
    def test_rejected(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_paper_learning_rate_is_default(self):
        assert TrainConfig().lr == 1e-5


class TestTrain:
    def test_returns_best_epoch_snapshot(self, tiny_ckpt):
        hist = tiny_ckpt.history
        assert len(hist["train_loss"]) == 2 and len(hist["val_auroc"]) == 2
        best = hist["best_epoch"]
        assert hist["val_auroc"][best] == max(hist["val_auroc"])
        assert tiny_ckpt.validation_metrics["diagnosis"]["auroc"] == hist["val_auroc"][best]

    def test_deterministic(self, tiny_data, tiny_ckpt, tmp_path):
        again = train(tiny_data["train"], tiny_data["val"], TrainConfig(**TINY))
        save_checkpoint(tiny_ckpt, tmp_path / "a.ckpt")
        save_checkpoint(again, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_seed_matters(self, tiny_data, tiny_ckpt):
        other = train(tiny_data["train"], tiny_data["val"], TrainConfig(**{**TINY, "seed": 1}))
        a, b = tiny_ckpt.params["head.offset"], other.params["head.offset"]
        assert not np.array_equal(a, b)

    def test_empty_training_set(self, tiny_data):
        with pytest.raises(ValueError, match="unmasked"):
            train(tiny_data["train"].subset([]), tiny_data["val"], TrainConfig(**TINY))

    def test_fully_censored_examples_skipped(self, tiny_data):
        tr = tiny_data["train"]
        labels = list(tr.labels)
        labels[0] = OutcomeLabel.from_times(None, 10)
        ck = train(Dataset(tr.sequences, labels), tiny_data["val"], TrainConfig(**{**TINY, "epochs": 1}))
        assert np.isfinite(ck.history["train_loss"][0])

    def test_divergence_reports_batch(self, tiny_data, monkeypatch):
        from mmtrisk import model as model_mod

        calls = {"n": 0}
        real = model_mod.MMTModel.loss

        def flaky(self, *a, **k):
            calls["n"] += 1
            loss = real(self, *a, **k)
            if calls["n"] == 20:
                loss.data = np.array(np.nan)
            return loss

        monkeypatch.setattr(model_mod.MMTModel, "loss", flaky)
        with pytest.raises(TrainingDiverged, match="batch 2") as info:
            train(tiny_data["train"], tiny_data["val"], TrainConfig(**TINY))
        assert info.value.batch_index == 2

    def test_batch_missing_a_modality(self, tiny_data):
        # single-example batches leave some modality projections untouched
        ck = train(tiny_data["train"], tiny_data["val"], TrainConfig(**{**TINY, "epochs": 1, "batch_size": 1}))
        assert np.isfinite(ck.history["train_loss"][0])

    def test_params_registered_once(self, tiny_ckpt):
        m = tiny_ckpt.model()
        ids = [id(p) for p in m.parameters()]
        assert len(ids) == len(set(ids)) == len(tiny_ckpt.params)


class TestCheckpointFiles:
    def test_round_trip_bit_exact(self, tiny_ckpt, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(tiny_ckpt, path)
        back = load_checkpoint(path)
        assert back.config == tiny_ckpt.config
        assert back.validation_metrics == tiny_ckpt.validation_metrics
        assert set(back.params) == set(tiny_ckpt.params)
        for k, v in tiny_ckpt.params.items():
            assert back.params[k].tobytes() == v.tobytes() and back.params[k].shape == v.shape

    def test_loaded_model_predicts_identically(self, tiny_ckpt, tiny_data, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(tiny_ckpt, path)
        seq = tiny_data["val"].sequences[0]
        assert load_checkpoint(path).predict(seq).tobytes() == tiny_ckpt.predict(seq).tobytes()

    def test_truncated(self, tiny_ckpt, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(tiny_ckpt, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-100])
        with pytest.raises(CheckpointError, match="truncated payload at"):
            load_checkpoint(path)

    def test_flipped_byte_names_tensor(self, tiny_ckpt, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(tiny_ckpt, path)
        blob = bytearray(path.read_bytes())
        blob[-3] ^= 0xFF
        path.write_bytes(bytes(blob))
        last = sorted(tiny_ckpt.params)[-1]
        with pytest.raises(CheckpointError, match=f"checksum mismatch at {last}"):
            load_checkpoint(path)

    def _rewrite_header(self, path, edit):
        blob = path.read_bytes()
        pos = len(MAGIC)
        (n,) = struct.unpack("<Q", blob[pos:pos + 8])
        header = json.loads(blob[pos + 8:pos + 8 + n])
        edit(header)
        new = json.dumps(header).encode()
        path.write_bytes(blob[:pos] + struct.pack("<Q", len(new)) + new + blob[pos + 8 + n:])

    def test_version_bump_rejected(self, tiny_ckpt, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(tiny_ckpt, path)
        self._rewrite_header(path, lambda h: h.update(format_version=2))
        with pytest.raises(CheckpointError, match="unsupported version 2"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"hello world, not a checkpoint")
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_trailing_garbage(self, tiny_ckpt, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(tiny_ckpt, path)
        path.write_bytes(path.read_bytes() + b"\0" * 8)
        with pytest.raises(CheckpointError, match="payload size"):
            load_checkpoint(path)

    def test_no_temp_files_left(self, tiny_ckpt, tmp_path):
        save_checkpoint(tiny_ckpt, tmp_path / "m.ckpt")
        assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]


class TestEnsemble:
    def test_mean_exact(self):
        a = FixedPredictor([0.2, 0.3, 0.3, 0.4, 0.5, 0.6])
        b = FixedPredictor([0.4, 0.4, 0.5, 0.5, 0.6, 0.9])
        out = ensemble_predict(Ensemble([a, b]), None)
        assert out.tolist() == ((a.values + b.values) / 2).tolist()
        assert out[0] == 0.30000000000000004 or out[0] == 0.3

    def test_single_member_identity(self, tiny_ckpt, tiny_data):
        seq = tiny_data["val"].sequences[1]
        assert ensemble_predict(Ensemble([tiny_ckpt]), seq).tobytes() == tiny_ckpt.predict(seq).tobytes()

    @settings(max_examples=200)
    @given(st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_mean_of_monotone_is_monotone(self, n, seed):
        rng = np.random.default_rng(seed)
        members = [FixedPredictor(np.sort(rng.random(6))) for _ in range(n)]
        assert np.all(np.diff(ensemble_predict(Ensemble(members), None)) >= 0)

    def test_select_top_order(self):
        runs = [FixedPredictor(np.zeros(6), a) for a in (0.61, 0.74, 0.69)]
        ens = select_top(runs, 2)
        assert ens.members == [runs[1], runs[2]] and ens.size == 2

    def test_select_top_rejects_large_k(self):
        with pytest.raises(ValueError, match="top_k"):
            select_top([FixedPredictor(np.zeros(6), 0.5)], 2)

    def test_empty_ensemble(self):
        with pytest.raises(ValueError):
            Ensemble([])

    def test_member_load_failure_named(self, tmp_path):
        with pytest.raises(CheckpointError, match="member 0"):
            ensemble_predict(Ensemble([str(tmp_path / "missing.ckpt")]), None)

    def test_member_configs_jitter(self):
        cfgs = member_configs(12, TrainConfig(d=8))
        assert {c.n_layers for c in cfgs} <= {2, 3, 4}
        assert {c.n_heads for c in cfgs} <= {2, 4}
        assert len({c.seed for c in cfgs}) == 12
        assert member_configs(12, TrainConfig(d=8)) == cfgs

    def test_train_ensemble_top_k_bound(self, tiny_data):
        with pytest.raises(ValueError, match="top_k"):
            train_ensemble(2, 3, TrainConfig(**TINY), tiny_data["train"], tiny_data["val"])

    def test_train_ensemble_selects_best(self, tiny_data):
        cfg = TrainConfig(**{**TINY, "epochs": 1})
        ens = train_ensemble(3, 2, cfg, tiny_data["train"], tiny_data["val"])
        aurocs = [m.validation_metrics["diagnosis"]["auroc"] for m in ens.members]
        assert ens.size == 2 and aurocs == sorted(aurocs, reverse=True)


@pytest.mark.parametrize("seed", range(5))
def test_end_to_end_gradcheck(seed):
    assert gradcheck_model(seed=seed) < 1e-4


def test_gradcheck_covers_every_parameter(monkeypatch):
    seen = {}
    real = nc.finite_diff_check

    def spy(f, params, step=1e-5):
        seen["n"] = len(params)
        return real(f, params[:1], step)

    monkeypatch.setattr(nc, "finite_diff_check", spy)
    gradcheck_model()
    from mmtrisk.model import MMTModel, ModelConfig

    cfg = ModelConfig(d=8, n_layers=1, n_heads=2, k=3, widths={"FFDM": 4, "DBT": 4, "US": 4})
    assert seen["n"] == len(MMTModel.init(cfg, 0).parameters())
