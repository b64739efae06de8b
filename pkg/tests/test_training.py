import csv

import numpy as np
import pytest

from deepgesi import autodiff as ad
from deepgesi import checkpoint as ckpt_io
from deepgesi.evaluation import Scorer
from deepgesi.labels import ManifestEntry, load_manifest
from deepgesi.training import (
    AdamState, NumericError, TrainConfig, Trainer, TrainingError, adam_step, clip_by_global_norm,
    loss, split_dataset, train,
)
from helpers import TINY_FB_KWARGS, TINY_STFT, gradcheck, tiny_model_cfg


def _t(v):
    return ad.Tensor(np.asarray(v, dtype=np.float64))


def test_loss_hand_example():
    out = loss([_t([0.5, 0.9])], [_t(0.7)], [0.5], alpha=1.0)
    assert out.value == pytest.approx(0.12, abs=1e-15)


def test_loss_zero_and_alpha_zero(rng):
    assert loss([_t([0.3, 0.3])], [_t(0.3)], [0.3]).value == 0.0
    f = [_t(rng.uniform(0, 1, 5)), _t(rng.uniform(0, 1, 3))]
    u = [_t(0.4), _t(0.6)]
    l0 = loss(f, u, [0.5, 0.2], alpha=0.0).value
    assert l0 == ((0.4 - 0.5) ** 2 + (0.6 - 0.2) ** 2) / 2


def test_loss_ragged_batch_and_errors(rng):
    f = [rng.uniform(0, 1, 4), rng.uniform(0, 1, 7)]
    y = [0.2, 0.9]
    expect = sum((np.mean(fi) - yi) ** 2 for fi, yi in zip(f, y)) / 2
    expect += sum(np.mean((fi - yi) ** 2) for fi, yi in zip(f, y)) / 2
    out = loss([_t(x) for x in f], [_t(np.mean(x)) for x in f], y)
    assert out.value == pytest.approx(expect, rel=1e-14)
    with pytest.raises(ValueError, match="empty"):
        loss([], [], [])
    with pytest.raises(ValueError, match="zero frames"):
        loss([_t([])], [_t(0.5)], [0.5])


def test_loss_gradient(rng):
    def op(f1, f2):
        return loss([f1, f2], [ad.mean(f1), ad.mean(f2)], [0.3, 0.8], alpha=0.7)

    assert gradcheck(op, [rng.uniform(0, 1, 5), rng.uniform(0, 1, 3)], rng) < 1e-4


def test_split_dataset():
    entries = [ManifestEntry(f"{i}.wav", 0.5, "train") for i in range(100)]
    tr, va, te = split_dataset(entries, seed=1)
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    assert sorted(e.audio_path for e in tr + va + te) == sorted(e.audio_path for e in entries)
    assert split_dataset(entries, seed=1) == (tr, va, te)
    with pytest.raises(TrainingError):
        split_dataset(entries[:9])


def _adam_cfg(**kw):
    return TrainConfig(**kw)


def test_adam_first_step_is_lr():
    p = {"w": ad.Tensor(np.array([1.0]))}
    state = AdamState.zeros(p)
    adam_step(p, {"w": np.array([1.0])}, state, _adam_cfg(lr=1e-3))
    assert p["w"].value[0] == pytest.approx(1.0 - 1e-3, rel=1e-9)
    assert state.step == 1


def test_adam_zero_gradient_decays_moments():
    p = {"w": ad.Tensor(np.array([2.0, -1.0]))}
    state = AdamState.zeros(p)
    cfg = _adam_cfg()
    adam_step(p, {"w": np.array([1.0, 1.0])}, state, cfg)
    before = p["w"].value.copy()
    m, v = state.m["w"].copy(), state.v["w"].copy()
    adam_step(p, {"w": np.zeros(2)}, state, cfg)
    np.testing.assert_allclose(state.m["w"], 0.9 * m)
    np.testing.assert_allclose(state.v["w"], 0.999 * v)
    # zero gradient still moves parameters via momentum; with fresh state it does not
    q = {"w": ad.Tensor(before.copy())}
    adam_step(q, {"w": np.zeros(2)}, AdamState.zeros(q), cfg)
    np.testing.assert_array_equal(q["w"].value, before)


def test_adam_non_finite_names_parameter():
    p = {"block0.wq": ad.Tensor(np.ones(2))}
    with pytest.raises(NumericError, match="block0.wq"):
        adam_step(p, {"block0.wq": np.array([1.0, np.nan])}, AdamState.zeros(p), _adam_cfg())


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_by_global_norm(g, 1.0) == 5.0
    np.testing.assert_allclose(np.hypot(g["a"], g["b"]), 1.0)


def test_train_config_validation():
    for bad in (dict(lr=0), dict(batch_size=0), dict(alpha=-1), dict(dtype="float16")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def _tiny_train(entries, out, **kw):
    cfg = TrainConfig(**{"max_epochs": 3, "batch_size": 4, "lr": 1e-3, **kw})
    return train(entries, cfg, tiny_model_cfg(), out, TINY_STFT, fb_kwargs=TINY_FB_KWARGS)


def test_train_writes_artifacts(small_dataset, tmp_path):
    entries = load_manifest(small_dataset)
    res = _tiny_train(entries, tmp_path)
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "val_lcc"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    assert res.best_path.is_file() and res.last_path.is_file()
    assert 0 < Scorer.load(res.best_path).score_file(entries[0].audio_path) < 1


def test_train_needs_train_and_val(small_dataset, tmp_path):
    entries = [e for e in load_manifest(small_dataset) if e.split == "train"]
    with pytest.raises(TrainingError, match="val"):
        _tiny_train(entries, tmp_path)


def test_patience_zero_stops_one_epoch_after_first_miss(small_dataset, tmp_path, monkeypatch):
    seq = iter([0.5, 0.4, 0.45, 0.3, 0.2])
    monkeypatch.setattr(Trainer, "validate", lambda self, utts: (next(seq), 0.0))
    res = _tiny_train(load_manifest(small_dataset), tmp_path, max_epochs=10, early_stop_patience=0)
    assert len(res.history) == 3 and res.stopped_early


def test_patience_two(small_dataset, tmp_path, monkeypatch):
    seq = iter([0.5, 0.6, 0.7, 0.4, 0.5, 0.6, 0.7, 0.1])
    monkeypatch.setattr(Trainer, "validate", lambda self, utts: (next(seq), 0.0))
    res = _tiny_train(load_manifest(small_dataset), tmp_path, max_epochs=20, early_stop_patience=2)
    assert len(res.history) == 7


def test_divergence_keeps_last_good_checkpoint(small_dataset, tmp_path, monkeypatch):
    entries = load_manifest(small_dataset)
    calls = {"n": 0}
    real = Trainer.train_step

    def step(self, batch):
        calls["n"] += 1
        if self.epoch == 1:
            raise NumericError("non-finite loss")
        return real(self, batch)

    monkeypatch.setattr(Trainer, "train_step", step)
    with pytest.raises(NumericError):
        _tiny_train(entries, tmp_path)
    ck = ckpt_io.load(tmp_path / "last.ckpt")
    assert ck.meta["epoch"] == 1


def test_checkpoint_byte_identical_round_trip(small_dataset, tmp_path):
    res = _tiny_train(load_manifest(small_dataset), tmp_path, max_epochs=1)
    data = res.last_path.read_bytes()
    assert ckpt_io.to_bytes(ckpt_io.load(res.last_path)) == data
    with pytest.raises(ckpt_io.CheckpointError, match="not a checkpoint"):
        ckpt_io.from_bytes(b"x" * 40)
    with pytest.raises(ckpt_io.CheckpointError, match="past the end"):
        ckpt_io.from_bytes(data[:-10])


@pytest.mark.parametrize("dtype,tol", [("float64", 0.0), ("float32", 1e-6)])
def test_resume_matches_uninterrupted(small_dataset, tmp_path, dtype, tol):
    entries = load_manifest(small_dataset)
    full = _tiny_train(entries, tmp_path / "full", max_epochs=3, dtype=dtype)
    _tiny_train(entries, tmp_path / "part", max_epochs=1, dtype=dtype)
    cfg = TrainConfig(max_epochs=3, batch_size=4, lr=1e-3, dtype=dtype)
    resumed = train(entries, cfg, tiny_model_cfg(), tmp_path / "part", TINY_STFT,
                    resume=tmp_path / "part" / "last.ckpt")
    a = ckpt_io.load(full.last_path).tensors
    b = ckpt_io.load(resumed.last_path).tensors
    assert a.keys() == b.keys()
    for k in a:
        assert np.max(np.abs(a[k] - b[k]), initial=0.0) <= tol, k
    assert [h["epoch"] for h in resumed.history] == [1, 2, 3]
