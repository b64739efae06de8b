"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test records a PASS/FAIL/WARN/SKIP line that conftest prints at the
end of the run.  The training experiments (6, 7, 8, 11) carry the ``slow``
marker; deselect them with ``-m "not slow"``.
"""
import os
import time
import warnings

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from deepgesi import autodiff as ad
from deepgesi import checkpoint as ckpt_io
from deepgesi.evaluation import Scorer, bench, evaluate, lcc, mse, srcc
from deepgesi.features import extract, sinc_bandpass, sinc_kernels
from deepgesi.labels import load_manifest, split_counts, synth_dataset
from deepgesi.model import ModelConfig, ModelParams, RopeTable, apply_rope, forward_utterance
from deepgesi.training import TrainConfig, Trainer, loss, train
from helpers import (
    EPS, OP_CASES, TINY_STFT, gradcheck, naive_mse, naive_pearson, naive_spearman, numeric_grad,
    record, rel_err, tiny_filterbank, tiny_model_cfg,
)

INSTANCES = 20


def check(num, title, ok, detail=""):
    record(num, title, "PASS" if ok else "FAIL", detail)
    assert ok, f"criterion {num} ({title}) failed: {detail}"


# -- 1. gradients -------------------------------------------------------------

def _random_cutoffs(rng, n):
    # away from the |.| kink at 0 and the Nyquist clamp
    return rng.uniform(100, 3000, n), rng.uniform(100, 3000, n)


def _component_cases():
    cases = {name: case for name, case in OP_CASES.items()}
    cases["sinc_kernels"] = (
        lambda lo, bw: sinc_kernels(tiny_filterbank(low_hz=lo, band_hz=bw)),
        lambda r: list(_random_cutoffs(r, 4)),
    )
    cases["sinc_bandpass"] = (
        lambda f1, f2: sinc_bandpass(f1, f2, 17, 16000),
        lambda r: [r.uniform(50, 3000, 3), r.uniform(3100, 7900, 3)],
    )
    cases["rope"] = (
        lambda x: apply_rope(x, RopeTable(6)),
        lambda r: [r.standard_normal((2, int(r.integers(1, 6)), 6))],
    )
    cases["maxout_pieces"] = (
        lambda x: ad.maxout(x, 2),
        lambda r: [r.standard_normal((int(r.integers(1, 5)), 6))],
    )
    cases["loss"] = (
        lambda f1, f2: loss([f1, f2], [ad.mean(f1), ad.mean(f2)], [0.3, 0.8], alpha=1.0),
        lambda r: [r.uniform(0, 1, int(r.integers(1, 6))), r.uniform(0, 1, int(r.integers(1, 6)))],
    )
    return cases


def _end_to_end_error(rng, n_coords=24):
    """Relative error of the utterance+frame loss gradient over sampled
    coordinates of every model parameter and all filterbank cutoffs."""
    cfg = tiny_model_cfg()
    params = ModelParams.init(cfg, rng, dtype=np.float64, std=0.3)
    lo, bw = _random_cutoffs(rng, 4)
    fb = tiny_filterbank(low_hz=ad.Tensor(lo, requires_grad=True), band_hz=ad.Tensor(bw, requires_grad=True))
    x = rng.standard_normal(int(rng.integers(400, 700)))
    target = rng.uniform(0.1, 0.9)
    named = dict(params.items())
    named.update(fb.parameters())

    def objective():
        frames, utt = forward_utterance(extract(x, TINY_STFT, fb), params, cfg)
        return loss([frames], [utt], [target])

    for t in named.values():
        t.zero_grad()
    objective().backward()
    sizes = np.array([t.size for t in named.values()])
    names = list(named)
    picks = [("sinc.low_hz", i) for i in range(4)] + [("sinc.band_hz", i) for i in range(4)]
    for j in rng.choice(len(names), n_coords, p=sizes / sizes.sum()):
        picks.append((names[j], int(rng.integers(named[names[j]].size))))
    analytic, numeric = [], []
    for name, i in picks:
        t = named[name]
        analytic.append(t.grad.reshape(-1)[i])
        with ad.no_grad():
            numeric.append(numeric_grad(lambda *_: float(objective().value), [t.value], 0, EPS, [i])[0])
    return rel_err(analytic, numeric)


def test_c1_gradient_oracle():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = {}
    for name, (op, make) in _component_cases().items():
        worst[name] = max(gradcheck(op, make(rng), rng) for _ in range(INSTANCES))
    e2e = max(_end_to_end_error(rng) for _ in range(INSTANCES))
    elapsed = time.perf_counter() - t0
    op_name, op_err = max(worst.items(), key=lambda kv: kv[1])
    detail = (f"{len(worst)} components x {INSTANCES}, worst {op_name} {op_err:.1e} (< 1e-4); "
              f"end-to-end worst {e2e:.1e} (< 1e-3); {elapsed:.0f} s (< 120 s)")
    check(1, "finite-difference gradients", op_err < 1e-4 and e2e < 1e-3 and elapsed < 120, detail)


# -- 2-5. closed-form properties ------------------------------------------------

def test_c2_rope_relative_displacement():
    rng = np.random.default_rng(202)
    table = RopeTable(64)

    def rot(v, t):
        return apply_rope(ad.Tensor(v[None, :]), table, np.array([t])).value[0]

    worst = 0.0
    for _ in range(INSTANCES):
        q, k = rng.standard_normal(64), rng.standard_normal(64)
        for delta in (1, 5, 50):
            dots = [rot(q, t) @ rot(k, t + delta) for t in (0, 10, 100, 1000)]
            worst = max(worst, float(np.ptp(dots)))
    check(2, "RoPE relative displacement", worst < 1e-5, f"max variation over t {worst:.1e} (< 1e-5)")


def _magnitude_db(spec, hz):
    return 20 * np.log10(spec[int(round(hz))])


def test_c3_sinc_spectral_check():
    rng = np.random.default_rng(303)
    margins = []
    for _ in range(10):
        # both octave-outside points stay below Nyquist and clear of the
        # window's transition band
        f1 = rng.uniform(600, 2000)
        f2 = min(f1 * rng.uniform(1.5, 3.0), 3900.0)
        k = sinc_bandpass(ad.Tensor([f1]), ad.Tensor([f2]), 129, 16000).value[0]
        spec = np.abs(np.fft.rfft(k, 16000))  # 1 Hz bins
        centre = _magnitude_db(spec, (f1 + f2) / 2)
        margins.append(centre - max(_magnitude_db(spec, f1 / 2), _magnitude_db(spec, 2 * f2)))
    zero = sinc_bandpass(ad.Tensor([1234.5]), ad.Tensor([1234.5]), 129, 16000).value
    ok = min(margins) >= 20 and not zero.any()
    check(3, "sinc band-pass spectrum", ok,
          f"min centre-vs-octave margin {min(margins):.1f} dB (>= 20); f1 = f2 kernel all zero: {not zero.any()}")


def test_c4_maxout_realizes_relu():
    rng = np.random.default_rng(404)
    d = 10
    # piece 0 copies the input, piece 1 is the zero map
    w = np.zeros((d, 2 * d))
    w[np.arange(d), 2 * np.arange(d)] = 1.0
    exact = True
    for dtype in (np.float64, np.float32):
        x = ad.Tensor(rng.standard_normal((1000, d)).astype(dtype))
        frozen = ad.maxout(ad.linear(x, ad.Tensor(w.astype(dtype)), ad.Tensor(np.zeros(2 * d, dtype))), 2)
        exact &= np.array_equal(frozen.value, ad.relu(x).value)
    check(4, "frozen 2-piece Maxout equals ReLU", exact, "10^4 inputs at 64 and 32 bit, bitwise equal")


def test_c5_loss_identity():
    out = loss([ad.Tensor([0.5, 0.9])], [ad.Tensor(0.7)], [0.5], alpha=1.0)
    check(5, "loss identity", out.value == 0.12, f"L = {float(out.value)!r} (expected 0.12 exactly)")


# -- 9. metrics -----------------------------------------------------------------

def test_c9_metric_oracles():
    rng = np.random.default_rng(909)
    worst, with_ties, done = 0.0, 0, 0
    while done < 100:
        n = int(rng.integers(2, 60))
        p, t = rng.standard_normal(n), rng.standard_normal(n)
        if done % 3 == 0:
            p, t = np.round(p), np.round(2 * t)
        if np.ptp(p) == 0 or np.ptp(t) == 0:
            continue
        with_ties += len(np.unique(p)) < n or len(np.unique(t)) < n
        worst = max(worst, abs(mse(p, t) - naive_mse(p, t)), abs(lcc(p, t) - naive_pearson(p, t)),
                    abs(srcc(p, t) - naive_spearman(list(p), list(t))))
        done += 1
    check(9, "metric oracles", worst < 1e-12 and with_ties > 0,
          f"100 vectors ({with_ties} with ties), max |diff| {worst:.1e} (< 1e-12)")


# -- 10. latency ----------------------------------------------------------------

def test_c10_latency():
    scorer = Scorer(Trainer(ModelConfig(), TrainConfig(dtype="float32")).to_checkpoint())
    signal = 0.05 * np.random.default_rng(1010).standard_normal(6 * 16000)
    means = []
    with threadpool_limits(1):
        # a shared VM can stall a whole trial; up to three trials of 20 runs
        for _ in range(3):
            means.append(bench(scorer, [signal], repetitions=20, warmup=3)["mean"] * 1e3)
            if means[-1] <= 50.0:
                break
    trials = ", ".join(f"{m:.1f}" for m in means)
    check(10, "latency, 6 s utterance, 1 thread, float32", means[-1] <= 50.0,
          f"mean {means[-1]:.1f} ms (<= 50; trials {trials})")


# -- 6. overfit ---------------------------------------------------------------------

def _overfit(entries, max_steps=2000, target=1e-3):
    tr = Trainer(ModelConfig(), TrainConfig())
    utts = tr.load(entries)
    tr.fit_norm(utts)
    steps, history = 0, []
    steps_per_epoch = -(-len(utts) // tr.cfg.batch_size)
    while steps + steps_per_epoch <= max_steps:
        tr.run_epoch(utts)
        steps += steps_per_epoch
        history.append(tr.predict(utts)[1])
        if history[-1] < target:
            break
    state = b"".join(p.value.tobytes() for p in tr.all_params().values())
    return steps, history, state


@pytest.mark.slow
def test_c6_overfit_and_determinism(tmp_path):
    entries = load_manifest(synth_dataset(32, 7, tmp_path))
    runs, times = [], []
    for _ in range(2):
        t0 = time.perf_counter()
        runs.append(_overfit(entries))
        times.append(time.perf_counter() - t0)
    (steps, history, state), (_, history2, state2) = runs
    converged = history[-1] < 1e-3
    same = history == history2 and state == state2
    detail = (f"loss {history[-1]:.2e} after {steps} steps (< 1e-3 within 2000); "
              f"runs bitwise identical: {same}; {max(times):.0f} s per run (< 600 s)")
    check(6, "overfit 32 utterances, deterministic", converged and same and max(times) < 600, detail)


# -- 7, 8. generalization and ablation --------------------------------------------

# epochs per run: enough for the validation LCC to plateau on this data
C7_EPOCHS = 12
_runs = {}


@pytest.fixture(scope="module")
def synth640(tmp_path_factory):
    t0 = time.perf_counter()
    manifest = synth_dataset(640, 11, tmp_path_factory.mktemp("synth640"))
    return load_manifest(manifest), time.perf_counter() - t0


def _held_out_run(entries, out, activation="maxout", pe="rope"):
    key = (activation, pe)
    if key not in _runs:
        t0 = time.perf_counter()
        res = train(entries, TrainConfig(max_epochs=C7_EPOCHS),
                    ModelConfig(activation=activation, positional_encoding=pe), out / f"{activation}_{pe}")
        report = evaluate(Scorer.load(res.best_path), [e for e in entries if e.split == "test"])
        _runs[key] = (report, time.perf_counter() - t0)
    return _runs[key]


@pytest.mark.slow
def test_c7_generalization(synth640, tmp_path_factory):
    entries, synth_s = synth640
    counts = split_counts(entries)
    report, train_s = _held_out_run(entries, tmp_path_factory.mktemp("c7"))
    total = synth_s + train_s
    ok = (counts["train"], counts["test"]) == (512, 64) and report.lcc >= 0.8 and report.srcc >= 0.75
    check(7, "held-out generalization", ok and total < 45 * 60,
          f"{counts['train']} train / {counts['test']} held out: LCC {report.lcc:.4f} (>= 0.8), "
          f"SRCC {report.srcc:.4f} (>= 0.75), MSE {report.mse:.5f}; {total / 60:.1f} min (< 45)")


@pytest.mark.slow
def test_c8_ablation_direction(synth640, tmp_path_factory):
    entries, _ = synth640
    out = tmp_path_factory.mktemp("c8")
    base = _held_out_run(entries, out)[0].lcc
    relu = _held_out_run(entries, out, activation="relu")[0].lcc
    learned = _held_out_run(entries, out, pe="learned")[0].lcc
    detail = (f"LCC maxout {base:.4f} vs relu {relu:.4f}; "
              f"rope {base:.4f} vs learned PE {learned:.4f}")
    if base >= relu and base >= learned:
        record(8, "ablation direction (soft)", "PASS", detail)
    else:
        record(8, "ablation direction (soft)", "WARN", detail + " (ordering reversed)")
        warnings.warn(f"ablation ordering reversed at desk scale: {detail}")


# -- 11. checkpoints --------------------------------------------------------------

@pytest.mark.slow
def test_c11_checkpoint_round_trip(small_dataset, tmp_path):
    entries = load_manifest(small_dataset)
    cfg = TrainConfig(max_epochs=3, dtype="float32")
    full = train(entries, cfg, ModelConfig(), tmp_path / "full")
    train(entries, TrainConfig(max_epochs=1, dtype="float32"), ModelConfig(), tmp_path / "part")
    resumed = train(entries, cfg, ModelConfig(), tmp_path / "part", resume=tmp_path / "part" / "last.ckpt")
    data = full.last_path.read_bytes()
    identical = ckpt_io.to_bytes(ckpt_io.load(full.last_path)) == data
    a, b = ckpt_io.load(full.last_path).tensors, ckpt_io.load(resumed.last_path).tensors
    diff = max(float(np.max(np.abs(a[k] - b[k]), initial=0.0)) for k in a)
    ok = identical and a.keys() == b.keys() and diff <= 1e-6
    check(11, "checkpoint round trip and resume", ok,
          f"save-load-save byte-identical: {identical}; resumed vs uninterrupted max |diff| {diff:.1e} (<= 1e-6)")


# -- 12. external evaluation set --------------------------------------------------

def test_c12_external_unseen_set():
    manifest = os.environ.get("DEEPGESI_CPC2_MANIFEST")
    checkpoint = os.environ.get("DEEPGESI_CPC2_CHECKPOINT")
    if not (manifest and checkpoint):
        record(12, "external unseen-set evaluation (report only)", "SKIP",
               "set DEEPGESI_CPC2_MANIFEST and DEEPGESI_CPC2_CHECKPOINT to run")
        pytest.skip("external evaluation data not supplied")
    entries = [e for e in load_manifest(manifest) if e.split == "unseen"] or load_manifest(manifest)
    report = evaluate(Scorer.load(checkpoint), entries, condition="unseen")
    record(12, "external unseen-set evaluation (report only)", "PASS",
           f"n={len(report.pairs)} MSE {report.mse:.4f} LCC {report.lcc:.4f} SRCC {report.srcc:.4f} "
           f"(published reference 0.0034 / 0.9289 / 0.9212)")
