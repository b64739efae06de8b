"""Training: the two-level loss, Adam, splits, and the epoch loop."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .audio import load_audio
from .evaluation import MetricError, lcc
from .features import SincFilterbank, StftConfig, align, extract, lfb_features, stft_features
from .labels import assign_splits, load_manifest
from .model import ModelConfig, ModelParams, RopeTable, forward_utterance


class NumericError(RuntimeError):
    """Non-finite loss or gradient."""


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 6
    alpha: float = 1.0
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 0.0  # 0 disables clipping
    standardize: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# -- loss ------------------------------------------------------------------------

def loss(frame_preds, utt_preds, targets, alpha: float = 1.0):
    """L = L_sent + alpha * L_frame over a batch.

    L_sent is the mean squared error of the utterance scores; L_frame
    averages, per utterance, the squared error of every frame score against
    that utterance's target, then averages over the batch.  Utterances may
    have different frame counts.
    """
    B = len(targets)
    if B == 0:
        raise ValueError("loss: empty batch")
    if len(frame_preds) != B or len(utt_preds) != B:
        raise ValueError(f"loss: {len(frame_preds)} frame sets, {len(utt_preds)} utterance scores, {B} targets")
    sent, frame = [], []
    for f, u, y in zip(frame_preds, utt_preds, targets):
        f, u = ad.as_tensor(f), ad.as_tensor(u)
        if f.size == 0:
            raise ValueError("loss: utterance with zero frames")
        sent.append(ad.square(ad.sub(u, y)))
        frame.append(ad.mean(ad.square(ad.sub(f, y))))
    l_sent = ad.mul(_total(sent), 1.0 / B)
    l_frame = ad.mul(_total(frame), 1.0 / B)
    if alpha == 0:
        return l_sent
    return ad.add(l_sent, ad.mul(l_frame, alpha))


def _total(terms):
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return ad.reshape(out, ())


# -- splits ----------------------------------------------------------------------

def split_dataset(entries, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """(train, val, test) with val/test sizes round(n * r) and the remainder in
    train; deterministic in ``seed``."""
    entries = list(entries)
    try:
        labels = assign_splits(len(entries), ratios, seed)
    except ValueError as exc:
        raise TrainingError(str(exc)) from None
    out = {"train": [], "val": [], "test": []}
    for e, lab in zip(entries, labels):
        out[lab].append(e)
    return out["train"], out["val"], out["test"]


# -- Adam ------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, params: dict):
        return cls(0, {k: np.zeros_like(p.value) for k, p in params.items()},
                   {k: np.zeros_like(p.value) for k, p in params.items()})


def _check_finite(grads: dict):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    _check_finite(grads)
    state.step += 1
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.value.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        upd = (cfg.lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.value -= upd.astype(p.value.dtype)
    return state


# -- data ------------------------------------------------------------------------

class _Utterance:
    __slots__ = ("entry", "samples", "stft")

    def __init__(self, entry, samples, stft):
        self.entry = entry
        self.samples = samples
        self.stft = stft


def _load_utterances(entries, stft_cfg, sample_rate, dtype):
    out = []
    for e in entries:
        buf = load_audio(e.audio_path, sample_rate)
        samples = buf.samples.astype(dtype)
        out.append(_Utterance(e, samples, stft_features(buf, stft_cfg, dtype)))
    return out


def feature_stats(utts, fb, floor: float = 1e-5):
    """Per-feature mean and std over all frames of the given utterances, with
    the filterbank at its current cutoffs."""
    total = None
    sq = None
    count = 0
    with ad.no_grad():
        for u in utts:
            fp = extract(u.samples, None, fb, stft_cache=u.stft)
            x = np.concatenate([fp.stft_feats, fp.lfb_feats.value], axis=1).astype(np.float64)
            total = x.sum(axis=0) if total is None else total + x.sum(axis=0)
            sq = (x * x).sum(axis=0) if sq is None else sq + (x * x).sum(axis=0)
            count += x.shape[0]
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean * mean, 0.0))
    return mean, np.maximum(std, floor)


# -- trainer ---------------------------------------------------------------------

class Trainer:
    """Owns the parameters, optimizer state and RNG of one run."""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 stft_cfg: StftConfig = StftConfig(), fb_kwargs=None):
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.stft_cfg = stft_cfg
        self.dtype = np.dtype(train_cfg.dtype).type
        self.rng = np.random.default_rng(train_cfg.seed)
        self.params = ModelParams.init(model_cfg, self.rng, dtype=self.dtype)
        self.fb = SincFilterbank(**(fb_kwargs or {}), dtype=self.dtype)
        self.norm = None
        self.adam = AdamState.zeros(self.all_params())
        self.epoch = 0
        self.best_val = float("inf")
        self.since_best = 0
        self.rope = RopeTable(model_cfg.head_dim) if model_cfg.positional_encoding == "rope" else None

    def all_params(self) -> dict:
        out = dict(self.params.items())
        out.update(self.fb.parameters())
        return out

    # data
    def load(self, entries):
        return _load_utterances(entries, self.stft_cfg, self.fb.sample_rate, self.dtype)

    def fit_norm(self, utts):
        if self.cfg.standardize:
            mean, std = feature_stats(utts, self.fb)
            self.norm = (mean.astype(self.dtype), std.astype(self.dtype))

    # steps
    def _forward(self, u):
        lfb = lfb_features(u.samples, self.fb)
        fp = align(u.stft, lfb)
        return forward_utterance(fp, self.params, self.model_cfg, self.norm, self.rope)

    def train_step(self, batch) -> float:
        """Accumulate gradients one utterance at a time, then take one Adam
        step.  Returns the batch loss."""
        params = self.all_params()
        for p in params.values():
            p.zero_grad()
        B = len(batch)
        total = 0.0
        for u in batch:
            frames, mean = self._forward(u)
            l = ad.mul(loss([frames], [mean], [u.entry.target], self.cfg.alpha), 1.0 / B)
            if not np.isfinite(l.value):
                raise NumericError(f"non-finite loss on {u.entry.audio_path}")
            l.backward()
            total += float(l.value)
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.value)) for k, p in params.items()}
        _check_finite(grads)
        if self.cfg.clip_norm > 0:
            clip_by_global_norm(grads, self.cfg.clip_norm)
        adam_step(params, grads, self.adam, self.cfg)
        return total

    def run_epoch(self, utts) -> float:
        """One shuffled pass; returns the mean batch loss."""
        order = self.rng.permutation(len(utts))
        bs = self.cfg.batch_size
        losses = []
        for s in range(0, len(order), bs):
            losses.append(self.train_step([utts[i] for i in order[s:s + bs]]))
        self.epoch += 1
        return float(np.mean(losses))

    def predict(self, utts):
        """(utterance scores, loss) without building a graph."""
        preds, losses = [], []
        with ad.no_grad():
            for u in utts:
                frames, mean = self._forward(u)
                l = loss([frames], [mean], [u.entry.target], self.cfg.alpha)
                preds.append(float(mean.value))
                losses.append(float(l.value))
        return np.array(preds), float(np.mean(losses))

    def validate(self, utts):
        preds, val_loss = self.predict(utts)
        targets = [u.entry.target for u in utts]
        try:
            val_lcc = lcc(preds, targets)
        except MetricError:
            val_lcc = float("nan")
        return val_loss, val_lcc

    # checkpoints
    def to_checkpoint(self, extra_meta=None) -> ckpt_io.Checkpoint:
        tensors = {}
        for name, p in self.all_params().items():
            tensors["param/" + name] = p.value.copy()
            tensors["adam_m/" + name] = self.adam.m[name].copy()
            tensors["adam_v/" + name] = self.adam.v[name].copy()
        if self.norm is not None:
            tensors["norm/mean"], tensors["norm/std"] = self.norm[0].copy(), self.norm[1].copy()
        meta = {
            "epoch": self.epoch,
            "best_val": _json_float(self.best_val),
            "since_best": self.since_best,
            "adam_step": self.adam.step,
            "rng_state": self.rng.bit_generator.state,
            "train_cfg": self.cfg.to_dict(),
            "dtype": np.dtype(self.dtype).name,
        }
        meta.update(extra_meta or {})
        return ckpt_io.Checkpoint(self.model_cfg, self.stft_cfg, self.fb.hyperparameters(), tensors, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: ckpt_io.Checkpoint, train_cfg: TrainConfig | None = None):
        cfg = train_cfg or TrainConfig(**ckpt.meta["train_cfg"])
        self = cls.__new__(cls)
        self.model_cfg = ckpt.model_cfg
        self.cfg = cfg
        self.stft_cfg = ckpt.stft_cfg
        self.dtype = np.dtype(ckpt.meta.get("dtype", cfg.dtype)).type
        self.params, self.fb, self.norm = ckpt.build()
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = ckpt.meta["rng_state"]
        names = list(self.all_params())
        self.adam = AdamState(
            int(ckpt.meta["adam_step"]),
            {k: ckpt.tensors["adam_m/" + k].copy() for k in names},
            {k: ckpt.tensors["adam_v/" + k].copy() for k in names},
        )
        self.epoch = int(ckpt.meta["epoch"])
        self.best_val = _from_json_float(ckpt.meta["best_val"])
        self.since_best = int(ckpt.meta["since_best"])
        self.rope = RopeTable(self.model_cfg.head_dim) if self.model_cfg.positional_encoding == "rope" else None
        return self


def _json_float(x: float):
    return x if np.isfinite(x) else str(x)


def _from_json_float(x) -> float:
    return float(x)


# -- training run ----------------------------------------------------------------

@dataclass
class TrainResult:
    best_path: Path
    last_path: Path
    history: list  # dicts with epoch, train_loss, val_loss, val_lcc
    stopped_early: bool


def train(entries, train_cfg: TrainConfig, model_cfg: ModelConfig, out_dir,
          stft_cfg: StftConfig = StftConfig(), resume=None, log=None, fb_kwargs=None) -> TrainResult:
    """Fit on the ``train`` split, select on ``val``.

    Writes ``best.ckpt`` (lowest validation loss), ``last.ckpt`` (end of the
    latest epoch) and ``metrics.csv`` under out_dir.  Stops after
    ``max_epochs`` or once more than ``early_stop_patience`` consecutive
    epochs fail to improve the validation loss.  A non-finite loss aborts the
    run; the checkpoints from the last completed epoch are left in place.
    """
    if isinstance(entries, (str, os.PathLike)):
        entries = load_manifest(entries)
    train_e = [e for e in entries if e.split == "train"]
    val_e = [e for e in entries if e.split == "val"]
    if not train_e or not val_e:
        raise TrainingError(f"need train and val entries, got {len(train_e)} train and {len(val_e)} val")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = log or (lambda msg: None)

    if resume is not None:
        trainer = Trainer.from_checkpoint(ckpt_io.load(resume), train_cfg)
    else:
        trainer = Trainer(model_cfg, train_cfg, stft_cfg, fb_kwargs)
    train_u = trainer.load(train_e)
    val_u = trainer.load(val_e)
    if resume is None:
        trainer.fit_norm(train_u)

    metrics_path = out / "metrics.csv"
    history = _read_history(metrics_path) if resume is not None else []
    history = [h for h in history if h["epoch"] <= trainer.epoch]
    best_path, last_path = out / "best.ckpt", out / "last.ckpt"
    stopped_early = False
    while trainer.epoch < trainer.cfg.max_epochs:
        if trainer.since_best > trainer.cfg.early_stop_patience:
            stopped_early = True
            break
        train_loss = trainer.run_epoch(train_u)
        val_loss, val_lcc = trainer.validate(val_u)
        if not np.isfinite(val_loss):
            raise NumericError(f"validation loss became {val_loss} at epoch {trainer.epoch}")
        improved = val_loss < trainer.best_val
        if improved:
            trainer.best_val = val_loss
            trainer.since_best = 0
        else:
            trainer.since_best += 1
        row = {"epoch": trainer.epoch, "train_loss": train_loss, "val_loss": val_loss, "val_lcc": val_lcc}
        history.append(row)
        ck = trainer.to_checkpoint()
        if improved:
            ckpt_io.save(ck, best_path)
        ckpt_io.save(ck, last_path)
        _write_history(metrics_path, history)
        log(f"epoch {trainer.epoch}: train {train_loss:.6f} val {val_loss:.6f} lcc {val_lcc:.4f}"
            + (" *" if improved else ""))
    else:
        stopped_early = trainer.since_best > trainer.cfg.early_stop_patience
    return TrainResult(best_path, last_path, history, stopped_early)


def _write_history(path, history):
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_lcc"])
        for h in history:
            w.writerow([h["epoch"], f"{h['train_loss']:.9g}", f"{h['val_loss']:.9g}", f"{h['val_lcc']:.9g}"])
    os.replace(tmp, path)


def _read_history(path):
    path = Path(path)
    if not path.is_file():
        return []
    with open(path, newline="") as fh:
        return [
            {"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
             "val_loss": float(r["val_loss"]), "val_lcc": float(r["val_lcc"])}
            for r in csv.DictReader(fh)
        ]


def resolved_config(model_cfg, train_cfg, stft_cfg) -> str:
    return json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                       "stft": asdict(stft_cfg)}, sort_keys=True, indent=2)
