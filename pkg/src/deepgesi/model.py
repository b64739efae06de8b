"""The intelligibility network.

Feature pair -> temporal conv fusion -> activation -> pre-norm attention
blocks (rotary positions on queries and keys) -> per-frame sigmoid head ->
mean over frames.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .features import FeaturePair

ACTIVATIONS = ("maxout", "relu", "leaky_relu", "prelu")
POSITIONAL = ("rope", "sinusoidal", "learned", "none")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    n_blocks: int = 2
    maxout_pieces: int = 2
    conv_channels: int = 128
    conv_kernel: int = 3
    conv_stride: int = 1
    activation: str = "maxout"
    positional_encoding: str = "rope"
    max_learned_len: int = 2000
    stft_bins: int = 257
    lfb_channels: int = 64

    def __post_init__(self):
        if self.d_model % 2:
            raise ValueError(f"d_model must be even, got {self.d_model}")
        if self.d_model % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if (self.d_model // self.n_heads) % 2 and self.positional_encoding == "rope":
            raise ValueError("rotary positions need an even per-head width")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.positional_encoding not in POSITIONAL:
            raise ValueError(f"positional_encoding must be one of {POSITIONAL}, got {self.positional_encoding!r}")
        if self.maxout_pieces < 1:
            raise ValueError("maxout_pieces must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def pieces(self) -> int:
        """Linear pieces feeding each activation output (1 unless Maxout)."""
        return self.maxout_pieces if self.activation == "maxout" else 1

    def to_dict(self) -> dict:
        return asdict(self)


# -- positional encodings -----------------------------------------------------

def rope_frequencies(dim: int) -> np.ndarray:
    """theta_i = 10000^(-2i/dim) for i in [0, dim/2)."""
    if dim % 2:
        raise ValueError(f"rotary dimension must be even, got {dim}")
    return 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)


class RopeTable:
    """Cached cos/sin of t * theta_i, grown on demand."""

    def __init__(self, dim: int):
        self.dim = dim
        self.theta = rope_frequencies(dim)
        self._cos = np.ones((0, dim // 2))
        self._sin = np.zeros((0, dim // 2))

    def angles(self, positions):
        positions = np.asarray(positions)
        need = int(positions.max()) + 1 if positions.size else 0
        if need > self._cos.shape[0]:
            ang = np.outer(np.arange(need, dtype=np.float64), self.theta)
            self._cos, self._sin = np.cos(ang), np.sin(ang)
        return self._cos[positions], self._sin[positions]


def apply_rope(x, table: RopeTable, positions=None):
    """Rotate each pair (x[2i], x[2i+1]) of frame t by the angle t * theta_i.

    ``x`` is [..., T, d].  ``positions`` defaults to 0..T-1.
    """
    x = ad.as_tensor(x)
    d = x.shape[-1]
    if d % 2:
        raise ModelError(f"apply_rope: feature dimension must be even, got {d}")
    if d != table.dim:
        raise ModelError(f"apply_rope: table built for dimension {table.dim}, input has {d}")
    T = x.shape[-2]
    if positions is None:
        positions = np.arange(T)
    cos, sin = table.angles(positions)
    cos = cos.astype(x.dtype)
    sin = sin.astype(x.dtype)
    x1, x2 = x.value[..., 0::2], x.value[..., 1::2]
    out = np.empty_like(x.value)
    o1, o2 = out[..., 0::2], out[..., 1::2]
    np.multiply(x1, cos, out=o1)
    o1 -= x2 * sin
    np.multiply(x1, sin, out=o2)
    o2 += x2 * cos

    def backward(g):
        g1, g2 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g1 * cos + g2 * sin
        gx[..., 1::2] = -g1 * sin + g2 * cos
        return (gx,)

    return ad.make_node(out, (x,), backward, "rope")


def sinusoidal_table(T: int, d: int, dtype=np.float64) -> np.ndarray:
    """Interleaved sin/cos absolute encoding with the 10000^(-2i/d) schedule."""
    ang = np.outer(np.arange(T), rope_frequencies(d))
    pe = np.empty((T, d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe.astype(dtype)


# -- parameters ---------------------------------------------------------------

class ModelParams:
    """Named learnable tensors of the network (the filterbank's cutoffs live
    on the SincFilterbank and are registered alongside by the trainer)."""

    def __init__(self, tensors: dict):
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32, std=0.02):
        d, P = cfg.d_model, cfg.pieces
        fin = cfg.stft_bins + cfg.lfb_channels
        shapes = {
            "fuse.w": (cfg.conv_channels * P, fin, cfg.conv_kernel),
            "fuse.b": (cfg.conv_channels * P,),
        }
        if cfg.conv_channels != d:
            shapes["proj.w"] = (cfg.conv_channels, d)
            shapes["proj.b"] = (d,)
        if cfg.positional_encoding == "learned":
            shapes["pos.table"] = (cfg.max_learned_len, d)
        for i in range(cfg.n_blocks):
            p = f"block{i}."
            shapes.update({
                p + "ln1.g": (d,), p + "ln1.b": (d,),
                p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
                p + "bo": (d,),
                p + "ln2.g": (d,), p + "ln2.b": (d,),
                p + "ff1.w": (d, d * P), p + "ff1.b": (d * P,),
                p + "ff2.w": (d, d), p + "ff2.b": (d,),
            })
        shapes.update({"out.ln.g": (d,), "out.ln.b": (d,), "head.w": (d, 1), "head.b": (1,)})
        if cfg.activation == "prelu":
            shapes["act.fuse.slope"] = (1,)
            for i in range(cfg.n_blocks):
                shapes[f"block{i}.act.slope"] = (1,)

        tensors = {}
        for name, shape in shapes.items():
            if name.endswith(".g"):
                v = np.ones(shape)
            elif name.endswith("slope"):
                v = np.full(shape, 0.25)
            elif name.endswith(".b"):
                v = np.zeros(shape)
            else:
                v = rng.normal(0.0, std, size=shape)
            tensors[name] = ad.Tensor(v, dtype=dtype, requires_grad=True, name=name)
        return cls(tensors)


# -- network ------------------------------------------------------------------

def _activate(x, cfg: ModelConfig, params: ModelParams, slope_name: str):
    if cfg.activation == "maxout":
        return ad.maxout(x, cfg.maxout_pieces)
    if cfg.activation == "relu":
        return ad.relu(x)
    if cfg.activation == "leaky_relu":
        return ad.leaky_relu(x, 0.01)
    return ad.prelu(x, params[slope_name])


def _split_heads(x, n_heads):
    T, d = x.shape
    return ad.transpose(ad.reshape(x, (T, n_heads, d // n_heads)), (1, 0, 2))


def _merge_heads(x):
    H, T, dh = x.shape
    return ad.reshape(ad.transpose(x, (1, 0, 2)), (T, H * dh))


def _queries_keys(h, params, cfg: ModelConfig, block: int, rope: RopeTable | None, positions=None):
    p = f"block{block}."
    # the 1/sqrt(head_dim) scale is folded into the queries
    scale = 1.0 / np.sqrt(cfg.head_dim)
    q = _split_heads(ad.mul(ad.matmul(h, params[p + "wq"]), scale), cfg.n_heads)
    k = _split_heads(ad.matmul(h, params[p + "wk"]), cfg.n_heads)
    if cfg.positional_encoding == "rope":
        q = apply_rope(q, rope, positions)
        k = apply_rope(k, rope, positions)
    return q, k


def attention_logits(h, params, cfg: ModelConfig, block: int, rope: RopeTable | None, positions=None):
    """Scaled q.k logits per head, [H, T, T], for already-normalized input."""
    q, k = _queries_keys(h, params, cfg, block, rope, positions)
    return ad.matmul(q, ad.transpose(k, (0, 2, 1)))


def attention_block(x, params, cfg: ModelConfig, block: int, rope: RopeTable | None = None,
                    return_weights: bool = False):
    """One pre-norm block: x + MHA(LN(x)), then + FF(LN(x))."""
    p = f"block{block}."
    if rope is None and cfg.positional_encoding == "rope":
        rope = RopeTable(cfg.head_dim)
    h = ad.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
    weights = ad.attention_weights(*_queries_keys(h, params, cfg, block, rope))
    v = _split_heads(ad.matmul(h, params[p + "wv"]), cfg.n_heads)
    att = _merge_heads(ad.matmul(weights, v))
    x = ad.add(x, ad.linear(att, params[p + "wo"], params[p + "bo"]))

    h = ad.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
    h = _activate(ad.linear(h, params[p + "ff1.w"], params[p + "ff1.b"]), cfg, params, p + "act.slope")
    x = ad.add(x, ad.linear(h, params[p + "ff2.w"], params[p + "ff2.b"]))
    return (x, weights) if return_weights else x


def forward_utterance(fp: FeaturePair, params: ModelParams, cfg: ModelConfig, norm=None,
                      rope: RopeTable | None = None):
    """Return (frame_scores [T'], utterance_score scalar) as tensors.

    ``norm`` is an optional (mean, std) pair of [F + C] arrays standardizing
    the concatenated input features.
    """
    dtype = params.dtype
    s = ad.as_tensor(fp.stft_feats)
    l = ad.as_tensor(fp.lfb_feats)
    if s.dtype != dtype:
        s = ad.Tensor(s.value.astype(dtype))
    x = ad.concat([s, l], axis=1)
    if norm is not None:
        mu, sd = norm
        x = ad.div(ad.sub(x, ad.Tensor(mu.astype(dtype))), ad.Tensor(sd.astype(dtype)))

    K, stride = cfg.conv_kernel, cfg.conv_stride
    T = x.shape[0]
    if T < 1 or (T - 1) // stride + 1 < 1:
        raise ModelError(f"{T} frames is too short for the fusion conv")
    # edge padding keeps identical frames identical after the conv
    left = (K - 1) // 2
    x = ad.pad_edge(x, left, K - 1 - left, axis=0)
    x = ad.conv1d(x, params["fuse.w"], params["fuse.b"], stride=stride)
    x = _activate(x, cfg, params, "act.fuse.slope")
    if "proj.w" in params:
        x = ad.linear(x, params["proj.w"], params["proj.b"])

    T = x.shape[0]
    if cfg.positional_encoding == "sinusoidal":
        x = ad.add(x, ad.Tensor(sinusoidal_table(T, cfg.d_model, dtype)))
    elif cfg.positional_encoding == "learned":
        if T > cfg.max_learned_len:
            raise ModelError(
                f"utterance has {T} frames but the learned position table holds {cfg.max_learned_len}"
            )
        x = ad.add(x, params["pos.table"][:T])
    elif cfg.positional_encoding == "rope" and rope is None:
        rope = RopeTable(cfg.head_dim)

    for i in range(cfg.n_blocks):
        x = attention_block(x, params, cfg, i, rope)

    x = ad.layer_norm(x, params["out.ln.g"], params["out.ln.b"])
    logits = ad.linear(x, params["head.w"], params["head.b"])
    frames = ad.sigmoid(ad.reshape(logits, (T,)))
    return frames, ad.mean(frames)
