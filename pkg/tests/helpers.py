"""Shared test utilities: finite-difference gradient checks and tiny configs."""
import numpy as np

from deepgesi import autodiff as ad
from deepgesi.features import SincFilterbank, StftConfig
from deepgesi.model import ModelConfig

EPS = 1e-5


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(fn, arrays, index, eps=EPS, coords=None):
    """Central differences of scalar fn(*arrays) w.r.t. arrays[index]."""
    x = arrays[index]
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = []
    for i in coords:
        old = flat[i]
        flat[i] = old + eps
        up = fn(*arrays)
        flat[i] = old - eps
        down = fn(*arrays)
        flat[i] = old
        out.append((up - down) / (2 * eps))
    return np.array(out)


def gradcheck(op, arrays, rng, eps=EPS, wrt=None):
    """Largest relative error between autodiff and central differences of
    sum(op(*inputs) * R) for a fixed random projection R."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    proj = rng.standard_normal(out.shape)
    ad.sum_(ad.mul(out, proj)).backward()

    def scalar(*xs):
        with ad.no_grad():
            return float(np.sum(op(*[ad.Tensor(x) for x in xs]).value * proj))

    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, rel_err(analytic, numeric_grad(scalar, arrays, i, eps)))
    return worst


def tiny_model_cfg(**kw):
    base = dict(d_model=8, n_heads=2, n_blocks=1, conv_channels=8, stft_bins=33, lfb_channels=4,
                max_learned_len=64)
    base.update(kw)
    return ModelConfig(**base)


TINY_STFT = StftConfig(win_length=64, hop_length=32, fft_size=64)


def tiny_filterbank(dtype=np.float64, **kw):
    base = dict(num_filters=4, kernel_length=17, frame_win=64, frame_hop=32, dtype=dtype)
    base.update(kw)
    return SincFilterbank(**base)


TINY_FB_KWARGS = dict(num_filters=4, kernel_length=17, frame_win=64, frame_hop=32)


def _pos(rng, *shape):
    return rng.uniform(0.5, 2.0, shape)


def _away(rng, *shape):
    """Values bounded away from zero, for ops with a kink there."""
    return rng.choice([-1.0, 1.0], shape) * rng.uniform(0.1, 1.0, shape)


# name -> (op over tensors, random input generator).  Shared by the
# operator tests and the acceptance gradient check.
OP_CASES = {
    "add_broadcast": (lambda a, b: ad.add(a, b), lambda r: [r.standard_normal((3, 4)), r.standard_normal(4)]),
    "sub": (lambda a, b: ad.sub(a, b), lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 1))]),
    "mul": (lambda a, b: ad.mul(a, b), lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 3))]),
    "div": (lambda a, b: ad.div(a, b), lambda r: [r.standard_normal((2, 3)), _pos(r, 2, 3)]),
    "scalar_ops": (lambda a: ad.sub(ad.mul(ad.add(a, 2.0), 3.0), 1.5), lambda r: [r.standard_normal((4,))]),
    "neg": (ad.neg, lambda r: [r.standard_normal((5,))]),
    "square": (ad.square, lambda r: [r.standard_normal((5,))]),
    "abs": (ad.abs_, lambda r: [_away(r, 6)]),
    "exp": (ad.exp, lambda r: [r.standard_normal((5,))]),
    "log": (ad.log, lambda r: [_pos(r, 5)]),
    "sqrt": (ad.sqrt, lambda r: [_pos(r, 5)]),
    "sigmoid": (ad.sigmoid, lambda r: [3 * r.standard_normal((5,))]),
    "minimum": (lambda a, b: ad.minimum(a, b), lambda r: [r.standard_normal(6), r.standard_normal(6)]),
    "relu": (ad.relu, lambda r: [_away(r, 6)]),
    "leaky_relu": (ad.leaky_relu, lambda r: [_away(r, 6)]),
    "prelu": (lambda a, s: ad.prelu(a, s), lambda r: [_away(r, 3, 4), r.uniform(0.1, 0.5, 1)]),
    "maxout": (lambda a: ad.maxout(a, 3), lambda r: [r.standard_normal((4, 6))]),
    "softmax": (lambda a: ad.softmax(a, -1), lambda r: [r.standard_normal((3, 5))]),
    "softmax_axis0": (lambda a: ad.softmax(a, 0), lambda r: [r.standard_normal((3, 5))]),
    "attention_weights": (lambda q, k: ad.attention_weights(q, k),
                          lambda r: [r.standard_normal((2, 4, 3)), r.standard_normal((2, 5, 3))]),
    "sum_axis": (lambda a: ad.sum_(a, 1, keepdims=True), lambda r: [r.standard_normal((3, 4))]),
    "mean": (lambda a: ad.mean(a, 0), lambda r: [r.standard_normal((3, 4))]),
    "reshape": (lambda a: ad.reshape(a, (4, 3)), lambda r: [r.standard_normal((3, 4))]),
    "transpose": (lambda a: ad.transpose(a, (1, 0, 2)), lambda r: [r.standard_normal((2, 3, 4))]),
    "slice": (lambda a: ad.getitem(a, (slice(1, 3), slice(None, None, 2))), lambda r: [r.standard_normal((4, 5))]),
    "gather_repeat": (lambda a: ad.getitem(a, np.array([0, 2, 2, 1])), lambda r: [r.standard_normal((3, 2))]),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), lambda r: [r.standard_normal((3, 2)), r.standard_normal((3, 4))]),
    "pad_edge": (lambda a: ad.pad_edge(a, 2, 1, axis=0), lambda r: [r.standard_normal((4, 3))]),
    "matmul": (lambda a, b: ad.matmul(a, b), lambda r: [r.standard_normal((2, 3)), r.standard_normal((3, 4))]),
    "matmul_batched": (lambda a, b: ad.matmul(a, b), lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((4, 2))]),
    "linear": (lambda x, w, b: ad.linear(x, w, b),
               lambda r: [r.standard_normal((5, 3)), r.standard_normal((3, 2)), r.standard_normal(2)]),
    "conv1d": (lambda x, w, b: ad.conv1d(x, w, b, stride=1, padding=1),
               lambda r: [r.standard_normal((7, 3)), r.standard_normal((4, 3, 3)), r.standard_normal(4)]),
    "conv1d_stride2": (lambda x, w: ad.conv1d(x, w, None, stride=2, padding=2),
                       lambda r: [r.standard_normal((9, 2)), r.standard_normal((3, 2, 4))]),
    "layer_norm": (lambda x, g, b: ad.layer_norm(x, g, b),
                   lambda r: [r.standard_normal((4, 6)), r.uniform(0.5, 1.5, 6), r.standard_normal(6)]),
}


# -- brute-force metric oracles -------------------------------------------------

def naive_mse(p, t):
    return sum((a - b) ** 2 for a, b in zip(p, t)) / len(p)


def naive_pearson(p, t):
    n = len(p)
    mp, mt = sum(p) / n, sum(t) / n
    cov = sum((a - mp) * (b - mt) for a, b in zip(p, t))
    vp = sum((a - mp) ** 2 for a in p)
    vt = sum((b - mt) ** 2 for b in t)
    return cov / (vp * vt) ** 0.5


def naive_ranks(x):
    """Average rank by brute force: 1 + #smaller + (#equal - 1) / 2."""
    return [1 + sum(y < v for y in x) + (sum(y == v for y in x) - 1) / 2 for v in x]


def naive_spearman(p, t):
    return naive_pearson(naive_ranks(p), naive_ranks(t))


# -- acceptance report ------------------------------------------------------------

# (criterion number, title, status, detail); printed by conftest at the end
ACCEPTANCE = []


def record(num, title, status, detail=""):
    ACCEPTANCE.append((num, title, status, detail))
