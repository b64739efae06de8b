"""Hot kernels for the learnable filterbank and attention softmax.

The compiled extension is used for float32 work when it was built; float64
calls and environments without a compiler go through the NumPy versions.
Set ``DEEPGESI_PURE_PYTHON=1`` to force the fallback everywhere.
"""
import os

import numpy as np

from . import _pykernels as py

try:
    if os.environ.get("DEEPGESI_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python mode requested")
    from . import _ckernels as compiled
except ImportError:
    compiled = None

BACKEND = compiled.BACKEND if compiled is not None else py.BACKEND


def _pick(*arrays):
    if compiled is not None and all(a.dtype == np.float32 for a in arrays):
        return compiled
    return py


def lfb_forward(x, h, win, hop, keep=True):
    """Return ``(y, pooled)``: the same-padded convolution of signal ``x`` with
    every row of ``h`` and the mean of ``|y|`` over ``win``/``hop`` frames.
    ``keep=False`` skips retaining ``y`` (returned as None) when no gradient
    is needed."""
    return _pick(x, h).lfb_forward(x, h, win, hop, keep)


def lfb_backward(x, y, dpooled, L, win, hop):
    return _pick(x, y).lfb_backward(x, y, dpooled, L, win, hop)


def conv_same(x, h):
    return _pick(x, h).conv_same(x, h)


def abs_pool(y, win, hop):
    return _pick(y).abs_pool(y, win, hop)


def softmax_last(x, out=None):
    return _pick(x).softmax_last(x, out)
