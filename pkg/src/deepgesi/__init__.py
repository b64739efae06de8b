"""Non-intrusive prediction of GESI speech-intelligibility scores.

A small attention network over log-STFT and learnable sinc-filterbank
features, trained with an utterance- plus frame-level squared-error loss on
a hand-written reverse-mode autodiff engine.
"""
from ._kernels import BACKEND
from .evaluation import Scorer, evaluate, lcc, mse, srcc
from .features import SincFilterbank, StftConfig
from .model import ModelConfig
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ModelConfig", "Scorer", "SincFilterbank", "StftConfig", "TrainConfig",
    "evaluate", "lcc", "mse", "srcc", "train",
]
