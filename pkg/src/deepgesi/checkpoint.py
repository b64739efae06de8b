"""Versioned checkpoint container.

Layout: 8-byte magic, u32 format version, u64 header length, a JSON header
(sorted keys, no whitespace), then the raw little-endian tensor data in the
order listed in the header.  Serializing the same state twice gives the same
bytes, so save -> load -> save is byte-identical.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .features import SincFilterbank, StftConfig
from .model import ModelConfig, ModelParams

MAGIC = b"DGESICK\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    stft_cfg: StftConfig
    filterbank: dict
    tensors: dict  # name -> ndarray: parameters, optimizer moments, norm stats
    meta: dict = field(default_factory=dict)  # epoch, best_val, adam step, rng state, ...

    def param_names(self):
        return sorted(k[len("param/"):] for k in self.tensors if k.startswith("param/"))

    def build(self):
        """Instantiate (ModelParams, SincFilterbank, norm) from the stored state."""
        fb_kw = dict(self.filterbank)
        dtype = np.dtype(self.meta.get("dtype", "float32")).type
        low = self.tensors["param/sinc.low_hz"]
        band = self.tensors["param/sinc.band_hz"]
        fb = SincFilterbank(
            **fb_kw, dtype=dtype,
            low_hz=ad.Tensor(low.copy(), requires_grad=True, name="sinc.low_hz"),
            band_hz=ad.Tensor(band.copy(), requires_grad=True, name="sinc.band_hz"),
        )
        tensors = {
            name: ad.Tensor(self.tensors["param/" + name].copy(), requires_grad=True, name=name)
            for name in self.param_names() if not name.startswith("sinc.")
        }
        norm = None
        if "norm/mean" in self.tensors:
            norm = (self.tensors["norm/mean"], self.tensors["norm/std"])
        return ModelParams(tensors), fb, norm


def _header(ckpt: Checkpoint):
    entries = []
    offset = 0
    for name in sorted(ckpt.tensors):
        a = ckpt.tensors[name]
        dt = a.dtype.newbyteorder("<")
        nbytes = a.size * dt.itemsize
        entries.append({"name": name, "dtype": dt.str, "shape": list(a.shape), "offset": offset})
        offset += nbytes
    return {
        "model_cfg": ckpt.model_cfg.to_dict(),
        "stft_cfg": {
            "win_length": ckpt.stft_cfg.win_length, "hop_length": ckpt.stft_cfg.hop_length,
            "fft_size": ckpt.stft_cfg.fft_size, "window": ckpt.stft_cfg.window, "eps": ckpt.stft_cfg.eps,
        },
        "filterbank": ckpt.filterbank,
        "meta": ckpt.meta,
        "tensors": entries,
    }


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(_header(ckpt), sort_keys=True, separators=(",", ":")).encode()
    parts = [_PREFIX.pack(MAGIC, VERSION, len(header)), header]
    for name in sorted(ckpt.tensors):
        a = ckpt.tensors[name]
        parts.append(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def save(ckpt: Checkpoint, path) -> None:
    """Write atomically: a crash mid-write never leaves a truncated file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(ckpt))
    os.replace(tmp, path)


def from_bytes(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{source}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start:start + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from exc
    body = memoryview(data)[start + hlen:]
    tensors = {}
    for ent in header["tensors"]:
        dt = np.dtype(ent["dtype"])
        count = int(np.prod(ent["shape"], dtype=np.int64))
        end = ent["offset"] + count * dt.itemsize
        if end > len(body):
            raise CheckpointError(f"{source}: tensor {ent['name']} runs past the end of the file")
        a = np.frombuffer(body[ent["offset"]:end], dtype=dt).reshape(ent["shape"])
        tensors[ent["name"]] = a.astype(dt.newbyteorder("="))
    return Checkpoint(
        model_cfg=ModelConfig(**header["model_cfg"]),
        stft_cfg=StftConfig(**header["stft_cfg"]),
        filterbank=header["filterbank"],
        tensors=tensors,
        meta=header["meta"],
    )


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror or exc}") from exc
    return from_bytes(data, str(path))
