"""Flat binary parameter files.

Layout (all integers little-endian ``uint32``)::

    magic  b"SDGW"
    version (=1)
    tensor count
    per tensor:
        name length, name bytes (UTF-8)
        ndim, dims...
        raw little-endian float32 data, C order

Integer buffers (e.g. batch-norm step counters) are stored as float32 and
cast back on load.
"""

from __future__ import annotations

import re
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SDGW"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


def save_weights(state: dict[str, torch.Tensor], path) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(state)))
        for name, tensor in state.items():
            raw = name.encode("utf-8")
            arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_weights(path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise WeightsFormatError(f"{path}: not a flat weights file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise WeightsFormatError(f"{path}: unsupported version {version}")
    pos = 12
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos: pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * n > len(data):
                raise WeightsFormatError(f"{path}: truncated data for {name}")
            out[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
            pos += 4 * n
    except struct.error as exc:
        raise WeightsFormatError(f"{path}: truncated header") from exc
    if pos != len(data):
        raise WeightsFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def apply_weights(module: torch.nn.Module, weights: dict[str, np.ndarray], strict: bool = True,
                  prefixes: tuple[str, ...] = ()) -> list[str]:
    """Copy arrays into ``module``'s state; returns the names that were loaded.

    With ``prefixes`` only module entries under those prefixes are required.
    """
    state = module.state_dict()
    wanted = [k for k in state if not prefixes or k.startswith(prefixes)]
    missing = [k for k in wanted if k not in weights]
    if strict and missing:
        raise WeightsFormatError(f"missing tensors: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    loaded = []
    for k in wanted:
        if k not in weights:
            continue
        arr = weights[k]
        if tuple(arr.shape) != tuple(state[k].shape):
            raise WeightsFormatError(f"{k}: shape {arr.shape} != {tuple(state[k].shape)}")
        state[k] = torch.from_numpy(arr).to(state[k].dtype)
        loaded.append(k)
    module.load_state_dict(state)
    return loaded


_TV_RULES = [
    (re.compile(r"^conv1\."), "stem.conv."),
    (re.compile(r"^bn1\."), "stem.bn."),
    (re.compile(r"^layer([1-4])\."), lambda m: f"body.blocks.{int(m.group(1)) - 1}."),
]


def torchvision_resnet18_names(state: dict) -> "OrderedDict[str, torch.Tensor]":
    """Rename a torchvision ResNet-18 state dict to this package's layout (head dropped)."""
    out = OrderedDict()
    for key, value in state.items():
        for pattern, repl in _TV_RULES:
            if pattern.match(key):
                out[pattern.sub(repl, key, count=1)] = value
                break
    return out


def convert_torch_checkpoint(src, dst) -> int:
    """Convert a torchvision ResNet-18 ``.pth`` state dict into a flat weights file."""
    try:
        state = torch.load(src, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises pickle, zip and runtime errors here
        raise WeightsFormatError(f"{src}: not a readable torch checkpoint ({type(exc).__name__})") from exc
    if not isinstance(state, dict):
        raise WeightsFormatError(f"{src}: expected a state dict")
    if "state_dict" in state:
        state = state["state_dict"]
    renamed = torchvision_resnet18_names(state)
    if not renamed:
        raise WeightsFormatError(f"{src}: no ResNet-18 tensors recognised")
    save_weights(renamed, dst)
    return len(renamed)
