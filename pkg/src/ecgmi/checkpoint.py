"""Binary checkpoint container plus a JSON sidecar.

Layout::

    b"ECGMICKP"  u32 version  u32 descriptor_len  descriptor (UTF-8 JSON)  blobs

The descriptor holds the architecture, lead names, Adam hyper-parameters and
the ordered list of (name, shape) blobs. Blobs follow back to back as
little-endian float32: learnables in declared order, batchnorm running stats,
then Adam first and second moments.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import CorruptCheckpoint
from .nn.model import Architecture, ConvLayerParams, ModelParams
from .nn.optim import AdamState

MAGIC = b"ECGMICKP"
VERSION = 1
_HEAD = struct.Struct("<8sII")
_BLOB_DTYPE = np.dtype("<f4")


class Checkpoint(NamedTuple):
    params: ModelParams
    state: AdamState | None
    leads: tuple[str, ...]


def _blobs(params: ModelParams, state: AdamState | None) -> list[tuple[str, np.ndarray]]:
    out = list(params.learnables().items()) + list(params.buffers().items())
    if state is not None:
        out += [(f"adam.m.{k}", v) for k, v in state.first_moment.items()]
        out += [(f"adam.v.{k}", v) for k, v in state.second_moment.items()]
    return out


def save_checkpoint(params: ModelParams, state: AdamState | None, path: str | Path,
                    leads: Sequence[str] = ()) -> None:
    leads = tuple(leads)
    if leads and len(leads) != params.arch.num_leads:
        raise ValueError(f"{len(leads)} lead names for a {params.arch.num_leads}-lead model")
    blobs = _blobs(params, state)
    desc = {
        "arch": params.arch.to_dict(),
        "leads": list(leads),
        "adam": None if state is None else {
            "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
            "step_count": state.step_count},
        "blobs": [[name, list(arr.shape)] for name, arr in blobs],
    }
    desc_bytes = json.dumps(desc, sort_keys=True).encode()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(desc_bytes)))
        fh.write(desc_bytes)
        for _, arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype=_BLOB_DTYPE).tobytes())


def read_descriptor(data: bytes) -> tuple[dict, int]:
    if len(data) < _HEAD.size:
        raise CorruptCheckpoint("file too short for a checkpoint header")
    magic, version, n = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    end = _HEAD.size + n
    if len(data) < end:
        raise CorruptCheckpoint("truncated descriptor")
    try:
        desc = json.loads(data[_HEAD.size:end])
        Architecture(**desc["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"unreadable descriptor: {exc}") from None
    return desc, end


def load_checkpoint(path: str | Path, expect_leads: Sequence[str] | None = None) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    ``expect_leads`` (names or just a count via ``len``) is checked against the
    stored architecture; a mismatch is reported with both shapes.
    """
    data = Path(path).read_bytes()
    desc, pos = read_descriptor(data)
    arch = Architecture(**desc["arch"])
    leads = tuple(desc.get("leads") or ())
    if expect_leads is not None and len(expect_leads) != arch.num_leads:
        want = (arch.channels, len(expect_leads), arch.kernel)
        have = (arch.channels, arch.num_leads, arch.kernel)
        raise CorruptCheckpoint(f"conv0.weights: checkpoint has shape {have}, "
                                f"config with {len(expect_leads)} leads needs {want}")
    arrays: dict[str, np.ndarray] = {}
    for name, shape in desc["blobs"]:
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * _BLOB_DTYPE.itemsize
        if pos + nbytes > len(data):
            raise CorruptCheckpoint(f"truncated at blob {name!r}")
        arrays[name] = np.frombuffer(data, _BLOB_DTYPE, count, pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(data):
        raise CorruptCheckpoint(f"{len(data) - pos} trailing bytes after the last blob")

    skeleton = ModelParams(arch, [], np.zeros(0), np.zeros(0))
    for name, shape in skeleton.expected_shapes().items():
        if name not in arrays:
            raise CorruptCheckpoint(f"missing blob {name!r}")
        if arrays[name].shape != shape:
            raise CorruptCheckpoint(f"{name}: stored shape {arrays[name].shape}, architecture needs {shape}")
    convs = [ConvLayerParams(**{f: arrays[f"conv{i}.{f}"]
                                for f in ModelParams.LAYER_FIELDS + ModelParams.BUFFER_FIELDS})
             for i in range(arch.num_layers)]
    params = ModelParams(arch, convs, arrays["dense.weights"], arrays["dense.bias"])

    state = None
    if desc.get("adam") is not None:
        names = params.learnables().keys()
        try:
            m = {k: arrays[f"adam.m.{k}"] for k in names}
            v = {k: arrays[f"adam.v.{k}"] for k in names}
        except KeyError as exc:
            raise CorruptCheckpoint(f"missing Adam moment {exc}") from None
        for k in names:
            if m[k].shape != arrays[k].shape or v[k].shape != arrays[k].shape:
                raise CorruptCheckpoint(f"Adam moment shape mismatch for {k!r}")
        state = AdamState(**desc["adam"], first_moment=m, second_moment=v)
    return Checkpoint(params, state, leads)


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def write_sidecar(path: str | Path, meta: dict) -> Path:
    out = sidecar_path(path)
    out.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return out


def read_sidecar(path: str | Path) -> dict:
    return json.loads(sidecar_path(path).read_text())
