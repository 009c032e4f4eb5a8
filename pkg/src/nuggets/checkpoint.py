"""Versioned binary container for parameters and nugget artifacts.

Layout (little-endian)::

    magic (4 bytes) | version u32 | field count u32
    field*: name_len u16 | name | type u8 ('i', 'f' or 's') | value
            (i64, f64, or u32 length + UTF-8 bytes)
    tensor count u32
    tensor*: name_len u32 | name | rank u32 | extents u32 * rank | f64 payload

Parameter tensors are stored as ``<role>.<name>``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Dict, Tuple, Union

import numpy as np

from .autodiff import Tensor
from .compressor import CompressorBundle
from .config import ModelConfig
from .model import ParamSet
from .selection import NuggetState, Selection
from .streaming import DodoLM

MAGIC = b"DODO"
NUGGET_MAGIC = b"DODN"
VERSION = 1

PathLike = Union[str, Path]


class CheckpointError(ValueError):
    pass


def _write_fields(f: BinaryIO, fields: dict):
    f.write(struct.pack("<I", len(fields)))
    for name in sorted(fields):
        v = fields[name]
        nb = name.encode("utf-8")
        f.write(struct.pack("<H", len(nb)) + nb)
        if isinstance(v, bool) or isinstance(v, (int, np.integer)):
            f.write(b"i" + struct.pack("<q", int(v)))
        elif isinstance(v, (float, np.floating)):
            f.write(b"f" + struct.pack("<d", float(v)))
        elif isinstance(v, str):
            vb = v.encode("utf-8")
            f.write(b"s" + struct.pack("<I", len(vb)) + vb)
        else:
            raise CheckpointError(f"field {name!r} has unsupported type {type(v).__name__}")


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def _read_fields(f: BinaryIO) -> dict:
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read_exact(f, 2))
        name = _read_exact(f, n).decode("utf-8")
        kind = _read_exact(f, 1)
        if kind == b"i":
            (out[name],) = struct.unpack("<q", _read_exact(f, 8))
        elif kind == b"f":
            (out[name],) = struct.unpack("<d", _read_exact(f, 8))
        elif kind == b"s":
            (m,) = struct.unpack("<I", _read_exact(f, 4))
            out[name] = _read_exact(f, m).decode("utf-8")
        else:
            raise CheckpointError(f"unknown field type {kind!r}")
    return out


def write_container(path: PathLike, magic: bytes, fields: dict, tensors: Dict[str, np.ndarray]):
    with open(path, "wb") as f:
        f.write(magic + struct.pack("<I", VERSION))
        _write_fields(f, fields)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.require(tensors[name], dtype="<f8", requirements="C")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)) + nb)
            f.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_container(path: PathLike, magic: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        head = _read_exact(f, 4)
        if head != magic:
            raise CheckpointError(f"bad magic {head!r}, expected {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        fields = _read_fields(f)
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, n).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank)) if rank else ()
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(_read_exact(f, 8 * size), dtype="<f8").astype(np.float64)
            tensors[name] = data.reshape(shape)
        if f.read(1):
            raise CheckpointError("trailing bytes after tensors")
    return fields, tensors


def _config_fields(config: ModelConfig) -> dict:
    return {f"config.{k}": v for k, v in config.to_dict().items()}


def _config_from_fields(fields: dict) -> ModelConfig:
    return ModelConfig.from_dict({k[len("config."):]: v for k, v in fields.items() if k.startswith("config.")})


def _paramsets(tensors: Dict[str, np.ndarray]) -> Dict[str, ParamSet]:
    groups: dict = {}
    for name, arr in tensors.items():
        role, _, rest = name.partition(".")
        groups.setdefault(role, {})[rest] = Tensor(arr.copy(), requires_grad=role != "features", name=rest)
    return {role: ParamSet(role, t) for role, t in groups.items()}


def save_model(path: PathLike, model: Union[CompressorBundle, DodoLM]):
    """Write a compressor bundle or streaming LM."""
    fields = _config_fields(model.config)
    fields["st_mode"] = model.st_mode
    sets = [model.decoder]
    if isinstance(model, CompressorBundle):
        fields["kind"] = "compressor"
        sets += [model.encoder, model.scorer, model.features]
    else:
        fields.update(kind=model.kind, pool=model.pool, budget=model.budget)
        if model.kind == "dodo":
            sets += [model.encoder, model.scorer, model.features]
    tensors = {f"{p.role}.{k}": t.data for p in sets for k, t in p.tensors.items()}
    write_container(path, MAGIC, fields, tensors)


def load_model(path: PathLike) -> Union[CompressorBundle, DodoLM]:
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    fields, tensors = read_container(path, MAGIC)
    config = _config_from_fields(fields)
    sets = _paramsets(tensors)
    kind = fields.get("kind", "compressor")
    st_mode = fields.get("st_mode", "stopgrad")
    try:
        if kind == "compressor":
            return CompressorBundle(config, sets["encoder"], sets["decoder"], sets["scorer"], sets["features"], st_mode)
        return DodoLM(config, sets["decoder"], sets.get("encoder"), sets.get("scorer"), sets.get("features"),
                      kind, int(fields["pool"]), int(fields["budget"]), st_mode)
    except KeyError as e:
        raise CheckpointError(f"checkpoint lacks {e}") from None


def save_nuggets(path: PathLike, state: NuggetState):
    """Nugget artifact: per-layer states, positions, mask and (if present) scores."""
    B, K = state.positions.shape
    fields = {"n_layers": len(state.layers), "source_length": int(state.source_length), "batch": B, "size": K}
    tensors = {f"layer.{l}": x.data for l, x in enumerate(state.layers)}
    tensors["positions"] = state.positions.astype(np.float64)
    tensors["mask"] = state.valid().astype(np.float64)
    if state.scores is not None:
        tensors["scores"] = state.scores.data
    write_container(path, NUGGET_MAGIC, fields, tensors)


def load_nuggets(path: PathLike) -> NuggetState:
    fields, tensors = read_container(path, NUGGET_MAGIC)
    layers = [Tensor(tensors[f"layer.{l}"]) for l in range(int(fields["n_layers"]))]
    positions = tensors["positions"].astype(np.int64)
    mask = tensors["mask"].astype(bool)
    scores = Tensor(tensors["scores"]) if "scores" in tensors else None
    sels = []
    for b in range(positions.shape[0]):
        idx = positions[b][mask[b]]
        sc = scores.data[b][mask[b]] if scores is not None else np.zeros(idx.size)
        sels.append(Selection(idx, sc))
    return NuggetState(layers, positions, None if mask.all() else mask, scores, sels, int(fields["source_length"]))
