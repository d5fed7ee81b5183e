"""GSNV1 checkpoint files.

Layout (all integers little-endian)::

    b"GSNV1"
    u32 config length, config text (UTF-8 ``key=value`` lines)
    u32 entry count
    per entry: u16 name length, name, u8 dtype (0 = f64, 1 = f32),
               u8 ndim, ndim x u32 dims, u64 offset, u64 byte length
    raw tensor data; offsets are relative to the start of this section

Tensor names carry a prefix: ``param.`` (learnable), ``buffer.``
(batch-norm running statistics) or ``scaler.`` (min-max scaler).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import ScalerParams, Vocab, shape_vocab
from .shapenet import ShapeNet, ShapeNetConfig
from .slipnet import SlipNet, SlipNetConfig

MAGIC = b"GSNV1"
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
DTYPE_CODES = {"f64": 0, "f32": 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: object
    meta: dict = field(default_factory=dict)
    scaler: ScalerParams | None = None
    dtype: str = "f64"

    @property
    def shapes(self) -> Vocab:
        names = self.meta.get("shapes")
        return Vocab(names.split(",")) if names else shape_vocab()


def encode_config(items: dict) -> bytes:
    lines = []
    for k, v in items.items():
        v = str(v)
        if "\n" in v or "=" in k or "\n" in k:
            raise CheckpointError(f"config entry {k!r} cannot be serialized")
        lines.append(f"{k}={v}")
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def decode_config(raw: bytes) -> dict:
    out = {}
    for line in raw.decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            out[k] = v
    return out


def dumps(config: dict, tensors: dict, dtype: str = "f64") -> bytes:
    code = DTYPE_CODES[dtype]
    dt = DTYPES[code]
    cfg = encode_config(config)
    head = [MAGIC, struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(tensors))]
    blobs, offset = [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=dt).tobytes()
        raw = name.encode("utf-8")
        head.append(struct.pack("<H", len(raw)) + raw)
        head.append(struct.pack("<BB", code, arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        head.append(struct.pack("<QQ", offset, len(data)))
        blobs.append(data)
        offset += len(data)
    return b"".join(head + blobs)


def loads(buf: bytes) -> tuple[dict, dict, str]:
    """Return ``(config, tensors, dtype)``; tensors come back as float64."""
    try:
        if buf[:5] != MAGIC:
            raise CheckpointError("not a GSNV1 checkpoint (bad magic)")
        pos = 5
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        config = decode_config(buf[pos:pos + n])
        pos += n
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        entries = []
        codes = set()
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + ln].decode("utf-8")
            pos += ln
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            off, nbytes = struct.unpack_from("<QQ", buf, pos)
            pos += 16
            if code not in DTYPES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            codes.add(code)
            entries.append((name, DTYPES[code], shape, off, nbytes))
        tensors = {}
        for name, dt, shape, off, nbytes in entries:
            if nbytes != dt.itemsize * int(np.prod(shape, dtype=np.int64)) \
                    or pos + off + nbytes > len(buf):
                raise CheckpointError(f"{name}: tensor data out of bounds")
            arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos + off)
            tensors[name] = arr.reshape(shape).astype(np.float64)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    dtype = "f32" if codes == {1} else "f64"
    return config, tensors, dtype


def _model_config(kind: str, cfg: dict):
    if kind == "slipnet":
        ints = ("feature_dim", "n_steps", "n_d", "n_a", "n_shared", "n_independent")
        floats = ("gamma", "bn_momentum", "bn_eps")
        kw = {k: int(cfg[f"model.{k}"]) for k in ints}
        kw.update({k: float(cfg[f"model.{k}"]) for k in floats})
        return SlipNetConfig(**kw)
    if kind == "shapenet":
        return ShapeNetConfig(tuple(int(w) for w in cfg["model.widths"].split(",")))
    raise CheckpointError(f"unknown model kind {kind!r}")


def _config_items(model) -> dict:
    items = {}
    for k, v in model.config_dict().items():
        items[f"model.{k}"] = ",".join(map(str, v)) if isinstance(v, (tuple, list)) else repr(v)
    return items


def save_checkpoint(path, model, meta: dict | None = None, scaler: ScalerParams | None = None,
                    dtype: str = "f64") -> None:
    Path(path).write_bytes(checkpoint_bytes(model, meta, scaler, dtype))


def checkpoint_bytes(model, meta: dict | None = None, scaler: ScalerParams | None = None,
                     dtype: str = "f64") -> bytes:
    config = {"kind": model.kind}
    config.update(_config_items(model))
    for k, v in (meta or {}).items():
        config[f"meta.{k}"] = v
    tensors = {f"param.{k}": v for k, v in model.params.items()}
    tensors.update({f"buffer.{k}": v for k, v in model.buffers.items()})
    if scaler is not None:
        tensors["scaler.min"] = scaler.min
        tensors["scaler.max"] = scaler.max
    return dumps(config, tensors, dtype)


def load_checkpoint(path) -> Checkpoint:
    """Load and self-validate a checkpoint (shapes must agree with the stored config)."""
    config, tensors, dtype = loads(Path(path).read_bytes())
    kind = config.get("kind")
    mcfg = _model_config(kind, config)
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param.")}
    buffers = {k[7:]: v for k, v in tensors.items() if k.startswith("buffer.")}
    try:
        model = (SlipNet if kind == "slipnet" else ShapeNet)(mcfg, params, buffers)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    scaler = None
    if "scaler.min" in tensors:
        scaler = ScalerParams(tensors["scaler.min"], tensors["scaler.max"])
        if scaler.min.shape != (model_input_dim(model),):
            raise CheckpointError(f"{path}: scaler width does not match model input")
    meta = {k[5:]: v for k, v in config.items() if k.startswith("meta.")}
    return Checkpoint(model, meta, scaler, dtype)


def model_input_dim(model) -> int:
    return model.config.feature_dim if model.kind == "slipnet" else model.config.widths[0]
