"""Named-tensor checkpoint container.

Layout (all integers little-endian)::

    b"PEFT1"                      magic
    u32  version                  (1)
    u64  body_length              bytes between this field and the checksum
    u16  len + utf-8  kind        "model" | "prefix" | "lora"
    u32  len + utf-8  config      canonical JSON
    u32  tensor count
    per tensor:
        u16 len + utf-8 name
        u8  ndim, ndim * u64 dims
        prod(dims) * f64
    32 bytes sha256 over everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .adapters import LoraAdapter, PrefixAdapter
from .autograd import Tensor
from .model import ModelConfig, TransformerModel, param_shapes

MAGIC = b"PEFT1"
VERSION = 1
_HEADER = len(MAGIC) + 4 + 8
_DIGEST = 32


class CheckpointError(ValueError):
    pass


class FormatError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def dumps(kind: str, config: dict, tensors: dict[str, np.ndarray], version: int = VERSION) -> bytes:
    body = bytearray()
    k = kind.encode("utf-8")
    body += struct.pack("<H", len(k)) + k
    c = canonical_json(config).encode("utf-8")
    body += struct.pack("<I", len(c)) + c
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        n = name.encode("utf-8")
        body += struct.pack("<H", len(n)) + n
        body += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.tobytes()
    head = MAGIC + struct.pack("<IQ", version, len(body))
    blob = head + bytes(body)
    return blob + hashlib.sha256(blob).digest()


def loads(blob: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    if len(blob) < _HEADER or blob[:len(MAGIC)] != MAGIC:
        if MAGIC.startswith(blob[:len(MAGIC)]) and len(blob) < _HEADER:
            raise TruncatedError(f"file is {len(blob)} bytes, shorter than the header")
        raise FormatError("not a PEFT1 checkpoint (bad magic)")
    version, body_len = struct.unpack_from("<IQ", blob, len(MAGIC))
    expected = _HEADER + body_len + _DIGEST
    if len(blob) < expected:
        raise TruncatedError(f"checkpoint truncated: {len(blob)} of {expected} bytes")
    if len(blob) > expected:
        raise FormatError(f"trailing bytes after checksum ({len(blob) - expected})")
    if hashlib.sha256(blob[:-_DIGEST]).digest() != blob[-_DIGEST:]:
        raise ChecksumError("checkpoint checksum mismatch (file corrupted)")
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    off = _HEADER
    (kl,) = struct.unpack_from("<H", blob, off)
    off += 2
    kind = blob[off:off + kl].decode("utf-8")
    off += kl
    (cl,) = struct.unpack_from("<I", blob, off)
    off += 4
    config = json.loads(blob[off:off + cl].decode("utf-8"))
    off += cl
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nl].decode("utf-8")
        off += nl
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    return kind, config, tensors


def write(path, kind: str, config: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(kind, config, tensors))


def read(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# typed wrappers
# ---------------------------------------------------------------------------


def save_model(model: TransformerModel, path, extra_config: dict | None = None,
               extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    cfg = {"model": model.config.to_dict(), **(extra_config or {})}
    tensors = {k: v.data for k, v in model.params.items()}
    tensors.update(extra_tensors or {})
    write(path, "model", cfg, tensors)


def load_model(path, expect_config: ModelConfig | None = None):
    """Returns ``(model, config_block, extra_tensors)``."""
    kind, cfg, tensors = read(path)
    if kind != "model":
        raise FormatError(f"expected a model checkpoint, found kind {kind!r}")
    mcfg = ModelConfig(**cfg["model"])
    if expect_config is not None and mcfg != expect_config:
        raise CheckpointShapeError(f"model checkpoint config {mcfg} differs from expected {expect_config}")
    shapes = param_shapes(mcfg)
    params = {}
    for name, shape in shapes.items():
        if name not in tensors:
            raise CheckpointShapeError(f"model checkpoint lacks tensor {name!r}")
        if tensors[name].shape != shape:
            raise CheckpointShapeError(f"tensor {name!r} has shape {tensors[name].shape}, expected {shape}")
        params[name] = Tensor(tensors.pop(name))
    return TransformerModel(mcfg, params), cfg, tensors


def save_adapter(adapter, path, extra_config: dict | None = None) -> None:
    cfg = {"adapter": adapter.config_dict(), **(extra_config or {})}
    tensors = {k: v.data for k, v in adapter.named_tensors().items()}
    write(path, adapter.kind, cfg, tensors)


def _check(name: str, arr: np.ndarray, shape: tuple) -> np.ndarray:
    if arr.shape != tuple(shape):
        raise CheckpointShapeError(f"tensor {name!r} has shape {arr.shape}, expected {tuple(shape)}")
    return arr


def load_adapter(path, model_config: ModelConfig | None = None):
    """Rebuild a :class:`PrefixAdapter` or :class:`LoraAdapter` from ``path``.

    With ``model_config`` every tensor is checked against the model's shapes.
    """
    kind, cfg, tensors = read(path)
    a = cfg["adapter"]
    if kind == "prefix":
        if model_config is not None:
            mine = (a["n_layers"], a["d_model"], a["n_heads"])
            theirs = (model_config.n_layers, model_config.d_model, model_config.n_heads)
            if mine != theirs:
                raise CheckpointShapeError(
                    f"prefix adapter (n_layers, d_model, n_heads)={mine} does not fit model {theirs}")
        ad = PrefixAdapter(a["pre_seq_len"], a["n_layers"], a["d_model"], a["n_heads"],
                           d_prefix=a["d_prefix"], mlp_hidden=a["mlp_hidden"],
                           projection=a["projection"], seed=a["seed"], init=False)
        ad.projection_active = a["projection_active"]
        p, out = ad.pre_seq_len, ad.out_width
        expected = {"baked": (p, out)} if not ad.projection_active else {
            "table": (p, ad.d_prefix), "w1": (ad.d_prefix, ad.mlp_hidden), "b1": (ad.mlp_hidden,),
            "w2": (ad.mlp_hidden, out), "b2": (out,)}
        for name, shape in expected.items():
            if name not in tensors:
                raise CheckpointShapeError(f"prefix checkpoint lacks tensor {name!r}")
            setattr(ad, name, Tensor(_check(name, tensors[name], shape)))
        return ad
    if kind == "lora":
        if model_config is None:
            model_config = ModelConfig(**cfg["model"]) if "model" in cfg else None
        if model_config is None:
            raise CheckpointError("loading a LoRA adapter needs the model config")
        ad = LoraAdapter(model_config, r=a["r"], alpha=a["alpha"], dropout=a["dropout"],
                         targets=a["targets"], seed=a["seed"], init=False)
        for name, e in ad.entries.items():
            for suffix, t in (("lora_A", e.A), ("lora_B", e.B)):
                key = f"{name}.{suffix}"
                if key not in tensors:
                    raise CheckpointShapeError(f"LoRA checkpoint lacks tensor {key!r}")
                t.data = _check(key, tensors[key], t.shape)
        return ad
    raise FormatError(f"not an adapter checkpoint (kind {kind!r})")
