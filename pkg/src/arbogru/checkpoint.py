"""Bit-exact model checkpoints.

Layout: a magic line, one line of JSON manifest (format version, the
defining dimensions, and an ordered list of (tensor name, shape,
element type)), then the raw little-endian IEEE-754 tensor bytes
concatenated in manifest order.  Loading then saving reproduces the
file byte for byte.
"""

from __future__ import annotations

import json

import numpy as np

from .model import ModelParams, param_shapes

MAGIC = b"ARBOCKPT1\n"
FORMAT_VERSION = 1

_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams) -> None:
    manifest = {
        "format_version": FORMAT_VERSION,
        "variant": params.variant,
        "attention": params.attention,
        "dim": params.dim,
        "vocab_size": params.vocab_size,
        "classes": params.classes,
        "max_children": params.max_children,
        "tensors": [
            [name, list(t.shape), _dtype_tag(t.dtype)]
            for name, t in params.tensors.items()
        ],
    }
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(json.dumps(manifest, separators=(",", ":")).encode("utf-8"))
        handle.write(b"\n")
        for t in params.tensors.values():
            handle.write(np.ascontiguousarray(t, dtype=_dtype_tag(t.dtype)).tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as handle:
        magic = handle.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad checkpoint format (magic mismatch)")
        manifest_line = handle.readline()
        try:
            manifest = json.loads(manifest_line)
        except json.JSONDecodeError as err:
            raise CheckpointError(f"{path}: unreadable manifest: {err}") from None
        if manifest.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {manifest.get('format_version')}")
        tensors: dict[str, np.ndarray] = {}
        for name, shape, tag in manifest["tensors"]:
            dtype = _DTYPES.get(tag)
            if dtype is None:
                raise CheckpointError(f"{path}: unknown element type {tag!r}")
            count = int(np.prod(shape)) if shape else 1
            raw = handle.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        if handle.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")

    params = ModelParams(manifest["variant"], manifest["attention"], manifest["dim"],
                         manifest["classes"], manifest["max_children"], tensors)
    expected = param_shapes(params.variant, params.dim, manifest["vocab_size"],
                            params.classes, params.max_children, params.attention)
    got = {name: t.shape for name, t in tensors.items()}
    if got != {name: tuple(s) for name, s in expected.items()}:
        raise CheckpointError(f"{path}: tensor set does not match the declared variant")
    return params


def _dtype_tag(dtype) -> str:
    tag = np.dtype(dtype).newbyteorder("<").str
    if tag not in _DTYPES:
        raise CheckpointError(f"unsupported tensor dtype {dtype}")
    return tag
