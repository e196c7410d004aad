"""FPNT checkpoint files.

Layout (little-endian)::

    b"FPNT"  uint32 version (=1)
    uint32 metadata count, then per entry: uint16 len + UTF-8 key, uint16 len + UTF-8 value
    uint32 tensor count, then per tensor:
        uint16 len + UTF-8 name, uint8 rank, rank x uint32 dims,
        prod(dims) x float32 values, row-major

The metadata always carries the model configuration, so a file is
self-describing: ``load_checkpoint`` rebuilds the architecture from it and
then checks every stored tensor against the rebuilt shapes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    CheckpointError,
    ShapeInconsistencyError,
    TruncatedFileError,
    VersionMismatchError,
)
from .model import Model, ModelConfig, build_resnet
from .tensor import Tensor

MAGIC = b"FPNT"
FORMAT_VERSION = 1
CONFIG_KEYS = ("variant", "input_channels", "input_size", "num_classes", "stage_widths", "blocks_per_stage", "head_name")
DEFAULT_META = (("epoch", "0"), ("val_accuracy", "nan"))


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def model_metadata(model: Model) -> list[tuple[str, str]]:
    c = model.config
    meta = [
        ("variant", c.variant),
        ("input_channels", str(c.input_channels)),
        ("input_size", str(c.input_size)),
        ("num_classes", str(c.num_classes)),
        ("stage_widths", ",".join(map(str, c.stage_widths))),
        ("blocks_per_stage", ",".join(map(str, c.blocks_per_stage))),
        ("head_name", model.head_name),
    ]
    extra = dict(DEFAULT_META)
    extra.update({k: v for k, v in model.metadata.items() if k not in CONFIG_KEYS})
    return meta + list(extra.items())


def encode_checkpoint(model: Model) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    meta = model_metadata(model)
    out += struct.pack("<I", len(meta))
    for key, value in meta:
        for text in (key, value):
            raw = str(text).encode("utf-8")
            if len(raw) > 0xFFFF:
                raise CheckpointError(f"metadata entry {key!r} is too long")
            out += struct.pack("<H", len(raw)) + raw
    state = model.state()
    out += struct.pack("<I", len(state))
    for name, arr in state:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def save_checkpoint(model: Model, path: str | Path) -> None:
    try:
        Path(path).write_bytes(encode_checkpoint(model))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, buf: bytes, source: str) -> None:
        self.buf = buf
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.source}: truncated file while reading {what} at byte {self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, what: str) -> str:
        (n,) = self.unpack("<H", what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{self.source}: {what} is not valid UTF-8") from exc


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Model:
    r = _Reader(buf, source)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError(f"{source}: bad magic (not an FPNT checkpoint)")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{source}: version mismatch (file has {version}, expected {FORMAT_VERSION})")
    (n_meta,) = r.unpack("<I", "metadata count")
    meta: dict[str, str] = {}
    for i in range(n_meta):
        key = r.text(f"metadata key {i}")
        meta[key] = r.text(f"metadata value {key!r}")
    missing = [k for k in CONFIG_KEYS[:-1] if k not in meta]
    if missing:
        raise CheckpointError(f"{source}: metadata lacks {missing}")
    try:
        config = ModelConfig(
            variant=meta["variant"],
            input_channels=int(meta["input_channels"]),
            input_size=int(meta["input_size"]),
            num_classes=int(meta["num_classes"]),
            stage_widths=_ints(meta["stage_widths"]),
            blocks_per_stage=_ints(meta["blocks_per_stage"]),
        )
    except ValueError as exc:
        raise CheckpointError(f"{source}: malformed model metadata: {exc}") from exc
    model = build_resnet(config, 0)
    model.head_name = meta.get("head_name", model.head_name)
    expected = dict(model.state())
    (n_tensors,) = r.unpack("<I", "tensor count")
    seen: list[str] = []
    for _ in range(n_tensors):
        name = r.text("tensor name")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        count = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(r.take(4 * count, f"values of {name}"), dtype="<f4").astype(np.float32)
        if name not in expected:
            raise ShapeInconsistencyError(f"{source}: tensor {name!r} is not part of a {config.variant} model")
        if tuple(dims) != expected[name].shape:
            raise ShapeInconsistencyError(
                f"{source}: shape inconsistency for {name!r}: file has {tuple(dims)}, config implies {expected[name].shape}"
            )
        arr = values.reshape(dims)
        if name in model.params:
            model.params[name] = Tensor(arr, requires_grad=True, name=name)
        else:
            model.buffers[name] = arr.copy()
        seen.append(name)
    absent = [n for n in expected if n not in seen]
    if absent:
        raise ShapeInconsistencyError(f"{source}: checkpoint lacks {len(absent)} tensors, e.g. {absent[0]!r}")
    if r.pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - r.pos} trailing bytes after the last tensor")
    model.state_order = seen
    model.metadata = {k: v for k, v in meta.items() if k not in CONFIG_KEYS}
    return model


def load_checkpoint(path: str | Path) -> Model:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buf, str(path))
