"""Dataset CSV format and the binary checkpoint format.

CSV schema: header ``x_0,...,x_{d-1},y,e`` with decimal features and
non-negative integer class/env ids. Checkpoints are little-endian binary:
magic ``NWCK``, a u32 format version, the layer-dim list, each layer's
weight matrix and bias as float64, an optional linear probe, then a
length-prefixed UTF-8 JSON metadata blob.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import Dataset, LabeledExample
from .errors import FormatError, ParseError
from .featnet import FeatureNet, LinearHead

CHECKPOINT_MAGIC = b"NWCK"
CHECKPOINT_VERSION = 1


def save_csv(ds: Dataset, path):
    d = ds.input_dim
    header = ",".join([f"x_{i}" for i in range(d)] + ["y", "e"])
    lines = [header]
    for ex in ds.examples:
        fields = [repr(float(v)) for v in ex.x] + [str(int(ex.y)), str(int(ex.e))]
        lines.append(",".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_csv(path) -> Dataset:
    """Parse a dataset CSV; errors carry the 1-based offending line."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines()]
    if not lines:
        raise ParseError("empty file", line=1)
    header = lines[0].split(",")
    if len(header) < 3 or header[-2:] != ["y", "e"]:
        raise ParseError(f"header must be x_0,...,x_d-1,y,e; got {lines[0]!r}", line=1)
    d = len(header) - 2
    expected = [f"x_{i}" for i in range(d)]
    if header[:-2] != expected:
        raise ParseError(f"feature columns must be {expected}", line=1)
    examples = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        fields = raw.split(",")
        if len(fields) != d + 2:
            raise ParseError(f"expected {d + 2} fields, got {len(fields)}", line=lineno)
        try:
            x = np.array([float(v) for v in fields[:d]])
            y = int(fields[d])
            e = int(fields[d + 1])
        except ValueError as exc:
            raise ParseError(f"unparseable value: {exc}", line=lineno) from None
        if y < 0 or e < 0:
            raise ParseError(f"y and e must be non-negative, got y={y}, e={e}", line=lineno)
        examples.append(LabeledExample(x=x, y=y, e=e))
    if not examples:
        raise ParseError("no data rows", line=max(len(lines), 1))
    return Dataset(examples)


def _write_array(out: bytearray, arr: np.ndarray):
    out.extend(arr.astype("<f8").tobytes())


def save_checkpoint(path, net: FeatureNet, probe: LinearHead | None = None,
                    metadata: dict | None = None):
    out = bytearray()
    out.extend(CHECKPOINT_MAGIC)
    out.extend(struct.pack("<I", CHECKPOINT_VERSION))
    dims = net.layer_dims
    out.extend(struct.pack("<I", len(dims)))
    for dim in dims:
        out.extend(struct.pack("<I", dim))
    for w, b in zip(net.weights, net.biases):
        _write_array(out, w.data)
        _write_array(out, b.data)
    if probe is None:
        out.extend(struct.pack("<I", 0))
    else:
        out.extend(struct.pack("<I", 1))
        out.extend(struct.pack("<II", probe.feature_dim, probe.n_classes))
        _write_array(out, probe.weight.data)
        _write_array(out, probe.bias.data)
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    out.extend(struct.pack("<I", len(meta)))
    out.extend(meta)
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64_array(self, shape) -> np.ndarray:
        count = int(np.prod(shape))
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)
        return arr.reshape(shape)


def load_checkpoint(path) -> tuple[FeatureNet, LinearHead | None, dict]:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad magic; not a checkpoint file")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    n_dims = reader.u32()
    if n_dims < 2 or n_dims > 64:
        raise FormatError(f"implausible layer count {n_dims}")
    dims = [reader.u32() for _ in range(n_dims)]
    weights, biases = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        weights.append(reader.f64_array((din, dout)))
        biases.append(reader.f64_array((dout,)))
    net = FeatureNet.from_weights(dims, weights, biases)
    probe = None
    if reader.u32():
        fd = reader.u32()
        nc = reader.u32()
        probe = LinearHead(fd, nc)
        probe.load_state_arrays(reader.f64_array((fd, nc)), reader.f64_array((nc,)))
    meta_len = reader.u32()
    try:
        metadata = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad metadata blob: {exc}") from None
    return net, probe, metadata
