"""Encoder plus primary/subsidiary heads, and the binary model file."""

from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import FormatError, ShapeError, VersionError
from .tensor_core import ACTIVATIONS, DenseLayer, Network, as_matrix, build_network, forward, init_layer

MAGIC = b"OFM1"
FORMAT_VERSION = 1

DEFAULT_ENCODER_UNITS = (256, 256, 64)


@dataclass
class ModelBundle:
    encoder: Network
    primary_head: DenseLayer
    subsidiary_head: DenseLayer

    def __post_init__(self):
        d = self.encoder.out_width
        for name, head in (("primary", self.primary_head), ("subsidiary", self.subsidiary_head)):
            if head.in_width != d:
                raise ShapeError(f"{name} head expects width {head.in_width}, encoder gives {d}")
            if head.activation != "identity":
                raise ValueError(f"{name} head must produce raw logits")

    @property
    def code_width(self) -> int:
        return self.encoder.out_width

    def params(self) -> list[np.ndarray]:
        return [
            *self.encoder.params(),
            self.primary_head.weights,
            self.primary_head.bias,
            self.subsidiary_head.weights,
            self.subsidiary_head.bias,
        ]

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.encoder.copy(), self.primary_head.copy(), self.subsidiary_head.copy())


def build_bundle(
    in_width: int,
    n_primary: int,
    n_subsidiary: int,
    seed: int,
    units: Sequence[int] = DEFAULT_ENCODER_UNITS,
    activation: str = "relu",
    code_activation: str = "identity",
) -> ModelBundle:
    """Fresh bundle: hidden layers use ``activation``, the code layer ``code_activation``.

    For mfm layers ``units`` counts affine outputs, so the layer emits half as many.
    """
    acts = [activation] * (len(units) - 1) + [code_activation]
    encoder = build_network(in_width, units, acts, [seed, 0])
    d = encoder.out_width
    primary = init_layer(d, n_primary, "identity", [seed, 1])
    subsidiary = init_layer(d, n_subsidiary, "identity", [seed, 2])
    return ModelBundle(encoder, primary, subsidiary)


def encode(bundle: ModelBundle, x) -> np.ndarray:
    out, _ = forward(bundle.encoder, x)
    return out


def head_logits(head: DenseLayer, codes) -> np.ndarray:
    codes = as_matrix(codes)
    if codes.shape[1] != head.in_width:
        raise ShapeError(f"code width {codes.shape[1]} != head input width {head.in_width}")
    return codes @ head.weights.T + head.bias


def params_digest(arrays: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        h.update(struct.pack("<I", a.size))
    return h.hexdigest()


# -- serialization ----------------------------------------------------------
#
# "OFM1" | u32 version | u32 n_layers | n_layers * u32 activation code |
# matrices: (u32 rows, u32 cols, rows*cols f64) for each encoder W, b, then
# primary W, b, subsidiary W, b.  Biases are stored as 1 x n.  Little-endian.


def _write_matrix(f, m: np.ndarray) -> None:
    m = as_matrix(m)
    f.write(struct.pack("<II", *m.shape))
    f.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def to_bytes(bundle: ModelBundle) -> bytes:
    f = io.BytesIO()
    f.write(MAGIC)
    f.write(struct.pack("<I", FORMAT_VERSION))
    f.write(struct.pack("<I", len(bundle.encoder.layers)))
    for layer in bundle.encoder.layers:
        f.write(struct.pack("<I", ACTIVATIONS.index(layer.activation)))
    for layer in [*bundle.encoder.layers, bundle.primary_head, bundle.subsidiary_head]:
        _write_matrix(f, layer.weights)
        _write_matrix(f, layer.bias[None, :])
    return f.getvalue()


def save_bundle(bundle: ModelBundle, path) -> None:
    data = to_bytes(bundle)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated model file while reading {what}", offset=self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def matrix(self, what: str) -> np.ndarray:
        rows = self.u32(f"{what} rows")
        cols = self.u32(f"{what} cols")
        raw = self.take(8 * rows * cols, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)


def from_bytes(buf: bytes) -> ModelBundle:
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise VersionError(f"not a model file: bad magic {buf[:4]!r}", offset=0)
    r.pos = 4
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported model format version {version}", offset=4)
    n_layers = r.u32("layer count")
    acts = []
    for k in range(n_layers):
        code = r.u32(f"activation of layer {k}")
        if code >= len(ACTIVATIONS):
            raise FormatError(f"unknown activation code {code}", offset=r.pos - 4)
        acts.append(ACTIVATIONS[code])
    layers = []
    for k, act in enumerate([*acts, "identity", "identity"]):
        w = r.matrix(f"weights {k}")
        b = r.matrix(f"bias {k}")
        if b.shape != (1, w.shape[0]):
            raise FormatError(f"bias {k} has shape {b.shape}, expected (1, {w.shape[0]})", offset=r.pos)
        try:
            layers.append(DenseLayer(w, b[0], act))
        except (ShapeError, ValueError) as e:
            raise FormatError(f"layer {k}: {e}", offset=r.pos) from None
    if r.pos != len(buf):
        raise FormatError("trailing bytes after model data", offset=r.pos)
    try:
        return ModelBundle(Network(layers[:-2]), layers[-2], layers[-1])
    except (ShapeError, ValueError) as e:
        raise FormatError(f"inconsistent model: {e}", offset=r.pos) from None


def load_bundle(path) -> ModelBundle:
    with open(path, "rb") as f:
        return from_bytes(f.read())
