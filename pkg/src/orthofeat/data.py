"""Datasets: synthetic two-factor generator, IDX and vector-CSV readers, batching."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConsistencyError, FormatError, ShapeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    features: np.ndarray
    y_primary: np.ndarray
    y_subsidiary: np.ndarray
    n_primary_classes: int
    n_subsidiary_classes: int
    # False where the primary label must not be used for training (e.g. target domain)
    primary_mask: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.y_primary = np.asarray(self.y_primary, dtype=np.int64).reshape(-1)
        self.y_subsidiary = np.asarray(self.y_subsidiary, dtype=np.int64).reshape(-1)
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ShapeError("features must be a 2-D matrix")
        if self.y_primary.shape[0] != n or self.y_subsidiary.shape[0] != n:
            raise ConsistencyError("label and feature counts differ")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain NaN or Inf")
        for name, y, k in (
            ("y_primary", self.y_primary, self.n_primary_classes),
            ("y_subsidiary", self.y_subsidiary, self.n_subsidiary_classes),
        ):
            if n and (y.min() < 0 or y.max() >= k):
                raise ValueError(f"{name} labels must lie in [0, {k})")
        if self.primary_mask is None:
            self.primary_mask = np.ones(n, dtype=bool)
        else:
            self.primary_mask = np.asarray(self.primary_mask, dtype=bool).reshape(-1)
            if self.primary_mask.shape[0] != n:
                raise ConsistencyError("primary_mask length differs from example count")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(
            self.features[idx],
            self.y_primary[idx],
            self.y_subsidiary[idx],
            self.n_primary_classes,
            self.n_subsidiary_classes,
            self.primary_mask[idx],
        )

    def primary_labeled(self) -> "LabeledDataset":
        return self.subset(np.flatnonzero(self.primary_mask))


@dataclass
class SynthConfig:
    n_per_cell: int = 50
    n_primary: int = 10
    n_subsidiary: int = 2
    dim: int = 32
    primary_sep: float = 3.0
    subsidiary_sep: float = 3.0
    noise_sigma: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_per_cell < 1 or self.n_primary < 1 or self.n_subsidiary < 1:
            raise ValueError("n_per_cell, n_primary and n_subsidiary must be >= 1")
        if self.primary_sep < 0 or self.subsidiary_sep < 0:
            raise ValueError("separations must be >= 0")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be > 0")
        if self.dim < self.n_primary + self.n_subsidiary:
            raise ValueError(
                f"dim ({self.dim}) must be >= n_primary + n_subsidiary "
                f"({self.n_primary + self.n_subsidiary}) to hold orthonormal class directions"
            )


def synth_directions(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal primary directions (rows) and subsidiary directions, mutually orthogonal."""
    rng = np.random.default_rng([cfg.seed, 0])
    g = rng.standard_normal((cfg.dim, cfg.n_primary + cfg.n_subsidiary))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))  # canonical signs
    return q[:, : cfg.n_primary].T.copy(), q[:, cfg.n_primary :].T.copy()


def gen_two_factor(cfg: SynthConfig, noise_seed: Optional[int] = None) -> LabeledDataset:
    """Primary class mean plus an additive subsidiary offset plus isotropic noise.

    ``noise_seed`` draws a fresh sample from the same class geometry, which is
    how held-out splits are made.
    """
    cfg.validate()
    mu, delta = synth_directions(cfg)
    yp, ys = np.meshgrid(np.arange(cfg.n_primary), np.arange(cfg.n_subsidiary), indexing="ij")
    yp = np.repeat(yp.reshape(-1), cfg.n_per_cell)
    ys = np.repeat(ys.reshape(-1), cfg.n_per_cell)
    rng = np.random.default_rng([cfg.seed, 1] if noise_seed is None else [cfg.seed, 2, noise_seed])
    x = cfg.primary_sep * mu[yp] + cfg.subsidiary_sep * delta[ys]
    x = x + rng.normal(0.0, cfg.noise_sigma, size=x.shape)
    return LabeledDataset(x, yp, ys, cfg.n_primary, cfg.n_subsidiary)


def batch_iter(n: int, batch_size: int, seed, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch, keyed by ``(seed, epoch)``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    key = [*np.atleast_1d(seed).tolist(), int(epoch)]
    perm = np.random.default_rng(key).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


# -- IDX ---------------------------------------------------------------------


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _parse_idx(buf: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(buf) < 4:
        raise FormatError(f"truncated {what} header", offset=len(buf))
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{what} magic is 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"truncated {what} header", offset=len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    size = int(np.prod(dims))
    if len(buf) < header + size:
        raise FormatError(
            f"truncated {what}: need {header + size} bytes, have {len(buf)}", offset=len(buf)
        )
    if len(buf) > header + size:
        raise FormatError(f"trailing bytes in {what}", offset=header + size)
    return np.frombuffer(buf, dtype=np.uint8, offset=header, count=size).reshape(dims)


def read_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair; pixels scaled to [0, 1] and flattened row-major."""
    with _open(images_path) as f:
        images = _parse_idx(f.read(), IDX_IMAGES_MAGIC, "images file")
    with _open(labels_path) as f:
        labels = _parse_idx(f.read(), IDX_LABELS_MAGIC, "labels file")
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"{images_path} has {images.shape[0]} images but {labels_path} has {labels.shape[0]} labels"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return features, labels.astype(np.int64)


# -- vector CSV --------------------------------------------------------------


def write_csv_vectors(ds: LabeledDataset, path) -> None:
    d = ds.dim
    with open(path, "w", newline="") as f:
        f.write(",".join([f"f{i}" for i in range(d)] + ["y_primary", "y_subsidiary"]) + "\n")
        for row, yp, ys in zip(ds.features, ds.y_primary, ds.y_subsidiary):
            f.write(",".join([format(v, ".17g") for v in row] + [str(yp), str(ys)]) + "\n")


def read_csv_vectors(path, n_primary: Optional[int] = None, n_subsidiary: Optional[int] = None) -> LabeledDataset:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty file", line=1) from None
        for col in ("y_primary", "y_subsidiary"):
            if col not in header:
                raise FormatError(f"missing column {col!r}", line=1)
        if header[-2:] != ["y_primary", "y_subsidiary"]:
            raise FormatError("label columns must be the last two, y_primary then y_subsidiary", line=1)
        d = len(header) - 2
        if header[:d] != [f"f{i}" for i in range(d)]:
            raise FormatError("feature columns must be named f0..f{D-1}", line=1)
        feats, yp, ys = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise FormatError(f"expected {d + 2} cells, got {len(row)}", line=lineno)
            try:
                feats.append([float(v) for v in row[:d]])
                a, b = int(row[d]), int(row[d + 1])
            except ValueError as e:
                raise FormatError(f"non-numeric cell: {e}", line=lineno) from None
            if a < 0 or b < 0:
                raise FormatError("negative label", line=lineno)
            if not all(np.isfinite(feats[-1])):
                raise FormatError("non-finite feature", line=lineno)
            yp.append(a)
            ys.append(b)
    if not feats:
        raise FormatError("no data rows", line=2)
    yp_a = np.array(yp, dtype=np.int64)
    ys_a = np.array(ys, dtype=np.int64)
    return LabeledDataset(
        np.array(feats, dtype=np.float64).reshape(len(feats), d),
        yp_a,
        ys_a,
        n_primary if n_primary is not None else int(yp_a.max()) + 1,
        n_subsidiary if n_subsidiary is not None else int(ys_a.max()) + 1,
    )


def concat(parts: Sequence[LabeledDataset]) -> LabeledDataset:
    return LabeledDataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.y_primary for p in parts]),
        np.concatenate([p.y_subsidiary for p in parts]),
        max(p.n_primary_classes for p in parts),
        max(p.n_subsidiary_classes for p in parts),
        np.concatenate([p.primary_mask for p in parts]),
    )


def hide_primary_labels(ds: LabeledDataset, subsidiary_class: int) -> LabeledDataset:
    """Mark examples of one subsidiary class (the target domain) as primary-unlabeled."""
    out = ds.subset(np.arange(len(ds)))
    out.primary_mask = out.primary_mask & (out.y_subsidiary != subsidiary_class)
    return out

