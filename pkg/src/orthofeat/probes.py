"""Read-only diagnostics on a trained bundle.

The argmax/argmin pair separates a head that is merely flipped (argmax near
zero, argmin high) from one whose input information is gone (both near
chance). The S2 probe retrains a fresh subsidiary head on frozen codes; its
loss curve measures how much subsidiary information the codes still carry.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .data import LabeledDataset
from .losses import cosine_matrix, softmax_cce
from .models import ModelBundle, encode, head_logits
from .tensor_core import init_layer
from .training import TrainConfig, fit_head

# S2 draws its initial weights and batch order from a stream disjoint from training
S2_STREAM = 7919


@dataclass
class ProbeReport:
    head: str
    argmax_accuracy: float
    argmin_accuracy: float
    mean_sq_cosine: float
    max_abs_cosine: float
    logit_minus_bias_max: float
    constant_prediction_fraction: float
    n_examples: int

    def to_dict(self) -> dict:
        return asdict(self)


def _labels(data: LabeledDataset, head: str) -> np.ndarray:
    if head == "primary":
        return data.y_primary
    if head == "subsidiary":
        return data.y_subsidiary
    raise ValueError(f"head must be 'primary' or 'subsidiary', got {head!r}")


def argmax_argmin_accuracy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    # numpy returns the first extremum, i.e. ties go to the lowest index
    return (
        float(np.mean(logits.argmax(axis=1) == labels)),
        float(np.mean(logits.argmin(axis=1) == labels)),
    )


def probe_argmax_argmin(bundle: ModelBundle, head: str, data: LabeledDataset) -> tuple[float, float]:
    layer = bundle.primary_head if head == "primary" else bundle.subsidiary_head
    labels = _labels(data, head)
    logits = head_logits(layer, encode(bundle, data.features))
    return argmax_argmin_accuracy(logits, labels)


def probe_bias_dominance(bundle: ModelBundle, data: LabeledDataset) -> tuple[float, float]:
    """``(max |W_j . E(x)|, fraction of examples predicted as argmax(b))`` for the subsidiary head."""
    s = bundle.subsidiary_head
    codes = encode(bundle, data.features)
    raw = codes @ s.weights.T
    logit_minus_bias_max = float(np.abs(raw).max()) if raw.size else 0.0
    pred = (raw + s.bias).argmax(axis=1)
    const = float(np.mean(pred == int(np.argmax(s.bias))))
    return logit_minus_bias_max, const


def probe_orthogonality(bundle: ModelBundle, data: LabeledDataset) -> tuple[float, float]:
    cs = cosine_matrix(bundle.subsidiary_head.weights, encode(bundle, data.features))
    return float(np.mean(cs**2)), float(np.abs(cs).max())


def identity_bound(bundle: ModelBundle, data: LabeledDataset) -> float:
    """Upper bound on ``logit_minus_bias_max`` from |w.e| = |CS| |w| |e|."""
    codes = encode(bundle, data.features)
    w = bundle.subsidiary_head.weights
    cs = cosine_matrix(w, codes)
    return float(np.abs(cs).max() * np.linalg.norm(w, axis=1).max() * np.linalg.norm(codes, axis=1).max())


def probe_report(bundle: ModelBundle, data: LabeledDataset, head: str = "subsidiary") -> ProbeReport:
    amax, amin = probe_argmax_argmin(bundle, head, data)
    msc, mac = probe_orthogonality(bundle, data)
    lmb, const = probe_bias_dominance(bundle, data)
    return ProbeReport(head, amax, amin, msc, mac, lmb, const, len(data))


def probe_retrain_subsidiary(
    bundle: ModelBundle, data: LabeledDataset, cfg: TrainConfig, epochs: Optional[int] = None
) -> list[tuple[int, float]]:
    """Train a freshly initialised subsidiary head on frozen codes.

    Returns ``[(epoch, loss), ...]`` with epoch 0 being the untrained head.
    The bundle is not modified.
    """
    if len(data) == 0:
        raise ValueError("dataset is empty")
    epochs = cfg.epochs_subsidiary if epochs is None else epochs
    codes = encode(bundle, data.features)
    head = init_layer(codes.shape[1], data.n_subsidiary_classes, "identity", [int(cfg.seed), S2_STREAM])
    start = softmax_cce(head_logits(head, codes), data.y_subsidiary).value
    curve = fit_head(head, codes, data.y_subsidiary, cfg, [int(cfg.seed), S2_STREAM, 1], epochs)
    return list(enumerate([start, *curve]))


def export_codes(bundle: ModelBundle, data: LabeledDataset, path) -> None:
    codes = encode(bundle, data.features)
    d = codes.shape[1]
    with open(path, "w", newline="") as f:
        f.write(",".join([f"c{i}" for i in range(d)] + ["y_primary", "y_subsidiary"]) + "\n")
        for row, yp, ys in zip(codes, data.y_primary, data.y_subsidiary):
            f.write(",".join([format(v, ".17g") for v in row] + [str(yp), str(ys)]) + "\n")


def write_loss_curve(curve, path) -> None:
    with open(path, "w", newline="") as f:
        f.write("epoch,loss\n")
        for epoch, loss in curve:
            f.write(f"{epoch},{loss:.17g}\n")
