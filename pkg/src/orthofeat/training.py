"""Three-stage adversarial training.

Stage 1 fits encoder + primary head on the primary labels, stage 2 fits the
subsidiary head on frozen codes, stage 3 updates only the encoder against the
frozen subsidiary head using the configured adversarial strategy. The three
stages repeat for ``cfg.cycles`` cycles. Optimizer state is reset at every
stage boundary.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .data import LabeledDataset, batch_iter
from .errors import ShapeError
from .losses import cosine_matrix, cosine_orthogonality_loss, grl_scale, reversed_cce, softmax_cce
from .models import ModelBundle, encode, head_logits
from .tensor_core import DenseLayer, backward, forward

STRATEGIES = ("none", "reversed_cce", "grl", "cosine")
OPTIMIZERS = ("adam", "sgd")

STAGE_PRIMARY, STAGE_SUBSIDIARY, STAGE_ADVERSARIAL, STAGE_REFIT = 1, 2, 3, 4


@dataclass
class TrainConfig:
    strategy: str = "cosine"
    grl_lambda: float = 1.0
    epochs_primary: int = 10
    epochs_subsidiary: int = 10
    epochs_adversarial: int = 10
    cycles: int = 3
    batch_size: int = 128
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    encoder_freeze_depth: int = 0
    freeze_from: str = "input"
    adversarial_biases: bool = True
    # after the last cycle, retrain only the primary head on the final codes
    refit_epochs: int = 0
    record_wall_time: bool = False

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        for name in ("epochs_primary", "epochs_subsidiary", "epochs_adversarial", "cycles", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.freeze_from not in ("input", "output"):
            raise ValueError("freeze_from must be 'input' or 'output'")
        if self.refit_epochs < 0:
            raise ValueError("refit_epochs must be >= 0")
        if self.encoder_freeze_depth < 0:
            raise ValueError("encoder_freeze_depth must be >= 0")
        if not np.isfinite(self.grl_lambda):
            raise ValueError("grl_lambda must be finite")


@dataclass
class MetricsRecord:
    cycle: int
    stage: int
    epoch: int
    head: str
    loss_primary: Optional[float]
    loss_subsidiary: float
    loss_adversarial: Optional[float]
    mean_sq_cosine: float
    argmax_acc: float
    argmin_acc: float
    wall_ms: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


# -- optimizers --------------------------------------------------------------


@dataclass
class OptimizerState:
    first: list[np.ndarray]
    second: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def optimizer_step(state: OptimizerState, params, grads, cfg: TrainConfig) -> None:
    """Update ``params`` in place.

    adam: bias-corrected moments, ``theta -= lr * m_hat / (sqrt(v_hat) + eps)``.
    sgd: ``v = momentum * v + g``, ``theta -= lr * v``.
    """
    if len(params) != len(grads) or len(params) != len(state.first):
        raise ShapeError("params, grads and optimizer state differ in length")
    state.step += 1
    t = state.step
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.first[k].shape != p.shape:
            raise ShapeError(f"parameter {k}: shape {p.shape} vs grad {g.shape}")
        if cfg.optimizer == "adam":
            m, v = state.first[k], state.second[k]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            m_hat = m / (1.0 - cfg.beta1**t)
            v_hat = v / (1.0 - cfg.beta2**t)
            p -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        else:
            vel = state.first[k]
            vel *= cfg.momentum
            vel += g
            p -= cfg.lr * vel


# -- helpers -----------------------------------------------------------------


def _head_grads(head: DenseLayer, codes: np.ndarray, g_logits: np.ndarray):
    return g_logits.T @ codes, g_logits.sum(axis=0), g_logits @ head.weights


def _reductions_accuracy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    if len(labels) == 0:
        return float("nan"), float("nan")
    # np.argmax/np.argmin return the first (lowest-index) extremum
    return (
        float(np.mean(np.argmax(logits, axis=1) == labels)),
        float(np.mean(np.argmin(logits, axis=1) == labels)),
    )


def adversarial_code_grad(bundle: ModelBundle, codes, y_subsidiary, cfg: TrainConfig):
    """Loss value and gradient w.r.t. codes for the stage-3 objective.

    The cosine objective never sees ``y_subsidiary``.
    """
    head = bundle.subsidiary_head
    if cfg.strategy == "cosine":
        return cosine_code_grad(head.weights, codes)
    logits = head_logits(head, codes)
    if cfg.strategy == "reversed_cce":
        res = reversed_cce(logits, y_subsidiary)
        return res.value, res.grad @ head.weights
    if cfg.strategy == "grl":
        res = softmax_cce(logits, y_subsidiary)
        return -res.value, grl_scale(res.grad @ head.weights, cfg.grl_lambda)
    raise ValueError("stage 3 needs an adversarial strategy (got 'none')")


def cosine_code_grad(w_s: np.ndarray, codes: np.ndarray):
    res = cosine_orthogonality_loss(w_s, codes)
    return res.value, res.grad


def adversarial_value(bundle: ModelBundle, codes, y_subsidiary, cfg: TrainConfig) -> Optional[float]:
    if cfg.strategy == "none":
        return None
    if cfg.strategy == "cosine":
        return cosine_orthogonality_loss(bundle.subsidiary_head.weights, codes).value
    return -softmax_cce(head_logits(bundle.subsidiary_head, codes), y_subsidiary).value


def epoch_metrics(bundle: ModelBundle, data: LabeledDataset, cfg: TrainConfig, cycle: int, stage: int, epoch: int) -> MetricsRecord:
    codes = encode(bundle, data.features)
    mask = data.primary_mask
    loss_p = None
    if mask.any():
        loss_p = softmax_cce(head_logits(bundle.primary_head, codes[mask]), data.y_primary[mask]).value
    s_logits = head_logits(bundle.subsidiary_head, codes)
    loss_s = softmax_cce(s_logits, data.y_subsidiary).value
    if stage in (STAGE_PRIMARY, STAGE_REFIT):
        head = "primary"
        amax, amin = _reductions_accuracy(head_logits(bundle.primary_head, codes[mask]), data.y_primary[mask])
    else:
        head = "subsidiary"
        amax, amin = _reductions_accuracy(s_logits, data.y_subsidiary)
    return MetricsRecord(
        cycle=cycle,
        stage=stage,
        epoch=epoch,
        head=head,
        loss_primary=loss_p,
        loss_subsidiary=loss_s,
        loss_adversarial=adversarial_value(bundle, codes, data.y_subsidiary, cfg),
        mean_sq_cosine=float(np.mean(cosine_matrix(bundle.subsidiary_head.weights, codes) ** 2)),
        argmax_acc=amax,
        argmin_acc=amin,
    )


def _require(data: LabeledDataset) -> None:
    if len(data) == 0:
        raise ValueError("dataset is empty")


def _batch_seed(cfg: TrainConfig, cycle: int, stage: int) -> list[int]:
    return [int(cfg.seed), stage, cycle]


class _Timer:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.t0 = time.perf_counter()

    def lap(self) -> Optional[float]:
        if not self.enabled:
            return None
        now = time.perf_counter()
        ms, self.t0 = (now - self.t0) * 1e3, now
        return round(ms, 3)


# -- stages ------------------------------------------------------------------


def stage1_primary(bundle: ModelBundle, data: LabeledDataset, cfg: TrainConfig, cycle: int = 0, epochs: Optional[int] = None, on_record=None) -> list[MetricsRecord]:
    """Train encoder and primary head on the primary-labeled examples."""
    _require(data)
    train = data.primary_labeled()
    _require(train)
    epochs = cfg.epochs_primary if epochs is None else epochs
    enc, head = bundle.encoder, bundle.primary_head
    params = [*enc.params(), head.weights, head.bias]
    state = OptimizerState.zeros_like(params)
    seed = _batch_seed(cfg, cycle, STAGE_PRIMARY)
    timer = _Timer(cfg.record_wall_time)
    records = []
    for epoch in range(epochs):
        for idx in batch_iter(len(train), cfg.batch_size, seed, epoch):
            codes, cache = forward(enc, train.features[idx])
            res = softmax_cce(head_logits(head, codes), train.y_primary[idx])
            dW, db, dcodes = _head_grads(head, codes, res.grad)
            enc_grads, _ = backward(enc, cache, dcodes)
            optimizer_step(state, params, [*enc_grads, dW, db], cfg)
        rec = epoch_metrics(bundle, data, cfg, cycle, STAGE_PRIMARY, epoch)
        rec.wall_ms = timer.lap()
        records.append(rec)
        if on_record:
            on_record(rec)
    return records


def stage2_subsidiary(bundle: ModelBundle, data: LabeledDataset, cfg: TrainConfig, cycle: int = 0, epochs: Optional[int] = None, on_record=None) -> list[MetricsRecord]:
    """Train the subsidiary head on codes from the frozen encoder."""
    _require(data)
    epochs = cfg.epochs_subsidiary if epochs is None else epochs
    codes = encode(bundle, data.features)
    timer = _Timer(cfg.record_wall_time)
    records = []

    def after_epoch(epoch):
        rec = epoch_metrics(bundle, data, cfg, cycle, STAGE_SUBSIDIARY, epoch)
        rec.wall_ms = timer.lap()
        records.append(rec)
        if on_record:
            on_record(rec)

    fit_head(bundle.subsidiary_head, codes, data.y_subsidiary, cfg,
             _batch_seed(cfg, cycle, STAGE_SUBSIDIARY), epochs, after_epoch)
    return records


def fit_head(head: DenseLayer, codes: np.ndarray, labels: np.ndarray, cfg: TrainConfig, seed, epochs: int,
             after_epoch=None) -> list[float]:
    """Minimise mean cross entropy of a single affine head over fixed codes.

    Returns the full-data training loss after each epoch.
    """
    params = [head.weights, head.bias]
    state = OptimizerState.zeros_like(params)
    curve = []
    for epoch in range(epochs):
        for idx in batch_iter(len(codes), cfg.batch_size, seed, epoch):
            c = codes[idx]
            res = softmax_cce(head_logits(head, c), labels[idx])
            dW, db, _ = _head_grads(head, c, res.grad)
            optimizer_step(state, params, [dW, db], cfg)
        curve.append(softmax_cce(head_logits(head, codes), labels).value)
        if after_epoch:
            after_epoch(epoch)
    return curve


def stage3_adversarial(bundle: ModelBundle, data: LabeledDataset, cfg: TrainConfig, cycle: int = 0, epochs: Optional[int] = None, on_record=None) -> list[MetricsRecord]:
    """Update the encoder only, against the frozen subsidiary head."""
    _require(data)
    if cfg.strategy == "none":
        raise ValueError("stage 3 needs an adversarial strategy (got 'none')")
    epochs = cfg.epochs_adversarial if epochs is None else epochs
    enc = bundle.encoder
    trainable = trainable_encoder_params(len(enc.layers), cfg)
    params = [enc.params()[k] for k in trainable]
    state = OptimizerState.zeros_like(params)
    seed = _batch_seed(cfg, cycle, STAGE_ADVERSARIAL)
    timer = _Timer(cfg.record_wall_time)
    use_labels = cfg.strategy != "cosine"
    records = []
    for epoch in range(epochs):
        for idx in batch_iter(len(data), cfg.batch_size, seed, epoch):
            codes, cache = forward(enc, data.features[idx])
            if use_labels:
                _, dcodes = adversarial_code_grad(bundle, codes, data.y_subsidiary[idx], cfg)
            else:
                _, dcodes = cosine_code_grad(bundle.subsidiary_head.weights, codes)
            grads, _ = backward(enc, cache, dcodes)
            if params:
                optimizer_step(state, params, [grads[k] for k in trainable], cfg)
        rec = epoch_metrics(bundle, data, cfg, cycle, STAGE_ADVERSARIAL, epoch)
        rec.wall_ms = timer.lap()
        records.append(rec)
        if on_record:
            on_record(rec)
    return records


def refit_primary_head(bundle: ModelBundle, data: LabeledDataset, cfg: TrainConfig, epochs: Optional[int] = None, on_record=None) -> list[MetricsRecord]:
    """Retrain the primary head alone on frozen codes of the primary-labeled examples.

    Stage 3 rotates the codes after the last stage 1, leaving the primary head
    fitted to stale codes; this re-synchronises it without touching the encoder.
    """
    _require(data)
    train = data.primary_labeled()
    _require(train)
    epochs = cfg.refit_epochs if epochs is None else epochs
    timer = _Timer(cfg.record_wall_time)
    records = []

    def after_epoch(epoch):
        rec = epoch_metrics(bundle, data, cfg, cfg.cycles, STAGE_REFIT, epoch)
        rec.wall_ms = timer.lap()
        records.append(rec)
        if on_record:
            on_record(rec)

    fit_head(bundle.primary_head, encode(bundle, train.features), train.y_primary, cfg,
             _batch_seed(cfg, cfg.cycles, STAGE_REFIT), epochs, after_epoch)
    return records


def trainable_encoder_params(n_layers: int, cfg: TrainConfig) -> list[int]:
    """Indices into ``encoder.params()`` that stage 3 may update.

    ``encoder_freeze_depth`` layers are frozen counting from ``freeze_from``;
    with ``adversarial_biases`` off, encoder biases stay fixed as well.
    """
    depth = min(cfg.encoder_freeze_depth, n_layers)
    if cfg.freeze_from == "input":
        layers = range(depth, n_layers)
    else:
        layers = range(0, n_layers - depth)
    biases = (1,) if cfg.adversarial_biases else ()
    return [2 * layer + o for layer in layers for o in (0, *biases)]


def run_cycles(bundle: ModelBundle, data: LabeledDataset, cfg: TrainConfig, on_record=None) -> list[MetricsRecord]:
    """stage 1 -> 2 -> 3, repeated ``cfg.cycles`` times (stage 3 skipped for strategy 'none').

    With ``cfg.refit_epochs > 0`` a primary-head refit follows the last cycle.
    """
    cfg.validate()
    records = []
    for cycle in range(cfg.cycles):
        records += stage1_primary(bundle, data, cfg, cycle, on_record=on_record)
        records += stage2_subsidiary(bundle, data, cfg, cycle, on_record=on_record)
        if cfg.strategy != "none":
            records += stage3_adversarial(bundle, data, cfg, cycle, on_record=on_record)
    if cfg.refit_epochs:
        records += refit_primary_head(bundle, data, cfg, on_record=on_record)
    return records
