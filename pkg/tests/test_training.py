from dataclasses import replace

import numpy as np
import pytest

from orthofeat.data import SynthConfig, gen_two_factor
from orthofeat.models import build_bundle, encode, head_logits, params_digest
from orthofeat.training import (
    OptimizerState,
    TrainConfig,
    optimizer_step,
    refit_primary_head,
    run_cycles,
    stage1_primary,
    stage2_subsidiary,
    stage3_adversarial,
    trainable_encoder_params,
)

import oracles

TOY = SynthConfig(n_per_cell=25, n_primary=2, n_subsidiary=2, dim=8, primary_sep=4.0, subsidiary_sep=4.0, seed=5)


@pytest.fixture
def toy():
    return gen_two_factor(TOY)


def fresh(data, seed=0):
    return build_bundle(data.dim, data.n_primary_classes, data.n_subsidiary_classes, seed, units=(16, 8))


def digest(*layers):
    return params_digest([p for layer in layers for p in (layer.weights, layer.bias)])


def test_stage1_fits_separable_toy(toy):
    b = fresh(toy)
    recs = stage1_primary(b, toy, TrainConfig(lr=1e-2, batch_size=16), epochs=50)
    acc = np.mean(head_logits(b.primary_head, encode(b, toy.features)).argmax(1) == toy.y_primary)
    assert acc >= 0.99
    losses = [r.loss_primary for r in recs]
    assert np.mean(np.diff(losses) <= 0) >= 0.9


def test_lr_zero_adam_is_identity(toy):
    b = fresh(toy)
    before = params_digest(b.params())
    # stages do not re-validate, so lr = 0 reaches the optimizer
    stage1_primary(b, toy, TrainConfig(lr=0.0), epochs=3)
    assert params_digest(b.params()) == before


def test_stage2_freezes_encoder_and_primary():
    toy = gen_two_factor(replace(TOY, subsidiary_sep=10.0))
    b = fresh(toy)
    enc_before = params_digest(b.encoder.params())
    p_before = digest(b.primary_head)
    stage2_subsidiary(b, toy, TrainConfig(lr=1e-2), epochs=30)
    assert params_digest(b.encoder.params()) == enc_before
    assert digest(b.primary_head) == p_before
    acc = np.mean(head_logits(b.subsidiary_head, encode(b, toy.features)).argmax(1) == toy.y_subsidiary)
    assert acc >= 0.95


def test_stage2_zero_epochs_is_noop(toy):
    b = fresh(toy)
    s_before = digest(b.subsidiary_head)
    assert stage2_subsidiary(b, toy, TrainConfig(), epochs=0) == []
    assert digest(b.subsidiary_head) == s_before


@pytest.mark.parametrize("strategy", ["cosine", "reversed_cce", "grl"])
def test_stage3_freezes_both_heads(toy, strategy):
    b = fresh(toy)
    stage2_subsidiary(b, toy, TrainConfig(lr=1e-2), epochs=10)
    heads = digest(b.primary_head, b.subsidiary_head)
    enc = params_digest(b.encoder.params())
    stage3_adversarial(b, toy, TrainConfig(strategy=strategy), epochs=2)
    assert digest(b.primary_head, b.subsidiary_head) == heads
    assert params_digest(b.encoder.params()) != enc


def test_cosine_stage_reduces_squared_cosine(toy):
    b = fresh(toy)
    stage2_subsidiary(b, toy, TrainConfig(lr=1e-2), epochs=20)
    recs = stage3_adversarial(b, toy, TrainConfig(strategy="cosine"), epochs=10)
    cs = [r.mean_sq_cosine for r in recs]
    assert all(later < earlier for earlier, later in zip(cs, cs[1:]))


def test_reversed_stage_increases_subsidiary_loss(toy):
    b = fresh(toy)
    stage2_subsidiary(b, toy, TrainConfig(lr=1e-2), epochs=20)
    recs = stage3_adversarial(b, toy, TrainConfig(strategy="reversed_cce"), epochs=10)
    ls = [r.loss_subsidiary for r in recs]
    assert all(later > earlier for earlier, later in zip(ls, ls[1:]))


def test_cosine_stage_ignores_subsidiary_labels(toy):
    a, b = fresh(toy), fresh(toy)
    shuffled = replace(toy, y_subsidiary=toy.y_subsidiary[::-1].copy())
    cfg = TrainConfig(strategy="cosine")
    stage3_adversarial(a, toy, cfg, epochs=2)
    stage3_adversarial(b, shuffled, cfg, epochs=2)
    assert params_digest(a.encoder.params()) == params_digest(b.encoder.params())


def test_stage3_requires_adversary(toy):
    with pytest.raises(ValueError, match="none"):
        stage3_adversarial(fresh(toy), toy, TrainConfig(strategy="none"))


def test_grl_step_matches_reversed_cce_bit_for_bit(toy):
    a, b = fresh(toy), fresh(toy)
    stage3_adversarial(a, toy, TrainConfig(strategy="grl", grl_lambda=1.0, batch_size=len(toy)), epochs=1)
    stage3_adversarial(b, toy, TrainConfig(strategy="reversed_cce", batch_size=len(toy)), epochs=1)
    for p, q in zip(a.encoder.params(), b.encoder.params()):
        assert p.tobytes() == q.tobytes()


@pytest.mark.parametrize(
    "depth, side, biases, expected",
    [
        (0, "input", True, [0, 1, 2, 3, 4, 5]),
        (1, "input", True, [2, 3, 4, 5]),
        (1, "output", True, [0, 1, 2, 3]),
        (2, "input", False, [4]),
        (5, "input", True, []),
    ],
)
def test_trainable_encoder_params(depth, side, biases, expected):
    cfg = TrainConfig(encoder_freeze_depth=depth, freeze_from=side, adversarial_biases=biases)
    assert trainable_encoder_params(3, cfg) == expected


def test_frozen_layers_untouched_by_stage3(toy):
    b = build_bundle(toy.dim, 2, 2, 0, units=(12, 10, 6))
    frozen = b.encoder.params()[:4]
    before = params_digest(frozen)
    stage3_adversarial(b, toy, TrainConfig(encoder_freeze_depth=2, adversarial_biases=False), epochs=2)
    assert params_digest(frozen) == before
    assert params_digest([b.encoder.layers[2].bias]) == params_digest([np.zeros(6)])


def test_one_cycle_equals_manual_stages(toy):
    cfg = TrainConfig(cycles=1, epochs_primary=3, epochs_subsidiary=2, epochs_adversarial=2)
    a, b = fresh(toy), fresh(toy)
    run_cycles(a, toy, cfg)
    stage1_primary(b, toy, cfg)
    stage2_subsidiary(b, toy, cfg)
    stage3_adversarial(b, toy, cfg)
    assert params_digest(a.params()) == params_digest(b.params())


def test_strategy_none_skips_stage3(toy):
    recs = run_cycles(fresh(toy), toy, TrainConfig(strategy="none", cycles=2, epochs_primary=2, epochs_subsidiary=2))
    assert {r.stage for r in recs} == {1, 2}
    assert all(r.loss_adversarial is None for r in recs)


def test_run_cycles_deterministic_and_ordered(toy):
    cfg = TrainConfig(cycles=2, epochs_primary=2, epochs_subsidiary=2, epochs_adversarial=2, refit_epochs=2)
    r1 = run_cycles(fresh(toy), toy, cfg)
    r2 = run_cycles(fresh(toy), toy, cfg)
    assert [r.to_dict() for r in r1] == [r.to_dict() for r in r2]
    keys = [(r.cycle, r.stage, r.epoch) for r in r1]
    assert keys == sorted(keys)
    assert all(r.wall_ms is None for r in r1)


def test_refit_touches_only_primary_head(toy):
    b = fresh(toy)
    cfg = TrainConfig(refit_epochs=3)
    others = params_digest([*b.encoder.params(), b.subsidiary_head.weights, b.subsidiary_head.bias])
    recs = refit_primary_head(b, toy, cfg)
    assert len(recs) == 3 and {r.stage for r in recs} == {4}
    assert params_digest([*b.encoder.params(), b.subsidiary_head.weights, b.subsidiary_head.bias]) == others


def test_config_validation():
    for bad in (dict(strategy="dann"), dict(optimizer="rmsprop"), dict(cycles=0), dict(lr=0.0), dict(freeze_from="middle")):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


# -- optimizers ----------------------------------------------------------------


def test_zero_grads_leave_params_unchanged():
    for opt in ("adam", "sgd"):
        p = np.array([1.0, -2.0])
        st = OptimizerState.zeros_like([p])
        optimizer_step(st, [p], [np.zeros(2)], TrainConfig(optimizer=opt))
        assert p.tolist() == [1.0, -2.0]


def test_adam_first_step_is_minus_lr():
    p = np.zeros(1)
    optimizer_step(OptimizerState.zeros_like([p]), [p], [np.ones(1)], TrainConfig(lr=1e-3))
    assert p[0] == pytest.approx(-1e-3, rel=1e-7)


def test_adam_matches_scalar_reference():
    grads = np.random.default_rng(0).normal(size=100)
    p = np.zeros(1)
    st = OptimizerState.zeros_like([p])
    cfg = TrainConfig(lr=1e-2)
    for g in grads:
        optimizer_step(st, [p], [np.array([g])], cfg)
    assert abs(p[0] - oracles.adam_scalar(grads.tolist(), lr=1e-2)) < 1e-12


def test_sgd_momentum_matches_scalar_reference():
    grads = np.random.default_rng(1).normal(size=100)
    p = np.zeros(1)
    st = OptimizerState.zeros_like([p])
    cfg = TrainConfig(optimizer="sgd", lr=0.05, momentum=0.9)
    for g in grads:
        optimizer_step(st, [p], [np.array([g])], cfg)
    assert abs(p[0] - oracles.sgd_scalar(grads.tolist(), 0.05, 0.9)) < 1e-12
