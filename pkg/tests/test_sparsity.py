"""Mask construction, application, audit and removal contracts."""

import numpy as np
import pytest

from spdflab.checkpoint import Checkpoint
from spdflab.errors import ConfigError
from spdflab.model import GptModel, ModelConfig
from spdflab.optim import OptimizerConfig, OptState, step
from spdflab.sparsity import (
    MaskSet,
    SparsityPlan,
    apply_masks,
    build_masks,
    densify,
    mask_stats,
    round_half_away,
)

CFG = ModelConfig(n_layers=2, d_model=32, n_heads=2, d_head=16, vocab_size=128,
                  context_window=24)


def model(seed=0):
    return GptModel.init(CFG, seed=seed)


def test_round_half_away():
    assert round_half_away(2.5) == 3
    assert round_half_away(2.4) == 2
    assert round_half_away(0.5) == 1
    assert round_half_away(749.5) == 750


def test_plan_rejects_bad_levels():
    with pytest.raises(ConfigError):
        SparsityPlan({"h0.attn.wq": 1.0})
    with pytest.raises(ConfigError):
        SparsityPlan({"h0.attn.wq": -0.1})


def test_plan_covering_non_sparsifiable_rejected():
    m = model()
    plan = SparsityPlan.uniform(m, 0.5)
    plan.sparsities["wte"] = 0.5
    with pytest.raises(ConfigError):
        build_masks(m, plan, seed=0)
    incomplete = SparsityPlan({"h0.attn.wq": 0.5})
    with pytest.raises(ConfigError):
        build_masks(m, incomplete, seed=0)


@pytest.mark.parametrize("s", [0.0, 0.5, 0.75, 0.9])
def test_zero_counts_exact(s):
    m = model()
    masks = build_masks(m, SparsityPlan.uniform(m, s), seed=1)
    for name, mask in masks.masks.items():
        expected = round_half_away(s * mask.size)
        assert int(mask.size - mask.sum()) == expected


def test_exact_count_1000_weights():
    # 1000 weights at s=0.75 -> exactly 750 zeros
    flat = np.ones(1000, dtype=bool)
    rng = np.random.default_rng(0)
    flat[rng.choice(1000, size=round_half_away(0.75 * 1000), replace=False)] = False
    assert int((~flat).sum()) == 750


def test_zero_sparsity_is_identity():
    m = model(seed=3)
    masks = build_masks(m, SparsityPlan.uniform(m, 0.0), seed=0)
    assert masks.all_ones()
    toks = np.random.default_rng(0).integers(0, 128, size=(2, 10))
    before = m.forward_logits(toks)
    apply_masks(m, masks)
    after = m.forward_logits(toks, mask_set=masks)
    assert np.array_equal(before, after)


def test_seed_determinism():
    m = model()
    plan = SparsityPlan.uniform(m, 0.5)
    a = build_masks(m, plan, seed=11)
    b = build_masks(m, plan, seed=11)
    c = build_masks(m, plan, seed=12)
    assert all(np.array_equal(a.masks[k], b.masks[k]) for k in a.masks)
    assert any(not np.array_equal(a.masks[k], c.masks[k]) for k in a.masks)


def test_overall_sparsity_formula_two_layers():
    # two layers with N = 100 and 300 at s = 0.2 / 0.6 give S = 200/400 = 0.5
    masks = MaskSet(
        {
            "a": np.concatenate([np.zeros(20, bool), np.ones(80, bool)]).reshape(10, 10),
            "b": np.concatenate([np.zeros(180, bool), np.ones(120, bool)]).reshape(30, 10),
        }
    )
    stats = mask_stats(masks)
    assert stats.per_layer["a"].sparsity == pytest.approx(0.2)
    assert stats.per_layer["b"].sparsity == pytest.approx(0.6)
    assert stats.overall_sparsity == pytest.approx(0.5)


def test_mask_stats_uniform_plan():
    m = model()
    masks = build_masks(m, SparsityPlan.uniform(m, 0.5), seed=2)
    stats = mask_stats(masks)
    for st in stats.per_layer.values():
        assert abs(st.sparsity - 0.5) <= 1.0 / st.total
    assert abs(stats.overall_sparsity - 0.5) <= 1.0 / stats.total


def test_apply_masks_zeroes_exactly():
    m = model(seed=4)
    masks = build_masks(m, SparsityPlan.uniform(m, 0.75), seed=5)
    apply_masks(m, masks)
    for name, mask in masks.masks.items():
        w = m.params[name].value
        assert np.all(w[~mask] == 0.0)
        assert np.array_equal(w * mask, w)  # idempotent
    measured = mask_stats(masks).overall_sparsity
    total = sum(mask.size for mask in masks.masks.values())
    assert abs(measured - 0.75) <= 1.0 / total * len(masks.masks)


def test_gradients_masked_through_forward():
    m = model(seed=6)
    masks = build_masks(m, SparsityPlan.uniform(m, 0.5), seed=7)
    apply_masks(m, masks)
    toks = np.random.default_rng(1).integers(0, 128, size=(2, 12))
    m.zero_grads()
    m.forward_loss(toks, mask_set=masks)
    m.backward()
    for name, mask in masks.masks.items():
        assert np.all(m.params[name].grad[~mask] == 0.0)


def _sparse_checkpoint(s=0.5, seed=0):
    m = model(seed=seed)
    masks = build_masks(m, SparsityPlan.uniform(m, s), seed=seed + 100)
    apply_masks(m, masks)
    state = OptState(m)
    return Checkpoint.from_model(m, masks=masks, opt_state=state), m, masks


class TestDensify:
    def test_logits_bit_identical(self):
        ckpt, _, masks = _sparse_checkpoint(0.75)
        dense = densify(ckpt)
        assert dense.masks is None
        rng = np.random.default_rng(3)
        before = ckpt.build_model()
        after = dense.build_model()
        for _ in range(10):
            toks = rng.integers(0, 128, size=(1, 16))
            a = before.forward_logits(toks, mask_set=masks)
            b = after.forward_logits(toks)
            assert np.array_equal(a, b)

    def test_masked_slots_zero_and_moments_reset(self):
        ckpt, _, masks = _sparse_checkpoint(0.5)
        # dirty the moments at masked positions to prove densify resets them
        for name, mask in masks.masks.items():
            ckpt.opt_m[name][~mask] = 1.0
            ckpt.opt_v[name][~mask] = 1.0
        dense = densify(ckpt)
        for name, mask in masks.masks.items():
            assert np.all(dense.params[name][~mask] == 0.0)
            assert np.all(dense.opt_m[name][~mask] == 0.0)
            assert np.all(dense.opt_v[name][~mask] == 0.0)

    def test_densify_dense_checkpoint_warns_noop(self):
        ckpt, _, _ = _sparse_checkpoint(0.5)
        dense = densify(ckpt)
        with pytest.warns(UserWarning):
            again = densify(dense)
        assert again is dense

    def test_masked_weights_learn_after_densify(self):
        ckpt, _, masks = _sparse_checkpoint(0.75, seed=9)
        dense = densify(ckpt)
        m2 = dense.build_model()
        state = OptState(m2)
        toks = np.random.default_rng(5).integers(0, 128, size=(4, 16))
        m2.zero_grads()
        m2.forward_loss(toks)
        m2.backward()
        step(m2, OptimizerConfig(peak_lr=1e-3), state, lr=1e-3)
        fractions = []
        for name, mask in masks.masks.items():
            w = m2.params[name].value
            fractions.append(float((w[~mask] != 0.0).mean()))
        assert np.mean(fractions) > 0.01


def test_static_mask_invariant_over_steps():
    _, m, masks = _sparse_checkpoint(0.75, seed=12)
    state = OptState(m)
    cfg = OptimizerConfig(peak_lr=1e-3)
    rng = np.random.default_rng(8)
    for _ in range(20):
        toks = rng.integers(0, 128, size=(2, 12))
        m.zero_grads()
        m.forward_loss(toks, mask_set=masks)
        m.backward()
        step(m, cfg, state, lr=1e-3, masks=masks)
    for name, mask in masks.masks.items():
        assert np.all(m.params[name].value[~mask] == 0.0)
        assert np.all(state.m[name][~mask] == 0.0)
        assert np.all(state.v[name][~mask] == 0.0)
