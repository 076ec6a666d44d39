"""Training-loop contracts: smoke convergence, determinism, resume
invariance, early stopping, perplexity and grid search."""

import numpy as np
import pytest

from spdflab.checkpoint import load_checkpoint, save_checkpoint
from spdflab.data import Vocabulary, make_finetune_examples, pack
from spdflab.errors import ConfigError, InputError
from spdflab.model import GptModel, ModelConfig
from spdflab.optim import OptimizerConfig, ScheduleConfig
from spdflab.sparsity import mask_stats
from spdflab.train import (
    TrainPlan,
    evaluate_nll,
    evaluate_ppl,
    finetune,
    grid_search,
    plan_seeds,
    pretrain,
)

VOCAB = Vocabulary()
CFG = ModelConfig(n_layers=2, d_model=32, n_heads=2, d_head=16,
                  vocab_size=VOCAB.size, context_window=96)


def tiny_dataset(seq_len=32, n_docs=30):
    docs = ["the cat sat on the mat. " * 3 for _ in range(n_docs)]
    return pack(VOCAB, docs, seq_len)


def make_plan(phase="pretrain", seed=0, token_budget=8 * 32 * 40, sparsity=None, **over):
    defaults = dict(
        phase=phase,
        model=CFG,
        optimizer=OptimizerConfig(peak_lr=3e-3),
        schedule=ScheduleConfig(total_tokens=token_budget or 1.0, peak_lr=3e-3,
                                warmup_tokens=token_budget * 0.1 if token_budget else 0.0,
                                shape="cosine" if phase == "pretrain" else "linear",
                                final_lr_fraction=0.1 if phase == "pretrain" else 0.0),
        batch_size=8,
        seed=seed,
        token_budget=token_budget if phase == "pretrain" else 0.0,
        epochs=5,
        sparsity_level=sparsity,
        eval_every=10,
    )
    defaults.update(over)
    return TrainPlan(**defaults)


def finetune_examples(n=24):
    recs = [
        {"fields": {"name": f"Place {i}"}, "reference": f"Place {i} serves food."}
        for i in range(n)
    ]
    return make_finetune_examples(recs, VOCAB)


class TestPretrain:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_loss_drops_at_least_20_percent(self, seed):
        ds = tiny_dataset()
        losses = []
        plan = make_plan(seed=seed, token_budget=8 * 32 * 200)
        pretrain(plan, ds, on_step=lambda s, t, l: losses.append(l))
        start = np.log(CFG.vocab_size)
        assert losses[0] == pytest.approx(start, rel=0.1)
        assert min(losses) < 0.8 * start

    def test_same_seed_bit_identical_losses(self):
        ds = tiny_dataset()
        runs = []
        for _ in range(2):
            losses = []
            pretrain(make_plan(seed=7, token_budget=8 * 32 * 50),
                     ds, on_step=lambda s, t, l: losses.append(l))
            runs.append(losses)
        assert runs[0] == runs[1]
        assert len(runs[0]) == 50

    def test_sparse_plan_reports_target_sparsity(self):
        ds = tiny_dataset()
        ckpt = pretrain(make_plan(seed=0, token_budget=8 * 32 * 5, sparsity=0.5), ds)
        stats = mask_stats(ckpt.masks)
        assert stats.overall_sparsity == pytest.approx(0.5, abs=0.01)

    def test_empty_dataset_rejected(self):
        ds = tiny_dataset()
        ds.tokens = ds.tokens[:0]
        with pytest.raises(InputError):
            pretrain(make_plan(), ds)

    def test_resume_matches_uninterrupted(self, tmp_path):
        from dataclasses import replace

        ds = tiny_dataset()
        budget = 8 * 32 * 30
        full_plan = make_plan(seed=3, token_budget=budget)
        full = pretrain(full_plan, ds)

        # same plan, stopped halfway: the schedule must be the full run's
        half = pretrain(replace(full_plan, token_budget=budget // 2), ds)
        p = save_checkpoint(tmp_path / "half.ckpt", half)
        resumed = pretrain(full_plan, ds, resume_from=load_checkpoint(p))
        for name in full.params:
            assert np.array_equal(full.params[name], resumed.params[name]), name
        assert full.tokens_seen == resumed.tokens_seen

    def test_metrics_log_written(self, tmp_path):
        ds = tiny_dataset()
        pretrain(make_plan(seed=0, token_budget=8 * 32 * 12), ds, out_dir=tmp_path)
        lines = (tmp_path / "metrics.log").read_text().strip().splitlines()
        assert len(lines) == 12
        import json

        rec = json.loads(lines[0])
        assert {"step", "tokens", "lr", "train_loss"} <= set(rec)
        assert (tmp_path / "checkpoints" / "final.ckpt").exists()


class TestCheckpointFile:
    def test_roundtrip_preserves_everything(self, tmp_path):
        ds = tiny_dataset()
        ckpt = pretrain(make_plan(seed=1, token_budget=8 * 32 * 8, sparsity=0.75), ds)
        p = save_checkpoint(tmp_path / "c.ckpt", ckpt)
        back = load_checkpoint(p)
        assert back.config.to_dict() == ckpt.config.to_dict()
        assert back.tokens_seen == ckpt.tokens_seen
        assert back.opt_step == ckpt.opt_step
        for name in ckpt.params:
            assert np.array_equal(back.params[name], ckpt.params[name])
            assert np.array_equal(back.opt_m[name], ckpt.opt_m[name])
        for name in ckpt.masks.masks:
            assert np.array_equal(back.masks.masks[name], ckpt.masks.masks[name])
        assert back.rng_state == ckpt.rng_state


class TestFinetune:
    def test_densify_step0_val_matches_sparse_checkpoint(self):
        ds = tiny_dataset()
        ckpt = pretrain(make_plan(seed=2, token_budget=8 * 32 * 10, sparsity=0.5), ds)
        examples = finetune_examples()
        sparse_nll = evaluate_nll(ckpt.build_model(), examples, mask_set=ckpt.masks)
        plan = make_plan(phase="finetune", token_budget=0, epochs=1)
        res = finetune(plan, ckpt, examples[:16], examples[16:])
        assert res.history[0]["val_loss"] == pytest.approx(
            evaluate_nll(ckpt.build_model(), examples[16:], mask_set=ckpt.masks), rel=1e-12
        )
        assert np.isfinite(sparse_nll)

    def test_sparse_finetune_keeps_masks(self):
        ds = tiny_dataset()
        ckpt = pretrain(make_plan(seed=2, token_budget=8 * 32 * 10, sparsity=0.75), ds)
        examples = finetune_examples()
        plan = make_plan(phase="finetune", token_budget=0, epochs=2,
                         densify_on_finetune=False)
        res = finetune(plan, ckpt, examples[:16], examples[16:])
        assert res.checkpoint.masks is not None
        before = mask_stats(ckpt.masks).overall_sparsity
        after = mask_stats(res.checkpoint.masks).overall_sparsity
        assert before == after
        for name, mask in res.checkpoint.masks.masks.items():
            assert np.all(res.checkpoint.params[name][~mask] == 0.0)

    def test_dense_finetune_fills_masked_positions(self):
        ds = tiny_dataset()
        ckpt = pretrain(make_plan(seed=4, token_budget=8 * 32 * 10, sparsity=0.75), ds)
        examples = finetune_examples()
        plan = make_plan(phase="finetune", token_budget=0, epochs=2)
        res = finetune(plan, ckpt, examples[:16], examples[16:])
        assert res.checkpoint.masks is None
        fractions = [
            float((res.checkpoint.params[name][~mask] != 0.0).mean())
            for name, mask in ckpt.masks.masks.items()
        ]
        assert np.mean(fractions) > 0.01

    def test_early_stopping_returns_min_validation(self):
        ds = tiny_dataset()
        ckpt = pretrain(make_plan(seed=5, token_budget=8 * 32 * 5), ds)
        examples = finetune_examples()
        u_curve = iter([5.0, 3.0, 1.0, 2.0, 4.0, 6.0])
        calls = []

        def fake_val(model, val_examples):
            v = next(u_curve)
            calls.append(v)
            return v

        plan = make_plan(phase="finetune", token_budget=0, epochs=5, patience=1)
        res = finetune(plan, ckpt, examples[:16], examples[16:], val_loss_fn=fake_val)
        assert res.best_val_loss == 1.0
        assert res.best_epoch == 2
        # stopped after the first rising eval (patience 1): evals 0..3 only
        assert calls == [5.0, 3.0, 1.0, 2.0]

    def test_missing_validation_split_rejected(self):
        ds = tiny_dataset()
        ckpt = pretrain(make_plan(seed=5, token_budget=8 * 32 * 3), ds)
        with pytest.raises(ConfigError):
            finetune(make_plan(phase="finetune", token_budget=0), ckpt,
                     finetune_examples(8), [])


class TestEvaluatePpl:
    def test_uniform_logit_model_ppl_equals_vocab(self):
        # zero all weights: logits are exactly uniform, so PPL = vocab size
        model = GptModel.init(CFG, seed=0)
        for p in model.params.values():
            p.value[...] = 0.0
        examples = finetune_examples(6)
        ppl = evaluate_ppl(model, examples)
        assert ppl == pytest.approx(CFG.vocab_size, abs=0.5)

    def test_ppl_at_least_one(self):
        model = GptModel.init(CFG, seed=1)
        assert evaluate_ppl(model, finetune_examples(6)) >= 1.0

    def test_overfit_single_example_ppl_tends_to_one(self):
        ds = pack(VOCAB, ["abab" * 16] * 8, 32)
        plan = make_plan(seed=6, token_budget=8 * 32 * 120)
        ckpt = pretrain(plan, ds)
        ex = make_finetune_examples(
            [{"fields": {"name": "ab"}, "reference": "abababab"}], VOCAB
        )
        model = ckpt.build_model()
        ppl = evaluate_ppl(model, ex)
        assert ppl < 4.0  # memorized-distribution perplexity collapses


class TestGridSearch:
    def base_plan(self):
        return make_plan(phase="finetune", token_budget=0)

    def test_single_candidate_returned_unchanged(self):
        plan = self.base_plan()
        best, cells = grid_search(plan, [3e-3], [8], run_cell=lambda p: 1.0)
        assert best.optimizer.peak_lr == 3e-3
        assert best.batch_size == 8
        assert len(cells) == 1

    def test_injected_best_cell_wins(self):
        plan = self.base_plan()

        def scorer(p):
            return 0.1 if (p.optimizer.peak_lr, p.batch_size) == (1e-4, 16) else 1.0

        best, cells = grid_search(plan, [1e-3, 1e-4], [8, 16], run_cell=scorer)
        assert (best.optimizer.peak_lr, best.batch_size) == (1e-4, 16)

    def test_report_has_full_cross_product(self):
        plan = self.base_plan()
        _, cells = grid_search(plan, [1e-3, 5e-4, 1e-4], [8, 16], run_cell=lambda p: 1.0)
        assert len(cells) == 6

    def test_tie_breaks_to_smaller_lr(self):
        plan = self.base_plan()
        best, _ = grid_search(plan, [1e-3, 1e-4], [8], run_cell=lambda p: 1.0)
        assert best.optimizer.peak_lr == 1e-4

    def test_empty_candidates_rejected(self):
        with pytest.raises(ConfigError):
            grid_search(self.base_plan(), [], [8], run_cell=lambda p: 1.0)


def test_plan_seeds_are_distinct_and_deterministic():
    a = plan_seeds(42)
    b = plan_seeds(42)
    assert a == b
    assert len({a["init"], a["mask"], a["batch"], a["shuffle"]}) == 4


def test_grid_search_default_evaluator_runs_finetune():
    ds = tiny_dataset()
    ckpt = pretrain(make_plan(seed=8, token_budget=8 * 32 * 5), ds)
    examples = finetune_examples(20)
    plan = make_plan(phase="finetune", token_budget=0, epochs=1)
    best, cells = grid_search(
        plan, [3e-3, 1e-3], [8], checkpoint=ckpt,
        train_examples=examples[:14], val_examples=examples[14:],
    )
    assert len(cells) == 2
    assert all(np.isfinite(c.val_loss) for c in cells)
    assert best.optimizer.peak_lr in (3e-3, 1e-3)
