"""Experiment harness structure checks on a micro configuration."""

import json
from pathlib import Path

import pytest

from spdflab.data import Vocabulary, make_finetune_examples
from spdflab.bleu import score_run
from spdflab.errors import ConfigError
from spdflab.experiment import ExperimentConfig, run_experiment
from spdflab.model import GenConfig, GptModel, ModelConfig
from spdflab.presets import PRESETS, Preset


@pytest.fixture
def micro_preset():
    PRESETS["toy-micro"] = Preset(
        name="toy-micro",
        model=ModelConfig(n_layers=2, d_model=32, n_heads=2, d_head=16,
                          vocab_size=384, context_window=256),
        batch_size=8,
        peak_lr=2e-3,
        training_tokens=8 * 96 * 20.0,
        warmup_tokens=8 * 96 * 2.0,
        description="micro preset for harness tests",
    )
    yield "toy-micro"
    del PRESETS["toy-micro"]


def micro_config(tmp_path, preset, **over):
    kwargs = dict(
        out_dir=str(tmp_path / "exp"),
        preset=preset,
        sparsities=(0.0, 0.75),
        seeds=(0, 1, 2),
        summarization_sparsities=(0.0, 0.75),
        n_pretrain_docs=200,
        n_data2text_records=60,
        n_summarization_records=40,
        pack_seq_len=96,
        ft_epochs=2,
        gen_max_new_tokens=48,
        jobs=1,
    )
    kwargs.update(over)
    return ExperimentConfig(**kwargs)


@pytest.mark.slow
def test_experiment_structure_and_report(tmp_path, micro_preset):
    cfg = micro_config(tmp_path, micro_preset)
    report = run_experiment(cfg)

    d2t = [c for c in report["cells"] if c["task"] == "data2text"]
    assert len(d2t) == len(cfg.sparsities) * 2 * len(cfg.seeds)
    assert all(c["status"] == "ok" for c in report["cells"])

    # at S=0 dense-FT and sparse-FT are the same run (all-ones mask)
    for seed in cfg.seeds:
        pair = {c["ft_mode"]: c for c in d2t if c["sparsity"] == 0.0 and c["seed"] == seed}
        assert pair["dense"]["bleu"] == pytest.approx(pair["sparse"]["bleu"], abs=1e-9)
        assert pair["dense"]["val_loss"] == pytest.approx(pair["sparse"]["val_loss"],
                                                          rel=1e-9)

    # report files exist and parse
    out = Path(cfg.out_dir)
    assert (out / "report.json").exists()
    assert (out / "report.txt").exists()
    assert (out / "manifest.json").exists()
    loaded = json.loads((out / "report.json").read_text())
    assert loaded["hypothesis2"]["n_seeds"] == 3
    assert "dense_vs_sparse_ft_bleu_gap" in loaded
    # per-seed hypothesis data is emitted regardless of outcome
    assert len(loaded["hypothesis2"]["per_seed"]) == 3

    # every cell directory carries a manifest
    for cell_dir in (out / "cells").iterdir():
        assert (cell_dir / "manifest.json").exists(), cell_dir


def test_experiment_requires_three_seeds(tmp_path, micro_preset):
    with pytest.raises(ConfigError):
        run_experiment(micro_config(tmp_path, micro_preset, seeds=(0, 1)))


def test_score_run_identity_model_reaches_high_bleu(tmp_path):
    # a model that memorized the test set scores near-perfect BLEU; emulate
    # by scoring references against themselves through the report path
    from spdflab.bleu import corpus_bleu

    refs = ["alpha beta gamma delta", "epsilon zeta eta theta"]
    rep = corpus_bleu(refs, [[r] for r in refs])
    assert rep.bleu > 95


def test_score_run_handles_generation_failure(monkeypatch):
    vocab = Vocabulary()
    cfg = ModelConfig(n_layers=1, d_model=32, n_heads=2, d_head=16,
                      vocab_size=vocab.size, context_window=64)
    model = GptModel.init(cfg, seed=0)
    recs = [{"fields": {"name": "A"}, "reference": "A serves food."}]
    examples = make_finetune_examples(recs, vocab)

    def boom(*a, **k):
        raise RuntimeError("generation broke")

    monkeypatch.setattr(model, "generate_greedy_batch", boom)
    monkeypatch.setattr(model, "generate", boom)
    rep = score_run(model, examples, ["A serves food."], vocab,
                    GenConfig(beam_size=1, max_new_tokens=8))
    assert rep.bleu == 0.0  # empty hypothesis recorded, run continued
    assert rep.perplexity is not None
