"""Scripted experiment suite: sparse pre-train at several sparsity levels,
then fine-tune each checkpoint both densely and sparsely on the synthetic
data-to-text task (and densely on the summarization task), over several
seeds. Produces a comparison report with medians, dense-vs-sparse-FT gaps
and per-seed hypothesis-trend data.

Cells are independent given the shared assets, so stages can fan out over
worker processes; results are joined by cell id in input order.
"""

from __future__ import annotations

import json
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .bleu import score_run
from .checkpoint import load_checkpoint
from .config import write_manifest
from .data import (
    PackedDataset,
    Vocabulary,
    make_finetune_examples,
    make_summarization_examples,
    pack,
    train_bpe,
)
from .errors import ConfigError
from .model import GenConfig
from .optim import OptimizerConfig, ScheduleConfig
from .presets import get_preset
from .sparsity import mask_stats
from .synthetic import (
    generate_data2text_records,
    generate_pretrain_corpus,
    generate_summarization_records,
    split_records,
)
from .train import TrainPlan, evaluate_ppl, finetune, pretrain


@dataclass
class ExperimentConfig:
    out_dir: str
    preset: str = "toy-small"
    sparsities: tuple = (0.0, 0.5, 0.75)
    seeds: tuple = (0, 1, 2, 3, 4)
    summarization_sparsities: tuple = (0.0, 0.75)
    data_seed: int = 20240
    n_pretrain_docs: int = 1600
    n_data2text_records: int = 560
    n_summarization_records: int = 200
    pack_seq_len: int = 128
    ft_lr: float = 1e-3
    ft_batch_size: int = 16
    ft_epochs: int = 5
    ft_patience: int = 2
    gen_beam_size: int = 1
    gen_max_new_tokens: int = 72
    gen_no_repeat_ngram: int = 4
    jobs: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sparsities"] = list(self.sparsities)
        d["seeds"] = list(self.seeds)
        d["summarization_sparsities"] = list(self.summarization_sparsities)
        return d


# ------------------------------------------------------------------ assets


def build_assets(cfg: ExperimentConfig) -> dict:
    """Generate the shared corpora, tokenizer and packed dataset once;
    everything is a pure function of data_seed."""
    out = Path(cfg.out_dir) / "assets"
    out.mkdir(parents=True, exist_ok=True)
    preset = get_preset(cfg.preset)

    corpus = generate_pretrain_corpus(cfg.n_pretrain_docs, cfg.data_seed)
    vocab = train_bpe(corpus, vocab_size=preset.model.vocab_size)
    vocab.save(out / "vocab.json")
    packed = pack(vocab, corpus, cfg.pack_seq_len)
    packed.save(out / "pretrain.bin")

    # keep only records whose full training sequence fits the context window
    limit = preset.model.context_window
    from .data import linearize_fields

    d2t = []
    for rec in generate_data2text_records(cfg.n_data2text_records * 2, cfg.data_seed + 1):
        n = len(vocab.encode(linearize_fields(rec["fields"]) + " " + rec["reference"])) + 2
        if n <= limit:
            d2t.append(rec)
        if len(d2t) == cfg.n_data2text_records:
            break
    summ = []
    for rec in generate_summarization_records(
        cfg.n_summarization_records * 3, cfg.data_seed + 2
    ):
        n = len(vocab.encode(rec["document"] + " || " + rec["summary"])) + 2
        if n <= limit:
            summ.append(rec)
        if len(summ) == cfg.n_summarization_records:
            break
    if len(d2t) < 30 or len(summ) < 30:
        raise ConfigError(
            f"context window {limit} fits only {len(d2t)} data-to-text and "
            f"{len(summ)} summarization records; enlarge the context or shrink the tasks"
        )
    (out / "data2text.jsonl").write_text("\n".join(json.dumps(r) for r in d2t))
    (out / "summarization.jsonl").write_text("\n".join(json.dumps(r) for r in summ))
    return {
        "vocab": str(out / "vocab.json"),
        "pretrain": str(out / "pretrain.bin"),
        "data2text": str(out / "data2text.jsonl"),
        "summarization": str(out / "summarization.jsonl"),
        "n_pretrain_tokens": packed.total_tokens,
        "n_data2text_records": len(d2t),
        "n_summarization_records": len(summ),
    }


def _load_records(path: str) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]


# ------------------------------------------------------------------- cells


def run_pretrain_cell(cfg_dict: dict, assets: dict, sparsity: float, seed: int) -> dict:
    """One sparse pre-training run; writes its checkpoint and manifest."""
    cfg = ExperimentConfig(**cfg_dict)
    preset = get_preset(cfg.preset)
    cell_dir = Path(cfg.out_dir) / "cells" / f"pretrain_s{sparsity:g}_seed{seed}"
    dataset = PackedDataset.load(assets["pretrain"])
    plan = TrainPlan(
        phase="pretrain",
        model=preset.model,
        optimizer=OptimizerConfig(peak_lr=preset.peak_lr),
        schedule=ScheduleConfig(
            total_tokens=preset.training_tokens,
            peak_lr=preset.peak_lr,
            warmup_tokens=preset.warmup_tokens,
        ),
        batch_size=preset.batch_size,
        seed=seed,
        token_budget=preset.training_tokens,
        sparsity_level=sparsity if sparsity > 0 else None,
        eval_every=100,
    )
    losses: list[float] = []
    ckpt = pretrain(plan, dataset, out_dir=cell_dir,
                    on_step=lambda s, t, l: losses.append(l))
    write_manifest(cell_dir, {"kind": "pretrain", "sparsity": sparsity, "seed": seed,
                              "preset": cfg.preset})
    measured = mask_stats(ckpt.masks).overall_sparsity if ckpt.masks else 0.0
    return {
        "checkpoint": str(cell_dir / "checkpoints" / "final.ckpt"),
        "final_loss": float(np.mean(losses[-20:])) if losses else None,
        "measured_sparsity": measured,
    }


def run_finetune_cell(
    cfg_dict: dict, assets: dict, task: str, sparsity: float, seed: int,
    ft_mode: str, pretrain_ckpt: str,
) -> dict:
    """Fine-tune + evaluate one cell; ft_mode 'dense' densifies first,
    'sparse' keeps the pre-training masks in place."""
    cfg = ExperimentConfig(**cfg_dict)
    preset = get_preset(cfg.preset)
    vocab = Vocabulary.load(assets["vocab"])
    cell_dir = Path(cfg.out_dir) / "cells" / f"{task}_s{sparsity:g}_seed{seed}_{ft_mode}"

    records = _load_records(assets[task])
    train_recs, val_recs, test_recs = split_records(records)
    if task == "data2text":
        train_ex = make_finetune_examples(train_recs, vocab)
        val_ex = make_finetune_examples(val_recs, vocab)
        test_ex = make_finetune_examples(test_recs, vocab)
        references = [r["reference"] for r in test_recs]
    else:
        train_ex = make_summarization_examples(train_recs, vocab)
        val_ex = make_summarization_examples(val_recs, vocab)
        test_ex = make_summarization_examples(test_recs, vocab)
        references = [r["summary"] for r in test_recs]

    plan = TrainPlan(
        phase="finetune",
        model=preset.model,
        optimizer=OptimizerConfig(peak_lr=cfg.ft_lr),
        schedule=ScheduleConfig(total_tokens=1.0, peak_lr=cfg.ft_lr, warmup_tokens=0.0,
                                final_lr_fraction=0.0, shape="linear"),
        batch_size=cfg.ft_batch_size,
        seed=seed,
        epochs=cfg.ft_epochs,
        densify_on_finetune=(ft_mode == "dense"),
        patience=cfg.ft_patience,
    )
    ckpt = load_checkpoint(pretrain_ckpt)
    result = finetune(plan, ckpt, train_ex, val_ex, out_dir=cell_dir)
    best = result.checkpoint
    model = best.build_model()

    out = {
        "val_loss": result.best_val_loss,
        "best_epoch": result.best_epoch,
        "ppl": evaluate_ppl(model, test_ex, mask_set=best.masks),
    }
    if task == "data2text":
        gen = GenConfig(
            beam_size=cfg.gen_beam_size,
            max_new_tokens=cfg.gen_max_new_tokens,
            no_repeat_ngram=cfg.gen_no_repeat_ngram,
            eot_id=vocab.eot_id,
        )
        report = score_run(model, test_ex, references, vocab, gen, mask_set=best.masks)
        out["bleu"] = report.bleu
        out["bleu_precisions"] = report.precisions
    write_manifest(cell_dir, {"kind": "finetune", "task": task, "sparsity": sparsity,
                              "seed": seed, "ft_mode": ft_mode, "preset": cfg.preset})
    return out


def _run_cell_guarded(kind: str, fn, *args) -> dict:
    try:
        out = fn(*args)
        out["status"] = "ok"
        return out
    except Exception as e:  # a failed cell must not sink the whole suite
        return {"status": "failed", "error": f"{type(e).__name__}: {e}",
                "traceback": traceback.format_exc()}


def _limit_blas_threads():
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(1)
    except Exception:
        pass


# ------------------------------------------------------------------ driver


def run_experiment(cfg: ExperimentConfig) -> dict:
    t0 = time.time()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if len(cfg.seeds) < 3:
        raise ConfigError("experiment needs at least 3 seeds")
    assets = build_assets(cfg)
    cfg_dict = cfg.to_dict()

    # stage 1: pre-training cells
    pre_specs = [(s, seed) for s in cfg.sparsities for seed in cfg.seeds]
    pre_results = _map_cells(
        cfg, [("pretrain", run_pretrain_cell, (cfg_dict, assets, s, seed))
              for s, seed in pre_specs]
    )
    pretrain_cells = {}
    for (s, seed), res in zip(pre_specs, pre_results):
        res.update(sparsity=s, seed=seed)
        pretrain_cells[(s, seed)] = res

    # stage 2: fine-tuning cells
    ft_specs = []
    for s in cfg.sparsities:
        for seed in cfg.seeds:
            pre = pretrain_cells[(s, seed)]
            if pre["status"] != "ok":
                continue
            ckpt = pre["checkpoint"]
            for mode in ("dense", "sparse"):
                ft_specs.append(("data2text", s, seed, mode, ckpt))
            if s in cfg.summarization_sparsities:
                ft_specs.append(("summarization", s, seed, "dense", ckpt))
    ft_results = _map_cells(
        cfg,
        [("finetune", run_finetune_cell, (cfg_dict, assets, task, s, seed, mode, ckpt))
         for task, s, seed, mode, ckpt in ft_specs],
    )
    cells = []
    for (task, s, seed, mode, _), res in zip(ft_specs, ft_results):
        res.update(task=task, sparsity=s, seed=seed, ft_mode=mode)
        cells.append(res)

    report = summarize(cfg, assets, pretrain_cells, cells)
    report["runtime_seconds"] = time.time() - t0
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    (out_dir / "report.txt").write_text(render_report(report))
    write_manifest(out_dir, {"kind": "experiment", **cfg_dict})
    return report


def _map_cells(cfg: ExperimentConfig, jobs_list):
    if cfg.jobs <= 1 or len(jobs_list) <= 1:
        return [_run_cell_guarded(kind, fn, *args) for kind, fn, args in jobs_list]
    with ProcessPoolExecutor(max_workers=cfg.jobs, initializer=_limit_blas_threads) as pool:
        futures = [pool.submit(_run_cell_guarded, kind, fn, *args)
                   for kind, fn, args in jobs_list]
        return [f.result() for f in futures]


# ------------------------------------------------------------------ report


def _median(values):
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


def summarize(cfg: ExperimentConfig, assets: dict, pretrain_cells: dict, cells: list) -> dict:
    def cell_values(task, sparsity, mode, key):
        return [
            c.get(key)
            for c in cells
            if c["task"] == task and c["sparsity"] == sparsity
            and c["ft_mode"] == mode and c["status"] == "ok"
        ]

    medians: dict = {}
    for task in ("data2text", "summarization"):
        medians[task] = {}
        for s in cfg.sparsities:
            entry = {}
            for mode in ("dense", "sparse"):
                vals = {
                    "bleu": _median(cell_values(task, s, mode, "bleu")),
                    "ppl": _median(cell_values(task, s, mode, "ppl")),
                    "val_loss": _median(cell_values(task, s, mode, "val_loss")),
                }
                if any(v is not None for v in vals.values()):
                    entry[mode] = vals
            if entry:
                medians[task][f"{s:g}"] = entry

    # dense-FT minus sparse-FT BLEU gap per sparsity (the fine-tuning-mode
    # comparison; positive = dense fine-tuning wins)
    ft_gaps = {}
    for s in cfg.sparsities:
        dense = _median(cell_values("data2text", s, "dense", "bleu"))
        sparse = _median(cell_values("data2text", s, "sparse", "bleu"))
        if dense is not None and sparse is not None:
            ft_gaps[f"{s:g}"] = dense - sparse

    # sparse pre-training deltas vs the dense baseline, dense fine-tuning
    base_bleu = _median(cell_values("data2text", 0.0, "dense", "bleu"))
    base_ppl = _median(cell_values("summarization", 0.0, "dense", "ppl"))
    baseline_deltas = {}
    for s in cfg.sparsities:
        if s == 0.0:
            continue
        entry = {}
        b = _median(cell_values("data2text", s, "dense", "bleu"))
        if b is not None and base_bleu is not None:
            entry["bleu_delta"] = b - base_bleu
        p = _median(cell_values("summarization", s, "dense", "ppl"))
        if p is not None and base_ppl is not None:
            entry["ppl_delta"] = p - base_ppl
        if entry:
            baseline_deltas[f"{s:g}"] = entry

    # per-seed hypothesis-2 trend: relative degradation at the highest
    # sparsity is larger for summarization (PPL) than for data-to-text (BLEU)
    s_hi = max(cfg.sparsities)
    per_seed = []
    for seed in cfg.seeds:
        def one(task, s, mode, key):
            vals = [
                c.get(key) for c in cells
                if c["task"] == task and c["sparsity"] == s and c["seed"] == seed
                and c["ft_mode"] == mode and c["status"] == "ok"
            ]
            return vals[0] if vals else None

        b0, b1 = one("data2text", 0.0, "dense", "bleu"), one("data2text", s_hi, "dense", "bleu")
        p0, p1 = (one("summarization", 0.0, "dense", "ppl"),
                  one("summarization", s_hi, "dense", "ppl"))
        if None in (b0, b1, p0, p1):
            per_seed.append({"seed": seed, "status": "incomplete"})
            continue
        d2t_rel = (b0 - b1) / b0 if b0 else None
        summ_rel = (p1 - p0) / p0 if p0 else None
        if d2t_rel is None or summ_rel is None:
            per_seed.append({"seed": seed, "status": "degenerate-zero-baseline"})
            continue
        per_seed.append({
            "seed": seed,
            "status": "ok",
            "data2text_rel_degradation": d2t_rel,
            "summarization_rel_degradation": summ_rel,
            "summarization_degrades_more": bool(summ_rel > d2t_rel),
        })
    holds = sum(1 for r in per_seed if r.get("summarization_degrades_more"))

    return {
        "config": cfg.to_dict(),
        "assets": assets,
        "pretrain_cells": [
            {k: v for k, v in res.items() if k != "traceback"}
            for res in pretrain_cells.values()
        ],
        "cells": [{k: v for k, v in c.items() if k != "traceback"} for c in cells],
        "medians": medians,
        "dense_vs_sparse_ft_bleu_gap": ft_gaps,
        "sparse_vs_dense_baseline": baseline_deltas,
        "hypothesis2": {"per_seed": per_seed, "holds_in_seeds": holds,
                        "n_seeds": len(cfg.seeds), "at_sparsity": s_hi},
    }


def render_report(report: dict) -> str:
    lines = ["SPDF experiment report", "=" * 60]
    cfgd = report["config"]
    lines.append(f"preset={cfgd['preset']} seeds={cfgd['seeds']} "
                 f"sparsities={cfgd['sparsities']}")
    lines.append(f"runtime: {report.get('runtime_seconds', 0.0):.0f} s")
    lines.append("")
    lines.append(f"{'task':<14} {'S':>5} {'ft':>7} {'BLEU':>8} {'PPL':>9} {'val':>8}")
    for task, by_s in report["medians"].items():
        for s, by_mode in by_s.items():
            for mode, vals in by_mode.items():
                bleu = f"{vals['bleu']:.2f}" if vals.get("bleu") is not None else "-"
                ppl = f"{vals['ppl']:.2f}" if vals.get("ppl") is not None else "-"
                vl = f"{vals['val_loss']:.3f}" if vals.get("val_loss") is not None else "-"
                lines.append(f"{task:<14} {s:>5} {mode:>7} {bleu:>8} {ppl:>9} {vl:>8}")
    lines.append("")
    lines.append("dense-FT minus sparse-FT BLEU gap (median):")
    for s, gap in report["dense_vs_sparse_ft_bleu_gap"].items():
        lines.append(f"  S={s}: {gap:+.2f}")
    lines.append("sparse pre-training vs dense baseline (dense FT):")
    for s, d in report["sparse_vs_dense_baseline"].items():
        parts = []
        if "bleu_delta" in d:
            parts.append(f"BLEU {d['bleu_delta']:+.2f}")
        if "ppl_delta" in d:
            parts.append(f"PPL {d['ppl_delta']:+.2f}")
        lines.append(f"  S={s}: " + ", ".join(parts))
    h2 = report["hypothesis2"]
    lines.append(
        f"summarization degrades more than data-to-text at S={h2['at_sparsity']}: "
        f"{h2['holds_in_seeds']}/{h2['n_seeds']} seeds"
    )
    failed = [c for c in report["cells"] if c["status"] != "ok"]
    if failed:
        lines.append("")
        lines.append(f"FAILED cells: {len(failed)}")
        for c in failed:
            lines.append(f"  {c.get('task')} S={c.get('sparsity')} seed={c.get('seed')} "
                         f"{c.get('ft_mode')}: {c.get('error')}")
    return "\n".join(lines) + "\n"
