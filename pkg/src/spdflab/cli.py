"""Command-line front end.

Subcommands: pretrain, finetune, eval, flops, mask-stats, experiment,
tokenize. Every run writes a manifest (config hash, seed, versions) next to
its outputs. Exit codes: 0 ok, 1 runtime failure, 2 usage/config errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bleu import score_run
from .checkpoint import load_checkpoint
from .config import build_plan, load_run_config, write_manifest
from .data import (
    PackedDataset,
    Vocabulary,
    make_finetune_examples,
    make_summarization_examples,
    pack,
    train_bpe,
)
from .errors import ConfigError, InputError
from .experiment import ExperimentConfig, run_experiment
from .flops import FlopQuery, combined_pipeline_flops, total_training_flops
from .model import GenConfig, ModelConfig
from .presets import PRESETS, get_preset
from .sparsity import mask_stats
from .synthetic import split_records
from .train import finetune, pretrain


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spdflab",
                                description="sparse pre-training / dense fine-tuning lab")
    sub = p.add_subparsers(dest="command", required=True)

    pre = sub.add_parser("pretrain", help="sparse or dense pre-training run")
    pre.add_argument("--config", required=True, help="run config JSON")
    pre.add_argument("--out", required=True, help="output directory")
    pre.add_argument("--resume", help="checkpoint to resume from")
    pre.add_argument("--i-know-this-is-huge", action="store_true",
                     help="allow training a paper-scale preset")

    ft = sub.add_parser("finetune", help="fine-tune a checkpoint on a task dataset")
    ft.add_argument("--config", required=True)
    ft.add_argument("--checkpoint", required=True)
    ft.add_argument("--task", required=True, help="task records (JSONL)")
    ft.add_argument("--task-kind", choices=["data2text", "summarization"],
                    default="data2text")
    ft.add_argument("--vocab", required=True)
    ft.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="score a checkpoint on a task test set")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--task", required=True)
    ev.add_argument("--task-kind", choices=["data2text", "summarization"],
                    default="data2text")
    ev.add_argument("--vocab", required=True)
    ev.add_argument("--beam-size", type=int, default=10)
    ev.add_argument("--length-penalty", type=float, default=0.9)
    ev.add_argument("--no-repeat-ngram", type=int, default=4)
    ev.add_argument("--max-new-tokens", type=int, default=72)
    ev.add_argument("--json", action="store_true")

    fl = sub.add_parser("flops", help="analytic training-FLOP accounting")
    fl.add_argument("--model", required=True,
                    help="preset name or model-config JSON file")
    fl.add_argument("--sparsity", type=float, default=0.0)
    fl.add_argument("--seq-len", type=int, default=None)
    fl.add_argument("--sequences", type=float, default=1.0)
    fl.add_argument("--finetune-seq-len", type=int, default=None)
    fl.add_argument("--finetune-sequences", type=float, default=None)
    fl.add_argument("--json", action="store_true")

    ms = sub.add_parser("mask-stats", help="sparsity audit of a checkpoint")
    ms.add_argument("--checkpoint", required=True)
    ms.add_argument("--json", action="store_true")

    ex = sub.add_parser("experiment", help="run the SPDF comparison suite")
    ex.add_argument("--out", required=True)
    ex.add_argument("--preset", default="toy-small")
    ex.add_argument("--sparsities", default="0,0.5,0.75",
                    help="comma-separated sparsity levels")
    ex.add_argument("--seeds", type=int, default=5, help="number of seeds")
    ex.add_argument("--jobs", type=int, default=1)
    ex.add_argument("--ft-epochs", type=int, default=None)
    ex.add_argument("--beam-size", type=int, default=None)

    tk = sub.add_parser("tokenize", help="train a BPE vocab and pack a corpus")
    tk.add_argument("--corpus", required=True, help="directory of .txt files")
    tk.add_argument("--vocab-size", type=int, default=512)
    tk.add_argument("--seq-len", type=int, default=128)
    tk.add_argument("--out", required=True, help="packed dataset output path")
    tk.add_argument("--vocab-out", required=True, help="vocabulary JSON output path")
    return p


def _load_model_config(spec: str) -> ModelConfig:
    if spec in PRESETS:
        return get_preset(spec).model
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"--model {spec!r} is neither a preset nor a file")
    return ModelConfig.from_dict(json.loads(path.read_text()))


def _flops_text(report, label: str) -> str:
    d = report.to_dict()
    lines = [
        f"{label}:",
        f"  sparsity            {d['sparsity']:.0%}",
        f"  sequences           {d['n_sequences']:.3g}",
        f"  FLOPs/seq           {d['flops_per_seq']:.3e}",
        f"    linear            {d['components']['linear']:.3e}",
        f"    attention         {d['components']['attention']:.3e}",
        f"    vocab             {d['components']['vocab']:.3e}",
        f"  total FLOPs         {d['total_flops']:.3e}",
        f"  total exaFLOPs      {d['total_exaflops']:.4g}",
        f"  reduction vs dense  {d['reduction_ratio']:.3f}x",
    ]
    return "\n".join(lines)


def cmd_flops(args) -> int:
    model = _load_model_config(args.model)
    seq_len = args.seq_len or model.context_window
    q = FlopQuery(model, args.sparsity, seq_len, args.sequences)
    if args.finetune_sequences is not None:
        ft_len = args.finetune_seq_len or seq_len
        ft_q = FlopQuery(model, 0.0, ft_len, args.finetune_sequences)
        rep = combined_pipeline_flops(q, ft_q)
        if args.json:
            print(json.dumps(rep.to_dict(), indent=2))
        else:
            print(_flops_text(rep.pretrain, "pre-training"))
            print(_flops_text(rep.finetune, "fine-tuning"))
            print(f"pipeline total      {rep.total_flops:.3e} "
                  f"({rep.total_flops / 1e18:.4g} exaFLOPs)")
            print(f"dense baseline      {rep.baseline_flops:.3e}")
            print(f"speedup             {rep.speedup:.2f}x")
    else:
        rep = total_training_flops(q)
        if args.json:
            print(json.dumps(rep.to_dict(), indent=2))
        else:
            print(_flops_text(rep, f"model {args.model}"))
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    preset_name = cfg.get("preset")
    if preset_name and get_preset(preset_name).paper_scale and not args.i_know_this_is_huge:
        print(
            f"preset {preset_name!r} is paper-scale; pass --i-know-this-is-huge "
            "to train it anyway (the flops subcommand is the intended use)",
            file=sys.stderr,
        )
        return 2
    plan = build_plan(cfg)
    paths = cfg.get("paths", {})
    dataset_path = paths.get("dataset")
    if not dataset_path:
        raise ConfigError("config paths.dataset is required for pretrain")
    dataset = PackedDataset.load(dataset_path)
    resume = load_checkpoint(args.resume) if args.resume else None
    write_manifest(args.out, cfg, argv=sys.argv[1:])
    ckpt = pretrain(plan, dataset, out_dir=args.out, resume_from=resume)
    print(f"done: {ckpt.step} steps, {ckpt.tokens_seen:.3g} tokens seen")
    print(f"final checkpoint: {Path(args.out) / 'checkpoints' / 'final.ckpt'}")
    return 0


def _load_task_examples(path: str, kind: str, vocab: Vocabulary):
    records = [json.loads(line) for line in Path(path).read_text().splitlines() if line]
    train_recs, val_recs, test_recs = split_records(records)
    make = make_finetune_examples if kind == "data2text" else make_summarization_examples
    refs = [r["reference" if kind == "data2text" else "summary"] for r in test_recs]
    return make(train_recs, vocab), make(val_recs, vocab), make(test_recs, vocab), refs


def cmd_finetune(args) -> int:
    cfg = load_run_config(args.config)
    if "train" not in cfg:
        cfg["train"] = {}
    cfg["train"].setdefault("phase", "finetune")
    plan = build_plan(cfg)
    if plan.phase != "finetune":
        raise ConfigError("finetune command needs a config with train.phase=finetune")
    vocab = Vocabulary.load(args.vocab)
    ckpt = load_checkpoint(args.checkpoint)
    train_ex, val_ex, _, _ = _load_task_examples(args.task, args.task_kind, vocab)
    write_manifest(args.out, cfg, argv=sys.argv[1:])
    result = finetune(plan, ckpt, train_ex, val_ex, out_dir=args.out)
    print(f"best validation loss {result.best_val_loss:.4f} at epoch {result.best_epoch}")
    print(f"best checkpoint: {Path(args.out) / 'checkpoints' / 'best.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    _, _, test_ex, refs = _load_task_examples(args.task, args.task_kind, vocab)
    gen = GenConfig(
        beam_size=args.beam_size,
        length_penalty=args.length_penalty,
        no_repeat_ngram=args.no_repeat_ngram,
        max_new_tokens=args.max_new_tokens,
        eot_id=vocab.eot_id,
    )
    report = score_run(model, test_ex, refs, vocab, gen, mask_set=ckpt.masks)
    print(json.dumps(report.to_dict(), indent=2) if args.json else report.render())
    return 0


def cmd_mask_stats(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.masks is None:
        payload = {"dense": True, "overall_sparsity": 0.0}
        print(json.dumps(payload, indent=2) if args.json else "checkpoint is dense (no masks)")
        return 0
    stats = mask_stats(ckpt.masks)
    print(json.dumps(stats.to_dict(), indent=2) if args.json else stats.render())
    return 0


def cmd_experiment(args) -> int:
    sparsities = tuple(float(s) for s in args.sparsities.split(","))
    kwargs = dict(
        out_dir=args.out,
        preset=args.preset,
        sparsities=sparsities,
        seeds=tuple(range(args.seeds)),
        jobs=args.jobs,
    )
    if args.ft_epochs is not None:
        kwargs["ft_epochs"] = args.ft_epochs
    if args.beam_size is not None:
        kwargs["gen_beam_size"] = args.beam_size
    cfg = ExperimentConfig(**kwargs)
    report = run_experiment(cfg)
    print((Path(args.out) / "report.txt").read_text())
    failed = [c for c in report["cells"] if c["status"] != "ok"]
    return 1 if failed else 0


def cmd_tokenize(args) -> int:
    corpus_dir = Path(args.corpus)
    if not corpus_dir.is_dir():
        raise ConfigError(f"corpus directory not found: {corpus_dir}")
    docs = [f.read_text() for f in sorted(corpus_dir.glob("*.txt"))]
    if not docs:
        raise InputError(f"no .txt files under {corpus_dir}")
    vocab = train_bpe(docs, vocab_size=args.vocab_size)
    vocab.save(args.vocab_out)
    ds = pack(vocab, docs, args.seq_len)
    ds.save(args.out)
    print(f"vocab size {vocab.size} ({len(vocab.merges)} merges) -> {args.vocab_out}")
    print(f"packed {ds.n_sequences} sequences of {args.seq_len} tokens -> {args.out}")
    return 0


COMMANDS = {
    "flops": cmd_flops,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "mask-stats": cmd_mask_stats,
    "experiment": cmd_experiment,
    "tokenize": cmd_tokenize,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
