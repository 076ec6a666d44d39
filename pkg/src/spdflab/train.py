"""Training orchestration: sparse pre-training, dense or sparse fine-tuning,
perplexity evaluation, grid search, checkpointing and metric logging.

Determinism contract: a TrainPlan seed derives independent streams for model
init, mask construction and batch order (SeedSequence spawns), the batch
generator state is stored in every checkpoint, and resuming from a
checkpoint replays the exact trajectory of an uninterrupted run.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .data import PackedDataset, PromptTarget
from .errors import ConfigError, InputError, NonFiniteError, TrainingDiverged
from .model import GptModel, ModelConfig
from .optim import OptimizerConfig, OptState, ScheduleConfig, lr_at, step as opt_step
from .sparsity import SparsityPlan, apply_masks, build_masks, densify


@dataclass
class TrainPlan:
    phase: str  # "pretrain" | "finetune"
    model: ModelConfig
    optimizer: OptimizerConfig
    schedule: ScheduleConfig
    batch_size: int
    seed: int
    token_budget: float = 0.0  # pretrain budget
    epochs: int = 5  # finetune budget
    sparsity_level: float | None = None  # uniform plan; None = dense
    densify_on_finetune: bool = True
    eval_every: int = 50
    patience: int = 1

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.phase == "pretrain" and self.token_budget <= 0:
            raise ConfigError("pretrain plan needs a positive token_budget")
        if self.phase == "finetune" and self.epochs < 1:
            raise ConfigError("finetune plan needs epochs >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def plan_seeds(seed: int) -> dict[str, int]:
    """Independent sub-seeds for the independent random purposes of a run."""
    init_s, mask_s, batch_s, shuffle_s = np.random.SeedSequence(seed).generate_state(4)
    return {
        "init": int(init_s),
        "mask": int(mask_s),
        "batch": int(batch_s),
        "shuffle": int(shuffle_s),
    }


class MetricsLogger:
    """Append-only line-delimited JSON metrics."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def log(self, **record) -> None:
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------- pretrain


def pretrain(
    plan: TrainPlan,
    dataset: PackedDataset,
    out_dir: str | Path | None = None,
    resume_from: Checkpoint | None = None,
    on_step=None,
) -> Checkpoint:
    """Masked causal-LM training until the token budget is reached.

    Samples batch rows i.i.d. from the packed dataset, logs loss/lr/tokens
    per step, checkpoints every ``eval_every`` steps, and keeps masks (and
    their invariants) intact in the returned checkpoint.
    """
    if dataset.n_sequences == 0:
        raise InputError("empty pretraining dataset")
    out_dir = Path(out_dir) if out_dir else None
    log = MetricsLogger(out_dir / "metrics.log" if out_dir else None)
    seeds = plan_seeds(plan.seed)

    if resume_from is not None:
        model = resume_from.build_model()
        masks = resume_from.masks
        state = OptState.from_arrays(
            model, resume_from.opt_m, resume_from.opt_v, resume_from.opt_step
        )
        batch_rng = np.random.default_rng()
        batch_rng.bit_generator.state = resume_from.rng_state
        tokens_seen = resume_from.tokens_seen
        step_no = resume_from.step
    else:
        model = GptModel.init(plan.model, seeds["init"])
        masks = None
        if plan.sparsity_level is not None and plan.sparsity_level > 0:
            masks = build_masks(model, SparsityPlan.uniform(model, plan.sparsity_level),
                                seeds["mask"])
            apply_masks(model, masks)
        state = OptState(model)
        batch_rng = np.random.default_rng(seeds["batch"])
        tokens_seen = 0
        step_no = 0

    tokens_per_step = plan.batch_size * dataset.seq_len
    last_ckpt_path = None

    def snapshot() -> Checkpoint:
        return Checkpoint.from_model(
            model,
            masks=masks,
            opt_state=state,
            tokens_seen=tokens_seen,
            step=step_no,
            rng_state=batch_rng.bit_generator.state,
        )

    while tokens_seen < plan.token_budget:
        rows = batch_rng.integers(0, dataset.n_sequences, size=plan.batch_size)
        batch = dataset.tokens[rows]
        lr = lr_at(plan.schedule, min(tokens_seen + tokens_per_step, plan.token_budget))
        model.zero_grads()
        try:
            loss, _ = model.forward_loss(batch, mask_set=masks)
            model.backward()
            opt_step(model, plan.optimizer, state, lr, masks=masks)
        except NonFiniteError as e:
            raise TrainingDiverged(
                f"non-finite value at step {step_no + 1}: {e}", last_checkpoint=last_ckpt_path
            ) from e
        step_no += 1
        tokens_seen += tokens_per_step
        log.log(step=step_no, tokens=tokens_seen, lr=lr, train_loss=loss)
        if on_step is not None:
            on_step(step_no, tokens_seen, loss)
        if out_dir and plan.eval_every and step_no % plan.eval_every == 0:
            last_ckpt_path = str(save_checkpoint(out_dir / "checkpoints" / "last.ckpt", snapshot()))

    final = snapshot()
    if out_dir:
        save_checkpoint(out_dir / "checkpoints" / "final.ckpt", final)
    return final


# ---------------------------------------------------------------- finetune


def _batch_examples(examples: list[PromptTarget], pad_id: int):
    """Pad a list of PromptTargets to a rectangular (tokens, loss_mask)."""
    seqs = [ex.sequence() for ex in examples]
    masks = [ex.loss_mask() for ex in examples]
    width = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), width), pad_id, dtype=np.int64)
    loss_mask = np.zeros((len(seqs), width - 1), dtype=bool)
    for i, (s, m) in enumerate(zip(seqs, masks)):
        tokens[i, : len(s)] = s
        loss_mask[i, : len(m)] = m
    return tokens, loss_mask


def evaluate_nll(model: GptModel, examples: list[PromptTarget], mask_set=None,
                 batch_size: int = 16) -> float:
    """Mean NLL per target token over a PromptTarget dataset."""
    if not examples:
        raise InputError("empty evaluation dataset")
    pad = examples[0].eot_id
    total, count = 0.0, 0
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo : lo + batch_size]
        tokens, loss_mask = _batch_examples(chunk, pad)
        loss, _ = model.forward_loss(tokens, mask_set=mask_set, loss_mask=loss_mask)
        n = int(loss_mask.sum())
        total += loss * n
        count += n
    return total / count


def evaluate_ppl(model_or_checkpoint, examples: list[PromptTarget], mask_set=None) -> float:
    """exp(mean target-token NLL); always >= 1."""
    if isinstance(model_or_checkpoint, Checkpoint):
        model = model_or_checkpoint.build_model()
        mask_set = model_or_checkpoint.masks if mask_set is None else mask_set
    else:
        model = model_or_checkpoint
    return math.exp(evaluate_nll(model, examples, mask_set=mask_set))


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    history: list[dict]
    best_val_loss: float
    best_epoch: int


def finetune(
    plan: TrainPlan,
    checkpoint: Checkpoint,
    train_examples: list[PromptTarget],
    val_examples: list[PromptTarget],
    out_dir: str | Path | None = None,
    val_loss_fn=None,
) -> FinetuneResult:
    """Fine-tune with loss on target positions only.

    With ``densify_on_finetune`` the checkpoint is densified first (dense
    fine-tuning); otherwise masks stay applied and enforced (sparse
    fine-tuning). Validation runs before training and after every epoch;
    stops early when validation loss has risen for ``patience`` consecutive
    evals and returns the best-validation checkpoint, not the last one.
    """
    if not val_examples and val_loss_fn is None:
        raise ConfigError("finetune needs a validation split")
    if not train_examples:
        raise InputError("empty fine-tuning training split")
    out_dir = Path(out_dir) if out_dir else None
    log = MetricsLogger(out_dir / "metrics.log" if out_dir else None)
    seeds = plan_seeds(plan.seed)

    if plan.densify_on_finetune:
        checkpoint = densify(checkpoint) if checkpoint.masks is not None else checkpoint
    model = checkpoint.build_model()
    masks = checkpoint.masks  # None when densified
    state = OptState(model)
    shuffle_rng = np.random.default_rng(seeds["shuffle"])
    pad = train_examples[0].eot_id if train_examples else val_examples[0].eot_id

    def val_loss() -> float:
        if val_loss_fn is not None:
            return float(val_loss_fn(model, val_examples))
        return evaluate_nll(model, val_examples, mask_set=masks)

    # the schedule stays token-indexed; fine-tuning maps step progress onto
    # the schedule's token axis since epoch token totals are data-dependent
    steps_per_epoch = max(1, math.ceil(len(train_examples) / plan.batch_size))
    history: list[dict] = []
    best = {"val": float("inf"), "epoch": -1, "ckpt": None}
    v0 = val_loss()
    history.append({"epoch": 0, "val_loss": v0, "train_loss": None})
    log.log(step=0, tokens=0, lr=0.0, train_loss=None, val_loss=v0)
    best.update(val=v0, epoch=0, ckpt=Checkpoint.from_model(model, masks=masks, opt_state=state))

    step_no = 0
    tokens_seen = 0
    rising_evals = 0
    for epoch in range(1, plan.epochs + 1):
        order = shuffle_rng.permutation(len(train_examples))
        epoch_losses = []
        for lo in range(0, len(order), plan.batch_size):
            chunk = [train_examples[i] for i in order[lo : lo + plan.batch_size]]
            tokens, loss_mask = _batch_examples(chunk, pad)
            frac = (step_no + 1) / (plan.epochs * steps_per_epoch)
            lr = lr_at(plan.schedule, frac * plan.schedule.total_tokens)
            model.zero_grads()
            loss, _ = model.forward_loss(tokens, mask_set=masks, loss_mask=loss_mask)
            model.backward()
            opt_step(model, plan.optimizer, state, lr, masks=masks)
            step_no += 1
            tokens_seen += int(tokens.size)
            epoch_losses.append(loss)
            log.log(step=step_no, tokens=tokens_seen, lr=lr, train_loss=loss)
        v = val_loss()
        history.append({"epoch": epoch, "val_loss": v, "train_loss": float(np.mean(epoch_losses))})
        log.log(step=step_no, tokens=tokens_seen, lr=lr, train_loss=float(np.mean(epoch_losses)),
                val_loss=v)
        if v < best["val"]:
            best.update(
                val=v, epoch=epoch,
                ckpt=Checkpoint.from_model(model, masks=masks, opt_state=state,
                                           tokens_seen=tokens_seen, step=step_no),
            )
            rising_evals = 0
        else:
            rising_evals += 1
            if rising_evals >= plan.patience:
                break

    result = FinetuneResult(
        checkpoint=best["ckpt"], history=history, best_val_loss=best["val"],
        best_epoch=best["epoch"],
    )
    if out_dir:
        save_checkpoint(out_dir / "checkpoints" / "best.ckpt", best["ckpt"])
        save_checkpoint(
            out_dir / "checkpoints" / "last.ckpt",
            Checkpoint.from_model(model, masks=masks, opt_state=state,
                                  tokens_seen=tokens_seen, step=step_no),
        )
        (out_dir / "history.json").write_text(json.dumps(history, indent=2))
    return result


# ------------------------------------------------------------- grid search


@dataclass
class GridCell:
    lr: float
    batch_size: int
    val_loss: float


def grid_search(
    plan: TrainPlan,
    lr_candidates,
    batch_candidates,
    run_cell=None,
    checkpoint: Checkpoint | None = None,
    train_examples=None,
    val_examples=None,
):
    """Evaluate the full lr x batch cross-product; best cell by validation
    loss, ties toward the smaller learning rate.

    The default evaluator fine-tunes ``checkpoint`` on the given splits and
    scores best validation loss; ``run_cell(plan) -> float`` overrides it
    (tests inject stubs here).
    """
    if not lr_candidates or not batch_candidates:
        raise ConfigError("empty candidate lists")
    if run_cell is None:
        if checkpoint is None or train_examples is None or val_examples is None:
            raise ConfigError(
                "grid_search needs either run_cell or (checkpoint, train_examples, "
                "val_examples)"
            )

        def run_cell(cell_plan):
            return finetune(cell_plan, checkpoint, train_examples, val_examples).best_val_loss

    from dataclasses import replace

    cells: list[GridCell] = []
    for lr in lr_candidates:
        for bs in batch_candidates:
            cell_plan = replace(
                plan,
                batch_size=bs,
                optimizer=replace(plan.optimizer, peak_lr=lr),
                schedule=replace(plan.schedule, peak_lr=lr),
            )
            cells.append(GridCell(lr=lr, batch_size=bs, val_loss=float(run_cell(cell_plan))))
    best = min(cells, key=lambda c: (c.val_loss, c.lr))
    best_plan = replace(
        plan,
        batch_size=best.batch_size,
        optimizer=replace(plan.optimizer, peak_lr=best.lr),
        schedule=replace(plan.schedule, peak_lr=best.lr),
    )
    return best_plan, cells
