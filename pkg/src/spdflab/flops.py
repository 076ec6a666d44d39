"""Analytic forward+backward training-FLOP model.

Counting rules: 2 FLOPs per multiply-accumulate, backward pass costs twice
the forward pass (so everything is 3x forward). Three components per
sequence of length T:

    linear    = 3 * 2*T * 12*L*d^2 * (1 - S)   the six maskable matrices
    attention = 3 * 4*L * T^2 * d              scores and weighted values
    vocab     = 3 * 2*T * d * V                the logit projection, counted
                                               once (tied embeddings)

Embedding lookups, layernorms, biases and softmaxes are counted as zero.
Only the linear term scales with sparsity.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .model import ModelConfig


@dataclass
class FlopQuery:
    model: ModelConfig
    sparsity: float = 0.0
    seq_len: int = 2048
    n_sequences: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.sparsity < 1.0):
            raise ConfigError(f"sparsity must be in [0, 1), got {self.sparsity}")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be >= 1")
        if self.n_sequences < 0:
            raise ConfigError("n_sequences must be >= 0")


@dataclass
class FlopReport:
    flops_per_seq: float
    total_flops: float
    components: dict[str, float]  # per-sequence linear/attention/vocab split
    reduction_ratio: float  # vs dense (S=0) at the same config
    sparsity: float
    seq_len: int
    n_sequences: float

    def to_dict(self) -> dict:
        return {
            "flops_per_seq": self.flops_per_seq,
            "total_flops": self.total_flops,
            "total_exaflops": self.total_flops / 1e18,
            "components": dict(self.components),
            "reduction_ratio": self.reduction_ratio,
            "sparsity": self.sparsity,
            "seq_len": self.seq_len,
            "n_sequences": self.n_sequences,
        }


def _components(cfg: ModelConfig, sparsity: float, t: int) -> dict[str, float]:
    l, d, v = cfg.n_layers, cfg.d_model, cfg.vocab_size
    return {
        "linear": 3.0 * 2.0 * t * (12.0 * l * d * d) * (1.0 - sparsity),
        "attention": 3.0 * 4.0 * l * float(t) ** 2 * d,
        "vocab": 3.0 * 2.0 * t * d * v,
    }


def flops_per_sequence(q: FlopQuery) -> FlopReport:
    comps = _components(q.model, q.sparsity, q.seq_len)
    per_seq = sum(comps.values())
    dense = sum(_components(q.model, 0.0, q.seq_len).values())
    return FlopReport(
        flops_per_seq=per_seq,
        total_flops=per_seq * q.n_sequences,
        components=comps,
        reduction_ratio=per_seq / dense,
        sparsity=q.sparsity,
        seq_len=q.seq_len,
        n_sequences=q.n_sequences,
    )


def total_training_flops(q: FlopQuery) -> FlopReport:
    return flops_per_sequence(q)


@dataclass
class PipelineReport:
    """Sparse pre-train + dense fine-tune versus the dense+dense baseline."""

    pretrain: FlopReport
    finetune: FlopReport
    total_flops: float
    baseline_flops: float
    speedup: float

    def to_dict(self) -> dict:
        return {
            "pretrain": self.pretrain.to_dict(),
            "finetune": self.finetune.to_dict(),
            "total_flops": self.total_flops,
            "total_exaflops": self.total_flops / 1e18,
            "baseline_flops": self.baseline_flops,
            "baseline_exaflops": self.baseline_flops / 1e18,
            "speedup": self.speedup,
        }


def combined_pipeline_flops(pretrain_q: FlopQuery, finetune_q: FlopQuery) -> PipelineReport:
    """End-to-end FLOPs for sparse pre-training followed by dense fine-tuning,
    and the speedup over training both phases dense."""
    if finetune_q.sparsity != 0.0:
        raise ConfigError("fine-tuning is dense: finetune query must have sparsity 0")
    pre = total_training_flops(pretrain_q)
    ft = total_training_flops(finetune_q)
    dense_pre = total_training_flops(
        FlopQuery(pretrain_q.model, 0.0, pretrain_q.seq_len, pretrain_q.n_sequences)
    )
    total = pre.total_flops + ft.total_flops
    baseline = dense_pre.total_flops + ft.total_flops
    return PipelineReport(
        pretrain=pre,
        finetune=ft,
        total_flops=total,
        baseline_flops=baseline,
        speedup=baseline / total if total > 0 else float("inf"),
    )


def chinchilla_tokens(n_params: float) -> float:
    """Compute-optimal pre-training budget: 20 tokens per parameter."""
    if n_params <= 0:
        raise ConfigError("n_params must be positive")
    return 20.0 * n_params
