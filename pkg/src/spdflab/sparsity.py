"""Static unstructured sparsity: build, apply, audit and remove weight masks.

Masks are binary, drawn uniformly at random per matrix at a target sparsity,
fixed for the whole pre-training run, and stored packed (one bit per weight)
in checkpoints. Only the per-block linear matrices are maskable; asking for a
mask on embeddings, layernorm parameters or biases is a config error.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .model import GptModel


def round_half_away(x: float) -> int:
    """round() with ties away from zero (Python's round() is banker's)."""
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


@dataclass
class SparsityPlan:
    """Target sparsity per maskable matrix; ``uniform`` means one shared level."""

    sparsities: dict[str, float]
    mode: str = "custom"

    def __post_init__(self):
        for name, s in self.sparsities.items():
            if not (0.0 <= s < 1.0):
                raise ConfigError(f"sparsity for {name} must be in [0, 1), got {s}")
        if self.mode == "uniform" and len(set(self.sparsities.values())) > 1:
            raise ConfigError("uniform plan with unequal per-layer sparsities")

    @classmethod
    def uniform(cls, model: GptModel, level: float) -> "SparsityPlan":
        return cls({name: level for name in model.sparsifiable_names()}, mode="uniform")

    @property
    def level(self) -> float:
        levels = set(self.sparsities.values())
        if len(levels) != 1:
            raise ConfigError("plan has mixed levels; no single level")
        return levels.pop()


@dataclass
class MaskSet:
    """Immutable-by-convention per-matrix binary masks (True = weight kept)."""

    masks: dict[str, np.ndarray]
    seed: int | None = None

    def copy(self) -> "MaskSet":
        return MaskSet({k: v.copy() for k, v in self.masks.items()}, seed=self.seed)

    def all_ones(self) -> bool:
        return all(m.all() for m in self.masks.values())


def build_masks(model: GptModel, plan: SparsityPlan, seed: int) -> MaskSet:
    """Per matrix, zero exactly round(s*N) positions chosen uniformly at
    random without replacement; deterministic for a given seed."""
    sparsifiable = model.sparsifiable_names()
    extra = set(plan.sparsities) - set(sparsifiable)
    if extra:
        raise ConfigError(f"plan names non-sparsifiable tensors: {sorted(extra)}")
    missing = set(sparsifiable) - set(plan.sparsities)
    if missing:
        raise ConfigError(f"plan missing sparsifiable tensors: {sorted(missing)}")
    rng = np.random.default_rng(seed)
    masks = {}
    for name in sparsifiable:  # fixed order => deterministic draws
        w = model.params[name].value
        n = w.size
        n_zero = round_half_away(plan.sparsities[name] * n)
        flat = np.ones(n, dtype=bool)
        if n_zero:
            flat[rng.choice(n, size=n_zero, replace=False)] = False
        masks[name] = flat.reshape(w.shape)
    return MaskSet(masks, seed=seed)


def apply_masks(model: GptModel, mask_set: MaskSet) -> None:
    """Zero the masked weight positions in place (exactly 0.0)."""
    for name, mask in mask_set.masks.items():
        p = model.params[name]
        if mask.shape != p.value.shape:
            raise ShapeError(f"mask shape {mask.shape} != weight shape {p.value.shape} ({name})")
        p.value *= mask


@dataclass
class LayerMaskStats:
    zeros: int
    total: int

    @property
    def sparsity(self) -> float:
        return self.zeros / self.total


@dataclass
class MaskStats:
    per_layer: dict[str, LayerMaskStats]
    zeros: int
    total: int

    @property
    def overall_sparsity(self) -> float:
        return self.zeros / self.total

    def to_dict(self) -> dict:
        return {
            "overall_sparsity": self.overall_sparsity,
            "zeros": self.zeros,
            "total": self.total,
            "per_layer": {
                k: {"zeros": v.zeros, "total": v.total, "sparsity": v.sparsity}
                for k, v in self.per_layer.items()
            },
        }

    def render(self) -> str:
        lines = [f"{'tensor':<16} {'zeros':>10} {'total':>10} {'sparsity':>9}"]
        for name, st in self.per_layer.items():
            lines.append(f"{name:<16} {st.zeros:>10} {st.total:>10} {st.sparsity:>9.4f}")
        lines.append(
            f"{'overall':<16} {self.zeros:>10} {self.total:>10} {self.overall_sparsity:>9.4f}"
        )
        return "\n".join(lines)


def mask_stats(mask_set: MaskSet) -> MaskStats:
    per_layer = {}
    zeros = total = 0
    for name, mask in mask_set.masks.items():
        z = int(mask.size - mask.sum())
        per_layer[name] = LayerMaskStats(zeros=z, total=mask.size)
        zeros += z
        total += mask.size
    return MaskStats(per_layer=per_layer, zeros=zeros, total=total)


def densify(checkpoint):
    """Remove the mask set from a checkpoint, function-preservingly.

    Previously-masked weight slots hold exactly 0.0 and their optimizer
    moments are reset to 0, so the model computes identical logits before and
    after; the freed weights only start moving on the next update.
    Densifying an already-dense checkpoint warns and returns it unchanged.
    """
    if checkpoint.masks is None:
        warnings.warn("densify: checkpoint is already dense; no-op", stacklevel=2)
        return checkpoint
    out = checkpoint.copy()
    for name, mask in checkpoint.masks.masks.items():
        out.params[name] *= mask
        if out.opt_m is not None:
            out.opt_m[name] *= mask
            out.opt_v[name] *= mask
    out.masks = None
    return out
