"""Named model/training presets.

``gpt2-small`` and ``gpt3-xl`` mirror the published architecture/learning
table field for field and exist for FLOP accounting; training them is
guarded. The toy presets are sized so the whole experiment suite finishes in
well under two hours on a desktop CPU.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .model import ModelConfig


@dataclass
class Preset:
    name: str
    model: ModelConfig
    batch_size: int
    peak_lr: float
    training_tokens: float
    warmup_tokens: float
    paper_scale: bool = False
    nominal_params: float | None = None
    description: str = ""


PRESETS: dict[str, Preset] = {
    "gpt2-small": Preset(
        name="gpt2-small",
        model=ModelConfig(n_layers=12, d_model=768, n_heads=12, d_head=64,
                          vocab_size=50257, context_window=2048),
        batch_size=256,
        peak_lr=6e-4,
        training_tokens=2.5e9,
        warmup_tokens=3.75e8,
        paper_scale=True,
        nominal_params=125e6,
        description="125M-parameter reference config (FLOP accounting only)",
    ),
    "gpt3-xl": Preset(
        name="gpt3-xl",
        model=ModelConfig(n_layers=24, d_model=2048, n_heads=16, d_head=128,
                          vocab_size=50257, context_window=2048),
        batch_size=512,
        peak_lr=2e-4,
        training_tokens=26e9,
        warmup_tokens=3.75e8,
        paper_scale=True,
        nominal_params=1.3e9,
        description="1.3B-parameter reference config (FLOP accounting only)",
    ),
    "toy-small": Preset(
        name="toy-small",
        model=ModelConfig(n_layers=4, d_model=128, n_heads=4, d_head=32,
                          vocab_size=512, context_window=256),
        batch_size=16,
        peak_lr=1e-3,
        training_tokens=7.5e5,
        warmup_tokens=3.75e4,
        description="desk-scale model for the experiment suite",
    ),
    "toy-large": Preset(
        name="toy-large",
        model=ModelConfig(n_layers=6, d_model=256, n_heads=8, d_head=32,
                          vocab_size=512, context_window=256),
        batch_size=16,
        peak_lr=6e-4,
        training_tokens=1.5e6,
        warmup_tokens=7.5e4,
        description="larger desk-scale model for size-trend comparisons",
    ),
}


def get_preset(name: str) -> Preset:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    return PRESETS[name]
