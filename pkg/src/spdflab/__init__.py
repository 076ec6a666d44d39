"""Desk-scale lab for sparse pre-training and dense fine-tuning of small GPT
models, plus an analytic training-FLOP accountant."""

__version__ = "0.1.0"

from .model import GenConfig, GptModel, ModelConfig, count_params, count_sparsifiable_params
from .sparsity import MaskSet, SparsityPlan, apply_masks, build_masks, densify, mask_stats
from .flops import FlopQuery, chinchilla_tokens, combined_pipeline_flops, flops_per_sequence
from .optim import OptimizerConfig, ScheduleConfig, lr_at
from .data import Vocabulary, pack, train_bpe
from .bleu import corpus_bleu
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .train import TrainPlan, evaluate_ppl, finetune, grid_search, pretrain
