"""Persistent visual-token pruning for a toy masked-diffusion multimodal transformer."""
from .flops import FlopsReport, layer_flops, reconcile, run_flops
from .model import ModelConfig, forward, forward_with_midlayer_prune, init_params
from .numerics import OpCounter, matmul, rms_norm, softmax_rows
from .pruning import KeptSet, PruneSchedule, apply_persistence, saliency_scores, select_kept
from .sampler import GenerationConfig, SamplerTrace, generate, remask_counts
from .sequence import AttentionRecord, SequenceLayout

__version__ = "0.1.0"
