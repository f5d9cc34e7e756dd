"""Desk-scale lab for locating, tracing and editing facts in a toy
multimodal transformer."""

from .attribution import FailureDetector, auroc, constraint_to_last_profile, visual_to_constraint_profile
from .checkpoint import load_checkpoint, save_checkpoint
from .editing import EditRequest, EditResult, MultEdit, apply_edit, closed_form_update
from .model import ActivationCache, Intervention, ModelConfig, MultiModalLM, PromptSpec
from .tracing import CausalTracer, CorruptionSpec, TraceGrid, build_corrupted, run_trace
from .training import FactLM, TrainConfig, train
from .world import World, gen_world, make_prompt

__version__ = "0.1.0"

__all__ = [
    "ActivationCache", "CausalTracer", "CorruptionSpec", "EditRequest", "EditResult", "FactLM",
    "FailureDetector", "Intervention", "ModelConfig", "MultEdit", "MultiModalLM", "PromptSpec",
    "TraceGrid", "TrainConfig", "World", "apply_edit", "auroc", "build_corrupted",
    "closed_form_update", "constraint_to_last_profile", "gen_world", "load_checkpoint",
    "make_prompt", "run_trace", "save_checkpoint", "train", "visual_to_constraint_profile",
]
