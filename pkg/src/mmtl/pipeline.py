"""Experiment suites shared by the command line and the acceptance tests."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import attribution as at
from .editing import EditCase, apply_edit, fix_suite, layer_sweep, longtail_suite, summarize_results
from .model import ModelConfig, MultiModalLM, PromptSpec
from .tracing import CorruptionSpec, TraceError, TraceGrid, build_corrupted, run_trace, summarize
from .training import TrainConfig, TrainResult, default_model_config, train
from .world import Fact, World, gen_world, make_prompt

STRATEGY_FLAGS = {"replace": "token_replace", "gaussian": "gaussian_embed"}


def world_from_config(cfg) -> World:
    w = cfg.world
    return gen_world(w.n_entities, w.n_relations, cfg.seed, n_years=w.n_years,
                     longtail_fraction=w.longtail_fraction, eval_fraction=w.eval_fraction,
                     patch_grid=w.patch_grid, patch_dim=w.patch_dim, image_mode=w.image_mode,
                     sigma_img=w.sigma_img)


def model_config_from(cfg, world: World) -> ModelConfig:
    m = cfg.model
    return default_model_config(world, n_layers=m.n_layers, n_heads=m.n_heads, d_model=m.d_model,
                                d_mlp=m.d_mlp, d_vision=m.d_vision, seed=cfg.seed)


def train_config_from(cfg) -> TrainConfig:
    t = cfg.train
    return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, warmup_steps=t.warmup_steps,
                       weight_decay=t.weight_decay, target_accuracy=t.target_accuracy,
                       eval_every=t.eval_every, seed=cfg.seed)


def train_from_config(cfg, world: World) -> TrainResult:
    return train(MultiModalLM(model_config_from(cfg, world)), world, train_config_from(cfg))


# -- tracing -----------------------------------------------------------------

def trace_facts(world: World, n: int, seed: int = 0) -> list[Fact]:
    """Trained single facts (evaluation subset first) for tracing."""
    pool = world.split("eval") + [f for f in world.single_facts("train") if f not in world.split("eval")]
    pool = [f for f in pool if not f.multi]
    return pool[:n]


def trace_prompt(world: World, fact: Fact) -> PromptSpec:
    tmpl = world.templates_for(fact.relation)[0]
    return make_prompt(world, fact, tmpl, 3_000_000 + fact.fact_id)


@dataclass
class TraceRun:
    facts: list[Fact]
    grids: list[TraceGrid]

    @property
    def effective(self) -> list[bool]:
        """Corruption pushed P(answer) below a fifth of the clean value."""
        return [g.p_corr < 0.2 * g.p_clean for g in self.grids]

    @property
    def recovered(self) -> list[bool]:
        return [g.max_iee >= 0.5 * (g.p_clean - g.p_corr) for g in self.grids]


def trace_suite(model: MultiModalLM, world: World, facts: Sequence[Fact], site: str = "mlp",
                window: int = 3, corruption: str = "replace", noise_scale: float = 3.0,
                seed: int = 0) -> TraceRun:
    spec = CorruptionSpec(STRATEGY_FLAGS[corruption], "visual_constraint", noise_scale=noise_scale, seed=seed)
    grids = []
    for f in facts:
        prompt = trace_prompt(world, f)
        grids.append(run_trace(model, prompt, build_corrupted(prompt, spec, world, model), site, window))
    return TraceRun(list(facts), grids)


def trace_metrics(run: TraceRun) -> dict:
    eff = run.effective
    rec = [r for r, e in zip(run.recovered, eff) if e]
    summary = summarize(run.grids)
    early, late = summary.thirds("constraint")
    return {"n_facts": len(run.grids), "effective_fraction": float(np.mean(eff)),
            "recovered_fraction": float(np.mean(rec)) if rec else 0.0,
            "early_third_constraint": early, "late_third_constraint": late,
            "mean_max_iee": float(np.mean([g.max_iee for g in run.grids])),
            "summary": summary.to_dict()}


# -- attention flow -----------------------------------------------------------

def visual_profiles(model: MultiModalLM, world: World, facts: Sequence[Fact]) -> np.ndarray:
    """Stack of ``(N, L)`` visual-to-constraint profiles for image prompts."""
    return np.stack([at.visual_to_constraint_profile(model, trace_prompt(world, f)) for f in facts])


def signature_mass(model: MultiModalLM, world: World, facts: Sequence[Fact], layer: int = 0) -> float:
    mean = visual_profiles(model, world, facts).mean(axis=0)
    return at.position_mass(mean, world.signature_positions, layer)


# -- detector ----------------------------------------------------------------

@dataclass
class DetectionSet:
    prompts: list[PromptSpec]
    profiles: np.ndarray
    confidence: np.ndarray
    correct: np.ndarray
    validation: np.ndarray = field(repr=False)


def detection_set(model: MultiModalLM, world: World, sigma_levels: Sequence[float] = (0.05, 0.5, 1.0),
                  validation_fraction: float = 0.5, seed: int = 0) -> DetectionSet:
    """Labelled prompts mixing trained facts at several image-noise levels
    with never-trained facts; label = greedy answer is correct."""
    prompts = []
    for s_i, sigma in enumerate(sigma_levels):
        for f in world.split("eval"):
            tmpl = world.templates_for(f.relation)[f.fact_id % len(world.templates_for(f.relation))]
            prompts.append(make_prompt(world, f, tmpl, 4_000_000 + 1000 * s_i + f.fact_id, sigma_img=sigma))
    for f in world.split("longtail"):
        for t_i, tmpl in enumerate(world.templates_for(f.relation)):
            prompts.append(make_prompt(world, f, tmpl, 4_500_000 + 10 * f.fact_id + t_i))
    max_new = max(len(p.answer_tokens) for p in prompts) + 1
    outs = model.batch_generate(prompts, max_new=max_new, eos_id=world.eos_id)
    correct = np.array([list(o) == list(p.answer_tokens) for o, p in zip(outs, prompts)])
    profiles = np.stack([at.constraint_to_last_profile(model, p) for p in prompts])
    conf = np.array([at.confidence_baseline(model, p) for p in prompts])
    rng = np.random.default_rng([seed, 23])
    validation = np.zeros(len(prompts), dtype=bool)
    for label in (False, True):
        idx = np.flatnonzero(correct == label)
        idx = idx[rng.permutation(len(idx))]
        validation[idx[:int(round(validation_fraction * len(idx)))]] = True
    return DetectionSet(prompts, profiles, conf, correct, validation)


def detector_metrics(ds: DetectionSet) -> tuple[at.DetectorModel, dict]:
    val, test = ds.validation, ~ds.validation
    det = at.fit_detector(ds.profiles[val], ds.correct[val])
    held = at.auroc(det.score(ds.profiles[test]), ds.correct[test])
    conf = at.auroc(ds.confidence[test], ds.correct[test])
    return det, {"detector_auroc": held, "confidence_auroc": conf, "validation_auroc": det.validation_auroc,
                 "layers": list(det.layers), "threshold": det.threshold,
                 "n_validation": int(val.sum()), "n_heldout": int(test.sum()),
                 "heldout_accuracy": float(ds.correct[test].mean())}


# -- editing -----------------------------------------------------------------

def edit_suites(world: World, cfg_edit, seed: int = 0) -> tuple[list[EditCase], list[EditCase]]:
    kw = dict(layer=cfg_edit.layer, lam=cfg_edit.lam, lr=cfg_edit.lr, max_steps=cfg_edit.max_steps,
              stop_loss=cfg_edit.stop_loss, n_unrelated=cfg_edit.n_unrelated, seed=seed)
    return fix_suite(world, cfg_edit.n_fix, **kw), longtail_suite(world, **kw)


def run_cases(model: MultiModalLM, cases: Sequence[EditCase]):
    return [apply_edit(model, c.request, c.paraphrases, c.unrelated)[1] for c in cases]


def sweep_table(model: MultiModalLM, cases: Sequence[EditCase], layers: Sequence[int]) -> dict[int, float]:
    return layer_sweep(model, cases, layers)


def thirds(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    k = max(1, len(v) // 3)
    return float(v[:k].mean()), float(v[len(v) - k:].mean())


__all__ = ["world_from_config", "train_from_config", "trace_suite", "trace_metrics", "signature_mass",
           "detection_set", "detector_metrics", "edit_suites", "run_cases", "sweep_table", "thirds",
           "summarize_results", "TraceError"]
