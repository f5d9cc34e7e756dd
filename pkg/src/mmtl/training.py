"""Next-token training of the toy model on a fact world."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import numerics as nx
from .model import ModelConfig, MultiModalLM, PromptSpec
from .world import Fact, World, make_prompt

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 40
    min_lr_ratio: float = 0.1
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    target_accuracy: float = 0.95
    eval_every: int = 5
    name_form: bool = True

    def __post_init__(self):
        if not 0 < self.target_accuracy <= 1:
            raise ValueError("target_accuracy must be in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class TrainResult:
    model: MultiModalLM
    losses: list[float] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    accuracy: float = float("nan")

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "eval_accuracy", "eval_name_accuracy"])
        acc = {h["epoch"]: h for h in self.history}
        for i, loss in enumerate(self.losses, start=1):
            h = acc.get(i, {})
            w.writerow([i, repr(loss), repr(h.get("accuracy", "")) if h else "",
                        repr(h.get("name_accuracy", "")) if h else ""])
        return buf.getvalue()


def default_model_config(world: World, text_only: bool = False, **overrides) -> ModelConfig:
    cfg = dict(vocab_size=world.vocab_size, patch_grid=0 if text_only else world.patch_grid,
               patch_dim=world.patch_dim)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def epoch_prompts(world: World, epoch: int, seed: int, text_only: bool = False,
                  name_form: bool = True) -> list[PromptSpec]:
    """Training prompts for one epoch: every trained fact once per form with
    a random template and a fresh image-noise sample."""
    rng = np.random.default_rng([seed, epoch])
    out: list[PromptSpec] = []
    n_ent = len(world.entities)
    for f in world.split("train"):
        tmpls = world.templates_for(f.relation)
        sample = 1_000_000 + epoch * 10_000 + f.fact_id
        if text_only:
            out.append(make_prompt(world, f, tmpls[rng.integers(len(tmpls))], sample, form="text"))
            continue
        out.append(make_prompt(world, f, tmpls[rng.integers(len(tmpls))], sample, form="image"))
        if name_form:
            out.append(make_prompt(world, f, tmpls[rng.integers(len(tmpls))], sample, form="name",
                                   image_entity=int(rng.integers(n_ent))))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def eval_prompts(world: World, facts: Sequence[Fact], form: str = "image", sample_base: int = 0,
                 all_templates: bool = True, sigma_img: float | None = None) -> list[PromptSpec]:
    out = []
    for f in facts:
        tmpls = world.templates_for(f.relation)
        if not all_templates:
            tmpls = tmpls[:1]
        for t in tmpls:
            image_entity = (f.entity + 1) % len(world.entities) if form == "name" else None
            out.append(make_prompt(world, f, t, sample_base + f.fact_id, form=form,
                                   image_entity=image_entity, sigma_img=sigma_img))
    return out


def batch_loss(model: MultiModalLM, prompts: Sequence[PromptSpec], eos_id: int) -> nx.Tensor:
    """Mean teacher-forced NLL over answer tokens and the trailing EOS."""
    extra = [p.answer_tokens for p in prompts]
    x, _ = model.embed_batch(prompts, extra)
    hidden = model.run(x)
    rows, cols, targets = [], [], []
    for b, p in enumerate(prompts):
        start = p.seq_len - 1
        tgt = list(p.answer_tokens) + [eos_id]
        for i, t in enumerate(tgt):
            rows.append(b)
            cols.append(start + i)
            targets.append(t)
    picked = hidden[(np.array(rows), np.array(cols))]
    logits = model.unembed(picked)
    return nx.cross_entropy(logits, targets) * (1.0 / len(targets))


def _lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / max(1, total - cfg.warmup_steps)
    frac = min(1.0, frac)
    return cfg.lr * (cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


def _clip(params, max_norm: float) -> None:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * s


def eval_vqa_accuracy(model: MultiModalLM, prompts: Sequence[PromptSpec], eos_id: int = 1) -> float:
    """Exact-match rate of greedy decodes against gold answers."""
    if not prompts:
        raise ValueError("empty prompt set")
    max_new = max(len(p.answer_tokens) for p in prompts) + 1
    outs = model.batch_generate(prompts, max_new=max_new, eos_id=eos_id)
    hits = [list(o) == list(p.answer_tokens) for o, p in zip(outs, prompts)]
    return float(np.mean(hits))


def train(model: MultiModalLM, world: World, config: TrainConfig = TrainConfig(),
          text_only: bool = False) -> TrainResult:
    """Minimize answer-token NLL; stop early once eval accuracy hits target."""
    if not world.splits.get("train"):
        raise ValueError("world has no training facts")
    result = TrainResult(model=model)
    if config.epochs == 0:
        return result
    params = model.parameters()
    model.requires_grad_(True)
    opt = nx.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    n_items = len(epoch_prompts(world, 0, config.seed, text_only, config.name_form))
    steps_per_epoch = math.ceil(n_items / config.batch_size)
    total = steps_per_epoch * config.epochs
    step = 0
    eos = world.eos_id
    form = "text" if text_only else "image"
    eval_facts = world.split("eval")
    for epoch in range(1, config.epochs + 1):
        prompts = epoch_prompts(world, epoch, config.seed, text_only, config.name_form)
        losses = []
        for i in range(0, len(prompts), config.batch_size):
            batch = prompts[i:i + config.batch_size]
            opt.state.lr = _lr_at(step, total, config)
            opt.zero_grad()
            loss = batch_loss(model, batch, eos)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            nx.backward(loss)
            _clip(params, config.grad_clip)
            opt.step()
            losses.append(loss.item() * len(batch))
            step += 1
        result.losses.append(float(sum(losses) / len(prompts)))
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            acc = eval_vqa_accuracy(model, eval_prompts(world, eval_facts, form, 7_000_000), eos)
            rec = {"epoch": epoch, "accuracy": acc}
            if not text_only and config.name_form:
                rec["name_accuracy"] = eval_vqa_accuracy(
                    model, eval_prompts(world, eval_facts, "name", 7_000_000), eos)
            result.history.append(rec)
            result.accuracy = acc
            log.info("epoch %d loss %.4f acc %.3f", epoch, result.losses[-1], acc)
            if acc >= config.target_accuracy and rec.get("name_accuracy", 1.0) >= config.target_accuracy:
                break
    model.requires_grad_(False)
    return result


def train_text_twin(world: World, config: TrainConfig = TrainConfig(), **model_overrides) -> TrainResult:
    """Same architecture without visual tokens, trained on name-form questions."""
    model = MultiModalLM(default_model_config(world, text_only=True, **model_overrides))
    return train(model, world, config, text_only=True)


class FactLM(BaseEstimator):
    """Estimator wrapper: ``fit(world)`` trains, ``predict`` decodes greedily."""

    def __init__(self, n_layers=8, n_heads=4, d_model=64, d_mlp=256, d_vision=64, epochs=150,
                 batch_size=16, lr=1e-3, target_accuracy=0.95, text_only=False, seed=0):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_model = d_model
        self.d_mlp = d_mlp
        self.d_vision = d_vision
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.target_accuracy = target_accuracy
        self.text_only = text_only
        self.seed = seed

    def fit(self, world: World, y=None):
        cfg = default_model_config(world, text_only=self.text_only, n_layers=self.n_layers,
                                   n_heads=self.n_heads, d_model=self.d_model, d_mlp=self.d_mlp,
                                   d_vision=self.d_vision, seed=self.seed)
        tcfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           target_accuracy=self.target_accuracy, seed=self.seed)
        res = train(MultiModalLM(cfg), world, tcfg, text_only=self.text_only)
        self.model_ = res.model
        self.losses_ = res.losses
        self.eos_id_ = world.eos_id
        return self

    def predict(self, prompts: Sequence[PromptSpec]) -> list[list[int]]:
        if not hasattr(self, "model_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("FactLM is not fitted")
        max_new = max(len(p.answer_tokens) for p in prompts) + 1
        return self.model_.batch_generate(prompts, max_new=max_new, eos_id=self.eos_id_)

    def score(self, prompts: Sequence[PromptSpec], y=None) -> float:
        if not hasattr(self, "model_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("FactLM is not fitted")
        return eval_vqa_accuracy(self.model_, prompts, self.eos_id_)
