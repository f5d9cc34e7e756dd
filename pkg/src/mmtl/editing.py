"""Closed-form rank-one editing of an MLP output projection (MultEdit).

An MLP's second matrix is treated as a linear key-value memory.  The key
is the post-GELU activation at the constraint token; the value is found by
gradient descent on the target answer's NLL with the MLP output patched;
the projection is then updated in closed form so the key maps to the new
value while staying near the old weights.

Weights are stored ``(d_mlp, d_model)`` (row-vector convention).  The
closed form works on the column-vector matrix ``W = W_proj.T``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import numerics as nx
from .model import MultiModalLM, PromptSpec
from .training import eval_vqa_accuracy
from .validation import check_layer, check_positive
from .world import Fact, World, make_prompt, paraphrases


class EditError(RuntimeError):
    pass


@dataclass(frozen=True)
class EditRequest:
    prompt: PromptSpec
    target: tuple[int, ...]
    layer: int = 1
    position: int | None = None
    lam: float = 0.01
    lr: float = 0.1
    max_steps: int = 100
    stop_loss: float = 0.05
    key_prompts: tuple[PromptSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "target", tuple(int(t) for t in self.target))
        if not self.target:
            raise ValueError("target answer must be non-empty")
        check_positive("lam", self.lam)
        check_positive("lr", self.lr)
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.position is not None and not 0 <= self.position < self.prompt.seq_len:
            raise ValueError(f"position {self.position} out of range")

    @property
    def c(self) -> int:
        return self.prompt.constraint_position if self.position is None else self.position

    def to_dict(self) -> dict:
        return {"fact_id": self.prompt.metadata.get("fact_id"), "question": list(self.prompt.question_tokens),
                "target": list(self.target), "layer": self.layer, "position": self.c, "lambda": self.lam,
                "lr": self.lr, "max_steps": self.max_steps, "stop_loss": self.stop_loss,
                "n_key_prompts": len(self.key_prompts)}


@dataclass
class EditResult:
    efficacy: float
    pre_efficacy: float
    generalization: float | None = None
    pre_generalization: float | None = None
    specificity: float | None = None
    pre_specificity: float | None = None
    weight_change: float = 0.0
    value_loss: float = float("nan")
    value_steps: int = 0
    method: str = "multedit"

    @property
    def specificity_drop(self) -> float | None:
        if self.specificity is None or self.pre_specificity is None:
            return None
        return self.pre_specificity - self.specificity


def edit_report(request: EditRequest, result: EditResult) -> str:
    body = {"request": request.to_dict(), "metrics": asdict(result),
            "specificity_drop": result.specificity_drop}
    return json.dumps(body, indent=1, sort_keys=True)


# -- key / value -----------------------------------------------------------

def extract_key(model: MultiModalLM, prompt: PromptSpec, layer: int, position: int) -> np.ndarray:
    """Post-GELU MLP activation at ``(position, layer)``: the input of
    that layer's output projection."""
    check_layer(layer, model.config.n_layers)
    if not 0 <= position < prompt.seq_len:
        raise ValueError(f"position {position} out of range")
    _, cache = model.forward(prompt, cache=True)
    return cache.mlp_proj_in[layer, position].copy()


def _key(model: MultiModalLM, request: EditRequest) -> np.ndarray:
    keys = [extract_key(model, p, request.layer, request.c)
            for p in (request.prompt,) + tuple(request.key_prompts)]
    return np.mean(keys, axis=0)


def _state_before(model: MultiModalLM, prompt: PromptSpec, extra: Sequence[int], layer: int) -> np.ndarray:
    """Residual stream entering block ``layer`` (teacher-forced on ``extra``)."""
    with nx.no_grad():
        x, _ = model.embed_batch([prompt], [tuple(extra)])
        if layer == 0:
            return x.data
        record: dict = {}
        model.run(x, record=record)
        return record["hidden_out"][layer - 1]


def _target_nll(model: MultiModalLM, start: np.ndarray, prompt: PromptSpec, layer: int, position: int,
                value: nx.Tensor, target: Sequence[int]) -> nx.Tensor:
    t = start.shape[1]
    mask = np.zeros((1, t), dtype=bool)
    mask[0, position] = True
    hidden = model.run(nx.Tensor(start), start_layer=layer,
                       patches={("mlp_out", layer): [(mask, value, None)]})
    first = prompt.seq_len - 1
    logits = model.unembed(hidden[(np.zeros(len(target), dtype=int), np.arange(first, first + len(target)))])
    return nx.cross_entropy(logits, list(target))


def optimize_value(model: MultiModalLM, request: EditRequest) -> tuple[np.ndarray, float, int]:
    """Adam on the MLP output at ``(c, layer)`` minimizing the summed NLL of
    the target answer.  Returns ``(z, final_loss, steps)`` where ``z``
    excludes the projection bias."""
    layer, c = check_layer(request.layer, model.config.n_layers), request.c
    target = request.target
    _, cache = model.forward(request.prompt, cache=True)
    bias = model.layer_param(layer, "mlp.b_proj").data
    start = _state_before(model, request.prompt, target[:-1], layer)
    for p in model.parameters():
        if p.requires_grad:
            raise EditError("model parameters must be frozen during value optimization")
    value = nx.Tensor(cache.mlp_out[layer, c].copy(), requires_grad=True)
    opt = nx.Adam([value], lr=request.lr)
    steps, loss_val = 0, float("nan")
    while True:
        value.grad = None
        loss = _target_nll(model, start, request.prompt, layer, c, value, target)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise nx.NumericalError("non-finite loss during value optimization")
        if loss_val < request.stop_loss or steps >= request.max_steps:
            break
        nx.backward(loss)
        opt.step()
        steps += 1
    return value.data - bias, loss_val, steps


def value_loss_and_grad(model: MultiModalLM, request: EditRequest, z: np.ndarray) -> tuple[float, np.ndarray]:
    """Target NLL and its gradient with respect to ``z`` (bias excluded)."""
    layer, c = request.layer, request.c
    bias = model.layer_param(layer, "mlp.b_proj").data
    start = _state_before(model, request.prompt, request.target[:-1], layer)
    value = nx.Tensor(np.asarray(z, dtype=np.float64) + bias, requires_grad=True)
    loss = _target_nll(model, start, request.prompt, layer, c, value, request.target)
    nx.backward(loss)
    return loss.item(), value.grad.copy()


def closed_form_update(w: np.ndarray, k: np.ndarray, z: np.ndarray, lam: float) -> np.ndarray:
    """``argmin_W ||W k - z||^2 + lam ||W - w||_F^2`` for ``w`` of shape
    ``(d, d_mlp)``: ``(lam w + z k^T)(lam I + k k^T)^{-1}``."""
    w = np.asarray(w, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64).reshape(-1)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if w.ndim != 2 or w.shape != (z.shape[0], k.shape[0]):
        raise ValueError(f"shape mismatch: W {w.shape}, k {k.shape}, z {z.shape}")
    inv = nx.solve_regularized_rank1(lam, k)
    if not k.any():
        return w.copy()
    return (lam * w + np.outer(z, k)) @ inv


def stationarity_residual(w_new, w_old, k, z, lam) -> np.ndarray:
    """Gradient of the editing objective at ``w_new`` (zero at the optimum)."""
    return 2 * np.outer(w_new @ k - z, k) + 2 * lam * (w_new - w_old)


# -- applying and measuring ------------------------------------------------

def _check_request(model: MultiModalLM, request: EditRequest) -> None:
    check_layer(request.layer, model.config.n_layers)


def evaluate_edit(model: MultiModalLM, request: EditRequest, paraphrase_prompts: Sequence[PromptSpec],
                  unrelated: Sequence[PromptSpec], reference: MultiModalLM | None = None,
                  method: str = "multedit") -> EditResult:
    """Efficacy, generalization and specificity of ``model`` for a request.

    ``reference`` (the unedited model) supplies the pre-edit numbers; when
    omitted, ``model`` is its own reference.
    """
    if not paraphrase_prompts or not unrelated:
        raise ValueError("paraphrase and unrelated sets must be non-empty")
    ref = model if reference is None else reference
    target = request.target
    eff = model.answer_prob(request.prompt, target)
    gen = float(np.mean([model.answer_prob(p, target) for p in paraphrase_prompts]))
    spec = eval_vqa_accuracy(model, unrelated)
    if ref is model:
        pre_eff, pre_gen, pre_spec = eff, gen, spec
    else:
        pre_eff = ref.answer_prob(request.prompt, target)
        pre_gen = float(np.mean([ref.answer_prob(p, target) for p in paraphrase_prompts]))
        pre_spec = eval_vqa_accuracy(ref, unrelated)
    return EditResult(efficacy=eff, pre_efficacy=pre_eff, generalization=gen, pre_generalization=pre_gen,
                      specificity=spec, pre_specificity=pre_spec,
                      weight_change=weight_change(ref, model), method=method)


def weight_change(a: MultiModalLM, b: MultiModalLM) -> float:
    return float(math.sqrt(sum(float(((a.params[n].data - b.params[n].data) ** 2).sum())
                               for n in a.param_names())))


def apply_edit(model: MultiModalLM, request: EditRequest,
               paraphrase_prompts: Sequence[PromptSpec] | None = None,
               unrelated: Sequence[PromptSpec] | None = None) -> tuple[MultiModalLM, EditResult]:
    """Edit a clone of ``model``; the original is left untouched.

    Without evaluation sets only efficacy is measured.
    """
    _check_request(model, request)
    k = _key(model, request)
    z, loss, steps = optimize_value(model, request)
    edited = model.clone()
    name = f"blocks.{request.layer}.mlp.W_proj"
    w_old = model.params[name].data.T
    edited.params[name] = nx.Tensor(np.ascontiguousarray(closed_form_update(w_old, k, z, request.lam).T))
    if paraphrase_prompts is not None and unrelated is not None:
        result = evaluate_edit(edited, request, paraphrase_prompts, unrelated, reference=model)
    else:
        result = EditResult(efficacy=edited.answer_prob(request.prompt, request.target),
                            pre_efficacy=model.answer_prob(request.prompt, request.target),
                            weight_change=weight_change(model, edited))
    result.value_loss, result.value_steps = loss, steps
    return edited, result


def baseline_finetune(model: MultiModalLM, request: EditRequest, constrained: bool = False,
                      delta: float = 1e-3, lr: float = 1e-3, max_steps: int = 100,
                      stop_prob: float = 0.9) -> MultiModalLM:
    """Fine-tune all weights of a clone on the target answer.

    Constrained mode clamps every weight to an L-infinity ball of radius
    ``delta`` around its pre-edit value after each step.
    """
    _check_request(model, request)
    if delta < 0:
        raise ValueError("delta must be >= 0")
    tuned = model.clone()
    params = tuned.parameters()
    origin = [p.data.copy() for p in params]
    tuned.requires_grad_(True)
    opt = nx.Adam(params, lr=lr)
    target = list(request.target)
    first = request.prompt.seq_len - 1
    try:
        for _ in range(max_steps):
            opt.zero_grad()
            x, _ = tuned.embed_batch([request.prompt], [tuple(target[:-1])])
            hidden = tuned.run(x)
            rows = (np.zeros(len(target), dtype=int), np.arange(first, first + len(target)))
            loss = nx.cross_entropy(tuned.unembed(hidden[rows]), target)
            if not math.isfinite(loss.item()):
                raise nx.NumericalError("fine-tuning diverged")
            if math.exp(-loss.item()) > stop_prob:
                break
            nx.backward(loss)
            opt.step()
            if constrained:
                for p, o in zip(params, origin):
                    np.clip(p.data, o - delta, o + delta, out=p.data)
    finally:
        tuned.requires_grad_(False)
    return tuned


# -- request suites --------------------------------------------------------

@dataclass
class EditCase:
    request: EditRequest
    paraphrases: list[PromptSpec]
    unrelated: list[PromptSpec]
    kind: str = "fix"
    fact_id: int = -1


def _template(world: World, fact: Fact, index: int = 0):
    tmpls = world.templates_for(fact.relation)
    return tmpls[index % len(tmpls)]


def _unrelated_prompts(world: World, fact: Fact, n: int, rng: np.random.Generator) -> list[PromptSpec]:
    pool = [f for f in world.single_facts("train") if f.entity != fact.entity]
    idx = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
    return [make_prompt(world, pool[i], _template(world, pool[i], int(i)), 9_000_000 + pool[i].fact_id)
            for i in sorted(idx)]


def _generalization_prompts(world: World, prompt: PromptSpec, fact: Fact, n_samples: int) -> list[PromptSpec]:
    out = paraphrases(world, prompt)
    tmpl = world.templates[prompt.metadata["template_id"]]
    out += [make_prompt(world, fact, tmpl, 8_000_000 + 97 * fact.fact_id + s) for s in range(n_samples)]
    return out


def build_case(world: World, fact: Fact, target_attribute: str, kind: str, *, layer: int = 1,
               n_unrelated: int = 40, n_samples: int = 2, seed: int = 0, **request_kw) -> EditCase:
    rng = np.random.default_rng([seed, fact.fact_id])
    prompt = make_prompt(world, fact, _template(world, fact, fact.fact_id), 5_000_000 + fact.fact_id)
    req = EditRequest(prompt=prompt, target=tuple(world.encode([target_attribute])), layer=layer, **request_kw)
    return EditCase(req, _generalization_prompts(world, prompt, fact, n_samples),
                    _unrelated_prompts(world, fact, n_unrelated, rng), kind, fact.fact_id)


def fix_suite(world: World, n: int = 50, *, layer: int = 1, seed: int = 0, **kw) -> list[EditCase]:
    """Counterfactual edits: trained single facts moved to another valid
    attribute of the same relation."""
    rng = np.random.default_rng([seed, 17])
    facts = world.single_facts("train")
    picks = rng.choice(len(facts), size=min(n, len(facts)), replace=False)
    cases = []
    for i in sorted(picks):
        f = facts[i]
        options = [a for a in world.relations[f.relation]["attributes"] if a != f.attribute]
        cases.append(build_case(world, f, options[int(rng.integers(len(options)))], "fix",
                                layer=layer, seed=seed, **kw))
    return cases


def longtail_suite(world: World, *, layer: int = 1, seed: int = 0, **kw) -> list[EditCase]:
    """Insert the held-out (never trained) facts."""
    return [build_case(world, f, f.attribute, "longtail", layer=layer, seed=seed, **kw)
            for f in world.split("longtail")]


def run_case(model: MultiModalLM, case: EditCase, layer: int | None = None) -> EditResult:
    req = case.request if layer is None else replace(case.request, layer=layer)
    return apply_edit(model, req, case.paraphrases, case.unrelated)[1]


def layer_sweep(model: MultiModalLM, cases: Sequence[EditCase], layers: Sequence[int]) -> dict[int, float]:
    """Mean post-edit efficacy for each layer."""
    if not cases:
        raise ValueError("no edit cases")
    for l in layers:
        check_layer(l, model.config.n_layers)
    table = {}
    for l in layers:
        effs = []
        for case in cases:
            req = replace(case.request, layer=int(l))
            effs.append(apply_edit(model, req)[1].efficacy)
        table[int(l)] = float(np.mean(effs))
    return table


@dataclass
class SuiteSummary:
    efficacy: float
    pre_efficacy: float
    generalization: float
    specificity_drop: float
    n: int
    results: list[EditResult] = field(default_factory=list, repr=False)


def summarize_results(results: Sequence[EditResult]) -> SuiteSummary:
    return SuiteSummary(
        efficacy=float(np.mean([r.efficacy for r in results])),
        pre_efficacy=float(np.mean([r.pre_efficacy for r in results])),
        generalization=float(np.mean([r.generalization for r in results])),
        specificity_drop=float(np.mean([r.specificity_drop for r in results])),
        n=len(results), results=list(results))


class MultEdit(BaseEstimator):
    """Estimator facade: ``fit(model)`` binds the base model, ``edit``
    returns an edited clone with its metrics."""

    def __init__(self, layer=1, lam=0.01, lr=0.1, max_steps=100, stop_loss=0.05):
        self.layer = layer
        self.lam = lam
        self.lr = lr
        self.max_steps = max_steps
        self.stop_loss = stop_loss

    def fit(self, model: MultiModalLM, y=None):
        check_layer(self.layer, model.config.n_layers)
        self.model_ = model
        return self

    def request(self, prompt: PromptSpec, target: Sequence[int]) -> EditRequest:
        return EditRequest(prompt, tuple(target), layer=self.layer, lam=self.lam, lr=self.lr,
                           max_steps=self.max_steps, stop_loss=self.stop_loss)

    def edit(self, prompt: PromptSpec, target: Sequence[int], paraphrase_prompts=None, unrelated=None):
        if not hasattr(self, "model_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("MultEdit is not fitted")
        return apply_edit(self.model_, self.request(prompt, target), paraphrase_prompts, unrelated)
