"""Multi-modal causal tracing.

A clean run is compared with a corrupted one (constraint tokens swapped for
a distractor, or Gaussian noise on the visual and constraint embeddings).
Block outputs from the clean run are then copied into the corrupted run,
one position and one window of layers at a time, and the recovered
probability of the clean answer is recorded.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import numerics as nx
from .model import Intervention, MultiModalLM, PromptSpec
from .world import NAME_ARTICLE, World

SITE_KEYS = {"mlp": "mlp_out", "attn": "attn_out", "hidden": "hidden"}
STRATEGIES = ("token_replace", "gaussian_embed")


class TraceError(ValueError):
    pass


class MarginError(TraceError):
    """Clean and corrupted probabilities are too close to trace."""


@dataclass(frozen=True)
class CorruptionSpec:
    strategy: str = "token_replace"
    target: str = "visual_constraint"
    replacement: tuple[int, ...] | None = None
    noise_std: float | None = None
    noise_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise TraceError(f"unknown corruption strategy {self.strategy!r}")
        if self.target not in ("visual_constraint", "text_constraint"):
            raise TraceError(f"unknown corruption target {self.target!r}")


@dataclass
class Corruption:
    """A corrupted prompt plus any embedding interventions it needs."""

    prompt: PromptSpec
    interventions: tuple[Intervention, ...] = ()
    spec: CorruptionSpec = field(default_factory=CorruptionSpec)
    distractor_answer: tuple[int, ...] | None = None

    @classmethod
    def identity(cls, prompt: PromptSpec) -> "Corruption":
        return cls(prompt=prompt, spec=CorruptionSpec(replacement=()))


def embedding_noise_std(model: MultiModalLM, scale: float = 3.0) -> float:
    """``scale`` times the empirical std of the token embedding table."""
    return float(scale * model.params["tok_emb"].data.std())


def build_corrupted(prompt: PromptSpec, spec: CorruptionSpec, world: World | None = None,
                    model: MultiModalLM | None = None) -> Corruption:
    """Corrupt ``prompt`` outside-in: nothing outside the target span changes."""
    if spec.target == "visual_constraint":
        span = prompt.visual_constraint_span
    else:
        span = prompt.text_constraint_span
    if span is None:
        raise TraceError(f"prompt has no {spec.target.replace('_', ' ')} span")

    if spec.strategy == "gaussian_embed":
        std = spec.noise_std
        if std is None:
            if model is None:
                raise TraceError("gaussian corruption needs noise_std or a model")
            std = embedding_noise_std(model, spec.noise_scale)
        positions = list(range(prompt.n_visual)) + [prompt.n_visual + i for i in range(*span)]
        iv = Intervention.noise("embedding", positions, std, seed=spec.seed)
        return Corruption(prompt=prompt, interventions=(iv,), spec=spec)

    tokens = list(prompt.question_tokens)
    distractor_answer = None
    if spec.replacement is not None and len(spec.replacement) > 0:
        repl = list(spec.replacement)
    elif spec.replacement is not None:
        return Corruption.identity(prompt)
    else:
        if world is None:
            raise TraceError("choosing a distractor needs the world")
        repl, distractor_answer = _pick_replacement(prompt, spec, world)
    if len(repl) != span[1] - span[0]:
        raise TraceError("replacement must preserve sequence length")
    tokens[span[0]:span[1]] = repl
    meta = dict(prompt.metadata)
    meta["corruption"] = {"strategy": spec.strategy, "target": spec.target, "replacement": repl}
    corrupted = prompt.replace(question_tokens=tuple(tokens), metadata=meta)
    return Corruption(prompt=corrupted, spec=spec, distractor_answer=distractor_answer)


def _pick_replacement(prompt: PromptSpec, spec: CorruptionSpec, world: World):
    meta = prompt.metadata
    fact = world.facts[meta["fact_id"]]
    rng = np.random.default_rng([spec.seed, fact.fact_id, meta.get("sample_seed", 0)])
    replace_year = (spec.target == "text_constraint" and meta.get("text_constraint_kind") == "year")
    if replace_year:
        years = world.other_years(fact)
        if not years:
            raise TraceError(f"no alternative year for fact {fact.fact_id}")
        year = years[int(rng.integers(len(years)))]
        other = world.fact(fact.entity, fact.relation, year)
        return world.encode([year]), tuple(world.encode([other.attribute]))
    candidates = world.distractors(fact)
    if not candidates:
        raise TraceError(f"no valid distractor for fact {fact.fact_id}")
    e = candidates[int(rng.integers(len(candidates)))]
    other = world.fact(e, fact.relation, fact.year)
    return world.encode([NAME_ARTICLE, world.entities[e]]), tuple(world.encode([other.attribute]))


@dataclass
class TraceGrid:
    """Indirect estimation effects, rows = positions, columns = layers."""

    site: str
    window: int
    iee: np.ndarray
    p_clean: float
    p_corr: float
    metadata: dict = field(default_factory=dict)

    @property
    def p_restored(self) -> np.ndarray:
        return self.iee + self.p_corr

    @property
    def max_iee(self) -> float:
        return float(self.iee.max())

    def argmax(self) -> tuple[int, int]:
        k, l = np.unravel_index(int(np.argmax(self.iee)), self.iee.shape)
        return int(k), int(l)

    def header(self) -> dict:
        return {"site": self.site, "window": self.window, "p_clean": self.p_clean,
                "p_corr": self.p_corr, "shape": list(self.iee.shape),
                "window_policy": "truncated at top layer", "metadata": _jsonable(self.metadata)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["position"] + [f"layer{l}" for l in range(self.iee.shape[1])])
        for k, row in enumerate(self.iee):
            w.writerow([k] + [repr(float(v)) for v in row])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.header(), indent=1, sort_keys=True)

    @classmethod
    def from_files(cls, header_text: str, csv_text: str) -> "TraceGrid":
        head = json.loads(header_text)
        rows = list(csv.reader(io.StringIO(csv_text)))[1:]
        iee = np.array([[float(v) for v in r[1:]] for r in rows])
        return cls(head["site"], head["window"], iee, head["p_clean"], head["p_corr"],
                   head.get("metadata", {}))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# -- runs -------------------------------------------------------------------

def _answer_probs(model: MultiModalLM, hidden: nx.Tensor, start: int, answer: Sequence[int]
                  ) -> np.ndarray:
    logits = model.unembed(hidden[:, start:start + len(answer)]).data
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return np.exp(logp[:, np.arange(len(answer)), list(answer)].sum(axis=-1))


class _Runs:
    """Clean and corrupted recorded runs of one prompt pair."""

    def __init__(self, model: MultiModalLM, prompt: PromptSpec, corrupted: Corruption):
        if corrupted.prompt.seq_len != prompt.seq_len:
            raise TraceError("corrupted prompt changes the sequence length")
        self.model = model
        self.answer = list(prompt.answer_tokens)
        if not self.answer:
            raise TraceError("prompt has no answer tokens")
        extra = [self.answer[:-1]]
        self.start = prompt.seq_len - 1
        with nx.no_grad():
            x, lengths = model.embed_batch([prompt], extra)
            self.clean = {}
            h = model.run(x, record=self.clean)
            self.p_clean = float(_answer_probs(model, h, self.start, self.answer)[0])
            xc, _ = model.embed_batch([corrupted.prompt], extra)
            self.seq_len = int(lengths[0])
            patches = model.interventions_to_patches(corrupted.interventions, self.seq_len)
            self.corr = {}
            h = model.run(xc, patches=patches, record=self.corr)
            self.p_corr = float(_answer_probs(model, h, self.start, self.answer)[0])

    def clean_site(self, key: str, layer: int) -> np.ndarray:
        return self.clean["hidden_out" if key == "hidden" else key][layer][0]

    def restore(self, key: str, layers: Sequence[int], position_sets: Sequence[Sequence[int]]
                ) -> np.ndarray:
        """P(O) for each row, restoring ``key`` at ``layers`` and the row's positions."""
        m = self.model
        first = min(layers)
        b = len(position_sets)
        src = self.corr["embedding"] if first == 0 else self.corr["hidden_out"][first - 1]
        x = nx.Tensor(np.repeat(src, b, axis=0))
        mask = np.zeros((b, self.seq_len), dtype=bool)
        for r, pos in enumerate(position_sets):
            mask[r, list(pos)] = True
        patches = {(key, l): [(mask, self.clean_site(key, l)[None], None)] for l in layers}
        with nx.no_grad():
            h = m.run(x, start_layer=first, patches=patches)
        return _answer_probs(m, h, self.start, self.answer)


def run_trace(model: MultiModalLM, prompt: PromptSpec, corrupted: Corruption, site: str = "mlp",
              window: int = 1, positions: Sequence[int] | None = None) -> TraceGrid:
    """Restoration sweep over every (position, layer) cell.

    The window starting at layer ``l`` covers ``[l, min(l + window, L))``.
    """
    if site not in SITE_KEYS:
        raise TraceError(f"unknown site {site!r}")
    L = model.config.n_layers
    if not 1 <= window <= L:
        raise TraceError(f"window must be in [1, {L}]")
    runs = _Runs(model, prompt, corrupted)
    key = SITE_KEYS[site]
    n_pos = prompt.seq_len
    rows = list(range(n_pos)) if positions is None else list(positions)
    iee = np.zeros((n_pos, L))
    for l in range(L):
        layers = list(range(l, min(l + window, L)))
        probs = runs.restore(key, layers, [[k] for k in rows])
        iee[rows, l] = probs - runs.p_corr
    meta = dict(_jsonable(prompt.metadata))
    meta.update({
        "n_visual": prompt.n_visual, "constraint_position": _safe_constraint(prompt),
        "last_position": prompt.last_position, "strategy": corrupted.spec.strategy,
        "target": corrupted.spec.target,
        "p_full_restore": full_restore_prob(model, prompt, corrupted, runs=runs),
    })
    if prompt.text_constraint_span is not None:
        meta["text_constraint_position"] = prompt.text_constraint_position
    return TraceGrid(site, window, iee, runs.p_clean, runs.p_corr, meta)


def trace_joint(model: MultiModalLM, prompt: PromptSpec, corrupted: Corruption, positions: Sequence[int],
                site: str = "mlp", window: int = 1) -> np.ndarray:
    """Diagnostic: IEE per window start when all ``positions`` are restored together."""
    if site not in SITE_KEYS:
        raise TraceError(f"unknown site {site!r}")
    L = model.config.n_layers
    if not 1 <= window <= L:
        raise TraceError(f"window must be in [1, {L}]")
    if not positions or not all(0 <= k < prompt.seq_len for k in positions):
        raise TraceError("positions must be a non-empty subset of the prompt")
    runs = _Runs(model, prompt, corrupted)
    return np.array([runs.restore(SITE_KEYS[site], list(range(l, min(l + window, L))), [list(positions)])[0]
                     - runs.p_corr for l in range(L)])


def _safe_constraint(prompt: PromptSpec) -> int | None:
    try:
        return prompt.constraint_position
    except ValueError:
        return None


def full_restore_prob(model: MultiModalLM, prompt: PromptSpec, corrupted: Corruption,
                      site: str = "hidden", runs: _Runs | None = None) -> float:
    """Diagnostic: restore ``site`` at every layer and every question position."""
    runs = runs or _Runs(model, prompt, corrupted)
    L = model.config.n_layers
    probs = runs.restore(SITE_KEYS[site], list(range(L)), [list(range(prompt.seq_len))])
    return float(probs[0])


def full_restore_logits(model: MultiModalLM, prompt: PromptSpec, corrupted: Corruption
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Clean logits and logits of the corrupted run with every hidden state
    restored; these are bitwise equal."""
    clean_logits, cache = model.forward(prompt, cache=True)
    L = model.config.n_layers
    iv = list(corrupted.interventions) + [
        Intervention.restore("hidden", range(L), range(prompt.seq_len), cache)]
    restored, _ = model.forward(corrupted.prompt, iv)
    return clean_logits, restored


def min_causal_window(model: MultiModalLM, prompt: PromptSpec, corrupted: Corruption,
                      site: str = "mlp", theta: float = 0.5, margin: float = 0.1) -> int | None:
    """Smallest window whose best cell recovers ``theta`` of the clean-corrupt gap."""
    runs = _Runs(model, prompt, corrupted)
    gap = runs.p_clean - runs.p_corr
    if gap <= margin:
        raise MarginError(f"P_clean - P_corr = {gap:.4f} does not exceed margin {margin}")
    for w in range(1, model.config.n_layers + 1):
        grid = run_trace(model, prompt, corrupted, site, w)
        if grid.max_iee >= theta * gap:
            return w
    return None


def trace_multiconstraint(model: MultiModalLM, prompt: PromptSpec, window: int, world: World,
                          site: str = "mlp", seed: int = 0) -> TraceGrid:
    """Trace with the text constraint (the year) swapped for another year."""
    if prompt.text_constraint_span is None:
        raise TraceError("prompt has no text constraint")
    corrupted = build_corrupted(prompt, CorruptionSpec("token_replace", "text_constraint", seed=seed),
                                world)
    return run_trace(model, prompt, corrupted, site, window)


# -- aggregation ------------------------------------------------------------

@dataclass
class TraceSummary:
    site: str
    window: int
    n_grids: int
    constraint: np.ndarray
    last: np.ndarray
    last_visual: np.ndarray | None

    def argmax_layers(self) -> dict:
        out = {"constraint": int(np.argmax(self.constraint)), "last": int(np.argmax(self.last))}
        if self.last_visual is not None:
            out["last_visual"] = int(np.argmax(self.last_visual))
        return out

    def thirds(self, row: str = "constraint") -> tuple[float, float]:
        """Mean of ``row`` over the first and last third of the layers."""
        vals = getattr(self, row)
        n = len(vals)
        k = max(1, n // 3)
        return float(vals[:k].mean()), float(vals[n - k:].mean())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "constraint", "last", "last_visual"])
        for l in range(len(self.constraint)):
            lv = "" if self.last_visual is None else repr(float(self.last_visual[l]))
            w.writerow([l, repr(float(self.constraint[l])), repr(float(self.last[l])), lv])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"site": self.site, "window": self.window, "n_grids": self.n_grids,
                "constraint": self.constraint.tolist(), "last": self.last.tolist(),
                "last_visual": None if self.last_visual is None else self.last_visual.tolist(),
                "argmax_layers": self.argmax_layers()}


def summarize(grids: Sequence[TraceGrid]) -> TraceSummary:
    """Per-layer mean IEE at the constraint, last and last-visual positions."""
    if not grids:
        raise TraceError("no grids to summarize")
    sites = {(g.site, g.window) for g in grids}
    if len(sites) != 1:
        raise TraceError("grids must share site and window")
    site, window = sites.pop()
    cons = np.mean([g.iee[g.metadata["constraint_position"]] for g in grids], axis=0)
    last = np.mean([g.iee[g.metadata["last_position"]] for g in grids], axis=0)
    if all(g.metadata.get("n_visual", 0) > 0 for g in grids):
        lv = np.mean([g.iee[g.metadata["n_visual"] - 1] for g in grids], axis=0)
    else:
        lv = None
    return TraceSummary(site, window, len(grids), cons, last, lv)


class CausalTracer(BaseEstimator):
    """Estimator-style front end: ``fit(model, world)`` then ``transform(prompts)``."""

    def __init__(self, site="mlp", window=3, strategy="token_replace",
                 target="visual_constraint", noise_scale=3.0, seed=0):
        self.site = site
        self.window = window
        self.strategy = strategy
        self.target = target
        self.noise_scale = noise_scale
        self.seed = seed

    def fit(self, model: MultiModalLM, world: World | None = None):
        if self.site not in SITE_KEYS:
            raise TraceError(f"unknown site {self.site!r}")
        self.model_ = model
        self.world_ = world
        return self

    def corrupt(self, prompt: PromptSpec) -> Corruption:
        spec = CorruptionSpec(self.strategy, self.target, noise_scale=self.noise_scale, seed=self.seed)
        return build_corrupted(prompt, spec, self.world_, self.model_)

    def transform(self, prompts: Sequence[PromptSpec]) -> list[TraceGrid]:
        if not hasattr(self, "model_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("CausalTracer is not fitted")
        return [run_trace(self.model_, p, self.corrupt(p), self.site, self.window) for p in prompts]

    def fit_transform(self, model, world=None, prompts=()):
        return self.fit(model, world).transform(prompts)
