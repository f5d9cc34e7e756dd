"""Toy projection-layer multi-modal language model.

A per-patch linear vision encoder feeds a linear projection head whose
outputs ("visual tokens") are prepended to the text-token embeddings of a
small pre-norm decoder-only transformer.  Every block output can be cached
and overwritten, which is all the tracing and editing code needs.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

SITES = ("embedding", "attn_out", "mlp_out", "hidden")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 8
    n_heads: int = 4
    d_model: int = 128
    d_mlp: int = 512
    patch_grid: int = 4
    patch_dim: int = 16
    d_vision: int = 64
    max_text_len: int = 16
    seed: int = 0
    init_std: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.n_layers, self.n_heads, self.d_model, self.d_mlp, self.vocab_size) < 1:
            raise ValueError("model sizes must be positive")
        if self.patch_grid < 0:
            raise ValueError("patch_grid must be >= 0")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_visual(self) -> int:
        return self.patch_grid**2

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass(frozen=True)
class PromptSpec:
    """An image plus a tokenized question with annotated constraint spans.

    Spans are half-open ``(start, end)`` offsets into ``question_tokens``.
    ``image`` is an ``(N, patch_dim)`` array, or ``None`` for text-only
    prompts.
    """

    image: np.ndarray | None
    question_tokens: tuple[int, ...]
    visual_constraint_span: tuple[int, int] | None = None
    text_constraint_span: tuple[int, int] | None = None
    answer_tokens: tuple[int, ...] = ()
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "question_tokens", tuple(int(t) for t in self.question_tokens))
        object.__setattr__(self, "answer_tokens", tuple(int(t) for t in self.answer_tokens))
        if self.image is not None:
            img = np.asarray(self.image, dtype=np.float64)
            if img.ndim != 2:
                raise ValueError("image must be a 2-D (patches, patch_dim) array")
            object.__setattr__(self, "image", img)
        m = len(self.question_tokens)
        if m == 0:
            raise ValueError("question must contain at least one token")
        spans = []
        for name in ("visual_constraint_span", "text_constraint_span"):
            span = getattr(self, name)
            if span is None:
                continue
            span = (int(span[0]), int(span[1]))
            if not 0 <= span[0] < span[1] <= m:
                raise ValueError(f"{name} {span} out of bounds for question of length {m}")
            object.__setattr__(self, name, span)
            spans.append(span)
        if len(spans) == 2 and spans[0][0] < spans[1][1] and spans[1][0] < spans[0][1]:
            raise ValueError("constraint spans overlap")

    @property
    def n_visual(self) -> int:
        return 0 if self.image is None else self.image.shape[0]

    @property
    def seq_len(self) -> int:
        return self.n_visual + len(self.question_tokens)

    @property
    def last_position(self) -> int:
        return self.seq_len - 1

    @property
    def constraint_position(self) -> int:
        """Sequence index of the last token of the visual constraint (or of
        the text constraint for text-only prompts)."""
        span = self.visual_constraint_span or self.text_constraint_span
        if span is None:
            raise ValueError("prompt has no constraint span")
        return self.n_visual + span[1] - 1

    @property
    def text_constraint_position(self) -> int:
        if self.text_constraint_span is None:
            raise ValueError("prompt has no text constraint span")
        return self.n_visual + self.text_constraint_span[1] - 1

    def span_positions(self, which: str = "visual") -> list[int]:
        span = self.visual_constraint_span if which == "visual" else self.text_constraint_span
        if span is None:
            raise ValueError(f"prompt has no {which} constraint span")
        return [self.n_visual + i for i in range(*span)]

    def replace(self, **changes) -> "PromptSpec":
        fields = dict(image=self.image, question_tokens=self.question_tokens,
                      visual_constraint_span=self.visual_constraint_span,
                      text_constraint_span=self.text_constraint_span,
                      answer_tokens=self.answer_tokens, metadata=dict(self.metadata))
        fields.update(changes)
        return PromptSpec(**fields)


@dataclass
class ActivationCache:
    """Per-layer, per-position records of one forward pass.

    Arrays are indexed ``[layer, position, ...]``.  ``attn_in`` holds the
    normalized residual stream that the attention block reads.
    """

    embedding: np.ndarray
    attn_in: np.ndarray
    attn_pattern: np.ndarray  # (L, H, T, T)
    attn_out: np.ndarray
    mlp_proj_in: np.ndarray
    mlp_out: np.ndarray
    hidden_out: np.ndarray
    logits: np.ndarray

    @property
    def n_positions(self) -> int:
        return self.embedding.shape[0]

    def site(self, name: str) -> np.ndarray:
        return {"embedding": self.embedding[None], "attn_out": self.attn_out,
                "mlp_out": self.mlp_out, "hidden": self.hidden_out}[name]


@dataclass(frozen=True)
class Intervention:
    """Overwrite (or perturb) a block output before it joins the residual.

    ``values`` broadcasts to ``(len(layers), len(positions), d_model)``.
    ``add_noise`` draws ``N(0, noise_std^2)`` with ``noise_seed``.
    The ``embedding`` site ignores ``layers``.
    """

    site: str
    layers: tuple[int, ...]
    positions: tuple[int, ...]
    values: np.ndarray | None = None
    noise_std: float | None = None
    noise_seed: int = 0

    def __post_init__(self):
        if self.site not in SITES:
            raise ValueError(f"unknown site {self.site!r}")
        object.__setattr__(self, "layers", tuple(int(x) for x in self.layers))
        object.__setattr__(self, "positions", tuple(int(x) for x in self.positions))
        if (self.values is None) == (self.noise_std is None):
            raise ValueError("intervention needs exactly one of values or noise_std")
        if self.site == "embedding":
            object.__setattr__(self, "layers", (0,))

    @classmethod
    def replace(cls, site, layers, positions, values) -> "Intervention":
        return cls(site, tuple(layers), tuple(positions), values=np.asarray(values, dtype=np.float64))

    @classmethod
    def noise(cls, site, positions, std, seed=0, layers=(0,)) -> "Intervention":
        return cls(site, tuple(layers), tuple(positions), noise_std=float(std), noise_seed=seed)

    @classmethod
    def restore(cls, site, layers, positions, cache: ActivationCache) -> "Intervention":
        layers, positions = tuple(layers), tuple(positions)
        src = cache.site(site)
        if site == "embedding":
            vals = src[0][list(positions)][None]
        else:
            vals = src[np.ix_(list(layers), list(positions))]
        return cls(site, layers, positions, values=vals)

    def resolved(self, d_model: int) -> tuple[np.ndarray | None, np.ndarray | None]:
        shape = (len(self.layers), len(self.positions), d_model)
        if self.values is not None:
            return np.broadcast_to(self.values, shape), None
        rng = np.random.default_rng(self.noise_seed)
        return None, rng.normal(0.0, self.noise_std, size=shape[1:])


class MultiModalLM:
    """Vision encoder, projection head and decoder-only language model."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        if params is None:
            params = self._init_params()
        missing = set(self.param_names()) - set(params)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        self.params: dict[str, Tensor] = {
            name: Tensor(np.array(params[name], dtype=np.float64)) for name in self.param_names()
        }
        for name, t in self.params.items():
            if t.shape != self.param_shapes()[name]:
                raise ValueError(f"parameter {name} has shape {t.shape}, "
                                 f"expected {self.param_shapes()[name]}")

    # -- parameters ----------------------------------------------------------
    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return self.shapes_for(self.config)

    @staticmethod
    def shapes_for(c: ModelConfig) -> dict[str, tuple[int, ...]]:
        """Parameter shapes in canonical (serialization) order."""
        d, f = c.d_model, c.d_mlp
        shapes: dict[str, tuple[int, ...]] = {
            "vision.W": (c.patch_dim, c.d_vision),
            "proj.W": (c.d_vision, d),
            "vision.pos": (c.n_visual, d),
            "tok_emb": (c.vocab_size, d),
            "text_pos": (c.max_text_len, d),
        }
        for l in range(c.n_layers):
            p = f"blocks.{l}."
            shapes.update({
                p + "ln1.g": (d,), p + "ln1.b": (d,),
                p + "attn.W_q": (d, d), p + "attn.W_k": (d, d),
                p + "attn.W_v": (d, d), p + "attn.W_o": (d, d), p + "attn.b_o": (d,),
                p + "ln2.g": (d,), p + "ln2.b": (d,),
                p + "mlp.W_fc": (d, f), p + "mlp.b_fc": (f,),
                p + "mlp.W_proj": (f, d), p + "mlp.b_proj": (d,),
            })
        shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "unembed.W": (d, c.vocab_size),
                       "unembed.b": (c.vocab_size,)})
        return shapes

    def param_names(self) -> list[str]:
        return list(self.param_shapes())

    def _init_params(self) -> dict[str, np.ndarray]:
        c = self.config
        rng = np.random.default_rng(c.seed)
        resid_scale = c.init_std / np.sqrt(2 * c.n_layers)
        out = {}
        for name, shape in self.param_shapes().items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                out[name] = np.ones(shape)
            elif leaf in ("b", "b_o", "b_fc", "b_proj"):
                out[name] = np.zeros(shape)
            elif name == "vision.W":
                out[name] = rng.normal(0, 1 / np.sqrt(c.patch_dim), shape)
            elif name == "proj.W":
                out[name] = rng.normal(0, 1 / np.sqrt(c.d_vision), shape)
            elif leaf in ("W_o", "W_proj"):
                out[name] = rng.normal(0, resid_scale, shape)
            else:
                out[name] = rng.normal(0, c.init_std, shape)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def clone(self) -> "MultiModalLM":
        return MultiModalLM(self.config, self.state_dict())

    def __deepcopy__(self, memo):
        return self.clone()

    def requires_grad_(self, flag: bool = True) -> "MultiModalLM":
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None
        return self

    def layer_param(self, layer: int, name: str) -> Tensor:
        return self.params[f"blocks.{layer}.{name}"]

    # -- embedding -----------------------------------------------------------
    def encode_and_project(self, image) -> Tensor:
        """Visual token embeddings for one ``(N, patch_dim)`` image."""
        c = self.config
        img = np.asarray(image, dtype=np.float64)
        if img.shape != (c.n_visual, c.patch_dim):
            raise ValueError(f"image shape {img.shape} != ({c.n_visual}, {c.patch_dim})")
        feats = nx.matmul(Tensor(img), self.params["vision.W"])
        return nx.matmul(feats, self.params["proj.W"]) + self.params["vision.pos"]

    def embed_batch(self, prompts: Sequence[PromptSpec], extra: Sequence[Sequence[int]] | None = None
                    ) -> tuple[Tensor, np.ndarray]:
        """Stack input embeddings for ``prompts`` (each followed by ``extra``
        tokens), right-padding to a common length.

        Returns the ``(B, T, d)`` embedding tensor and per-row lengths.
        """
        c = self.config
        extra = extra if extra is not None else [()] * len(prompts)
        n_vis = {p.n_visual for p in prompts}
        if len(n_vis) != 1:
            raise ValueError("all prompts in a batch need the same number of visual tokens")
        n_vis = n_vis.pop()
        if n_vis not in (0, c.n_visual):
            raise ValueError(f"prompt has {n_vis} visual tokens, model expects {c.n_visual}")
        texts = [list(p.question_tokens) + list(e) for p, e in zip(prompts, extra)]
        t_max = max(len(t) for t in texts)
        if t_max > c.max_text_len:
            raise ValueError(f"text length {t_max} exceeds max_text_len {c.max_text_len}")
        ids = np.zeros((len(prompts), t_max), dtype=np.int64)
        for i, t in enumerate(texts):
            if min(t) < 0 or max(t) >= c.vocab_size:
                raise ValueError("token id out of range")
            ids[i, : len(t)] = t
        text = nx.embedding(self.params["tok_emb"], ids) + self.params["text_pos"][:t_max]
        if n_vis:
            imgs = np.stack([p.image for p in prompts])
            if imgs.shape[1:] != (c.n_visual, c.patch_dim):
                raise ValueError(f"image shape {imgs.shape[1:]} != ({c.n_visual}, {c.patch_dim})")
            vis = nx.matmul(nx.matmul(Tensor(imgs), self.params["vision.W"]), self.params["proj.W"])
            vis = vis + self.params["vision.pos"]
            x = nx.concat([vis, text], axis=1)
        else:
            x = text
        lengths = np.array([n_vis + len(t) for t in texts])
        return x, lengths

    # -- core ----------------------------------------------------------------
    def run(self, x: Tensor, start_layer: int = 0, patches: dict | None = None,
            record: dict | None = None) -> Tensor:
        """Run blocks ``start_layer..L-1`` on residual stream ``x`` (B, T, d).

        ``patches`` maps ``(site, layer)`` to a list of ``(mask, values,
        noise)`` triples applied in order: ``mask`` is (B, T) bool, ``values``
        an array/Tensor broadcastable to (B, T, d) written where the mask is
        set, ``noise`` an additive (B, T, d) array.  ``record`` (a dict) is
        filled with numpy copies of every cached site.
        """
        c = self.config
        patches = patches or {}
        b, t, d = x.shape
        h, dh = c.n_heads, c.d_head
        scale = 1.0 / np.sqrt(dh)
        if start_layer == 0:
            x = _apply(x, patches.get(("embedding", 0)))
            if record is not None:
                record["embedding"] = x.data.copy()
        for l in range(start_layer, c.n_layers):
            p = f"blocks.{l}."
            prm = self.params
            a_in = nx.layer_norm(x, prm[p + "ln1.g"], prm[p + "ln1.b"], c.ln_eps)
            q = nx.matmul(a_in, prm[p + "attn.W_q"]).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
            k = nx.matmul(a_in, prm[p + "attn.W_k"]).reshape(b, t, h, dh).transpose(0, 2, 3, 1)
            v = nx.matmul(a_in, prm[p + "attn.W_v"]).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
            pattern = nx.softmax_rows(nx.matmul(q, k) * scale, causal=True)
            ctx = nx.matmul(pattern, v).transpose(0, 2, 1, 3).reshape(b, t, d)
            attn = nx.matmul(ctx, prm[p + "attn.W_o"]) + prm[p + "attn.b_o"]
            attn = _apply(attn, patches.get(("attn_out", l)))
            x = x + attn
            m_in = nx.layer_norm(x, prm[p + "ln2.g"], prm[p + "ln2.b"], c.ln_eps)
            act = nx.gelu(nx.matmul(m_in, prm[p + "mlp.W_fc"]) + prm[p + "mlp.b_fc"])
            mlp = nx.matmul(act, prm[p + "mlp.W_proj"]) + prm[p + "mlp.b_proj"]
            mlp = _apply(mlp, patches.get(("mlp_out", l)))
            x = x + mlp
            x = _apply(x, patches.get(("hidden", l)))
            if record is not None:
                for key, val in (("attn_in", a_in), ("attn_pattern", pattern), ("attn_out", attn),
                                 ("mlp_proj_in", act), ("mlp_out", mlp), ("hidden_out", x)):
                    record.setdefault(key, {})[l] = val.data.copy()
        return x

    def unembed(self, x: Tensor) -> Tensor:
        c = self.config
        xf = nx.layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"], c.ln_eps)
        return nx.matmul(xf, self.params["unembed.W"]) + self.params["unembed.b"]

    # -- public inference ----------------------------------------------------
    def interventions_to_patches(self, interventions: Iterable[Intervention], seq_len: int,
                                 batch: int = 1, row: int | None = None) -> dict:
        c = self.config
        patches: dict = {}
        for iv in interventions:
            if iv.site != "embedding" and any(not 0 <= l < c.n_layers for l in iv.layers):
                raise ValueError(f"intervention layer out of range: {iv.layers}")
            if any(not 0 <= k < seq_len for k in iv.positions):
                raise ValueError(f"intervention position out of range: {iv.positions}")
            values, noise = iv.resolved(c.d_model)
            rows = range(batch) if row is None else [row]
            pos = list(iv.positions)
            for li, l in enumerate(iv.layers):
                mask = np.zeros((batch, seq_len), dtype=bool)
                full = np.zeros((batch, seq_len, c.d_model))
                for r in rows:
                    mask[r, pos] = True
                    if values is not None:
                        full[r, pos] = values[li]
                    else:
                        full[r, pos] = noise
                entry = (mask, full, None) if values is not None else (None, None, full)
                patches.setdefault((iv.site, l), []).append(entry)
        return patches

    def forward(self, prompt: PromptSpec, interventions: Sequence[Intervention] = (),
                cache: bool = False, extra_tokens: Sequence[int] = ()
                ) -> tuple[np.ndarray, ActivationCache | None]:
        """Logits ``(T, V)`` for one prompt and, optionally, its activation cache."""
        with nx.no_grad():
            x, lengths = self.embed_batch([prompt], [tuple(extra_tokens)])
            patches = self.interventions_to_patches(interventions, int(lengths[0]))
            record = {} if cache else None
            hidden = self.run(x, patches=patches, record=record)
            logits = self.unembed(hidden).data[0]
        if not cache:
            return logits, None
        L = self.config.n_layers
        stack = lambda key: np.stack([record[key][l][0] for l in range(L)])
        act = ActivationCache(
            embedding=record["embedding"][0], attn_in=stack("attn_in"),
            attn_pattern=stack("attn_pattern"), attn_out=stack("attn_out"),
            mlp_proj_in=stack("mlp_proj_in"), mlp_out=stack("mlp_out"),
            hidden_out=stack("hidden_out"), logits=logits)
        return logits, act

    def answer_logprob(self, prompt: PromptSpec, answer_tokens: Sequence[int],
                       interventions: Sequence[Intervention] = ()) -> float:
        answer = list(answer_tokens)
        if not answer:
            raise ValueError("answer must be non-empty")
        logits, _ = self.forward(prompt, interventions, extra_tokens=answer[:-1])
        start = prompt.seq_len - 1
        rows = logits[start:start + len(answer)]
        logp = rows - rows.max(axis=-1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
        return float(logp[np.arange(len(answer)), answer].sum())

    def answer_prob(self, prompt: PromptSpec, answer_tokens: Sequence[int] | None = None,
                    interventions: Sequence[Intervention] = ()) -> float:
        """Teacher-forced probability of ``answer_tokens`` after the question."""
        answer = prompt.answer_tokens if answer_tokens is None else answer_tokens
        return float(np.exp(self.answer_logprob(prompt, answer, interventions)))

    def next_token_probs(self, prompt: PromptSpec, interventions: Sequence[Intervention] = ()
                         ) -> np.ndarray:
        logits, _ = self.forward(prompt, interventions)
        return _softmax(logits[-1])

    def generate_greedy(self, prompt: PromptSpec, max_new: int = 4, eos_id: int | None = 1,
                        interventions: Sequence[Intervention] = ()) -> list[int]:
        """Argmax decoding; stops at ``eos_id`` (not included in the output)."""
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        out: list[int] = []
        for _ in range(max_new):
            if len(prompt.question_tokens) + len(out) >= self.config.max_text_len:
                break
            logits, _ = self.forward(prompt, interventions, extra_tokens=out)
            tok = int(np.argmax(logits[-1]))
            if eos_id is not None and tok == eos_id:
                break
            out.append(tok)
        return out

    def batch_logits(self, prompts: Sequence[PromptSpec], extra: Sequence[Sequence[int]] | None = None
                     ) -> list[np.ndarray]:
        """Per-prompt logits for a list of prompts (grouped by shape)."""
        extra = list(extra) if extra is not None else [()] * len(prompts)
        results: list[np.ndarray | None] = [None] * len(prompts)
        groups: dict[tuple[int, int], list[int]] = {}
        for i, (p, e) in enumerate(zip(prompts, extra)):
            groups.setdefault((p.n_visual, len(p.question_tokens) + len(e)), []).append(i)
        with nx.no_grad():
            for (_, _), idx in sorted(groups.items()):
                x, _ = self.embed_batch([prompts[i] for i in idx], [extra[i] for i in idx])
                logits = self.unembed(self.run(x)).data
                for row, i in enumerate(idx):
                    results[i] = logits[row]
        return results  # type: ignore[return-value]

    def batch_generate(self, prompts: Sequence[PromptSpec], max_new: int = 4, eos_id: int = 1
                       ) -> list[list[int]]:
        outs: list[list[int]] = [[] for _ in prompts]
        active = list(range(len(prompts)))
        for _ in range(max_new):
            active = [i for i in active
                      if len(prompts[i].question_tokens) + len(outs[i]) < self.config.max_text_len]
            if not active:
                break
            logits = self.batch_logits([prompts[i] for i in active], [outs[i] for i in active])
            still = []
            for i, lg in zip(active, logits):
                tok = int(np.argmax(lg[-1]))
                if tok != eos_id:
                    outs[i].append(tok)
                    still.append(i)
            active = still
        return outs


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _apply(x: Tensor, ops) -> Tensor:
    if not ops:
        return x
    for mask, values, noise in ops:
        if mask is not None:
            x = nx.patch(x, mask[..., None], values)
        if noise is not None:
            x = x + noise
    return x
