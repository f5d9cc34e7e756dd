"""Synthetic constraint-annotated fact world.

Entities carry deterministic image signatures; relational facts map
``(entity, relation)`` to an attribute token, and multi-constraint facts map
``(entity, relation, year)`` to one.  Questions are built from templates in
which the visual constraint ``this entity`` stands in for the pictured
entity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import PromptSpec

WORLD_FORMAT = "mmtl-world"
WORLD_VERSION = 1

PAD, EOS, UNK = "<pad>", "<eos>", "<unk>"
SPECIALS = (PAD, EOS, UNK)
CONSTRAINT_WORDS = ("this", "entity")
NAME_ARTICLE = "the"

# relation name -> (relation word used in questions, attribute token prefix)
RELATION_CATALOG = (
    ("capital", "capital", "city"),
    ("language", "language", "tongue"),
    ("founder", "founder", "person"),
    ("currency", "currency", "coin"),
    ("sport", "sport", "game"),
    ("color", "color", "hue"),
    ("river", "river", "stream"),
    ("anthem", "anthem", "song"),
)
MULTI_RELATION = ("work", "film", "title")

SINGLE_PATTERNS = (
    ("what", "is", "the", "{rel}", "of", "{C}", "?"),
    ("name", "the", "{rel}", "of", "{C}", "?"),
    ("tell", "me", "the", "{rel}", "for", "{C}", "?"),
)
MULTI_PATTERNS = (
    ("name", "a", "{rel}", "made", "by", "{C}", "in", "{Y}", "?"),
    ("which", "{rel}", "did", "{C}", "make", "in", "{Y}", "?"),
    ("tell", "me", "the", "{rel}", "of", "{C}", "from", "{Y}", "?"),
)
YEARS = ("1994", "2006", "2010", "1987", "2001", "2015")

_SYLLABLES = ("ka", "lo", "mi", "ra", "ven", "tor", "sil", "da", "nu", "pe", "zor", "el",
              "bri", "qua", "fen", "ostr", "ul", "mar", "gi", "tha")


class WorldError(ValueError):
    pass


@dataclass(frozen=True)
class QuestionTemplate:
    template_id: int
    relation: str
    pattern: tuple[str, ...]
    paraphrase_group: str
    multi: bool = False

    def fill(self, relation_word: str, constraint: Sequence[str], year: str | None = None
             ) -> tuple[list[str], tuple[int, int], tuple[int, int] | None]:
        """Token strings plus constraint and year spans."""
        words: list[str] = []
        c_span = y_span = None
        for slot in self.pattern:
            if slot == "{rel}":
                words.append(relation_word)
            elif slot == "{C}":
                c_span = (len(words), len(words) + len(constraint))
                words.extend(constraint)
            elif slot == "{Y}":
                if year is None:
                    raise WorldError(f"template {self.template_id} needs a year")
                y_span = (len(words), len(words) + 1)
                words.append(year)
            else:
                words.append(slot)
        if year is not None and y_span is None:
            raise WorldError(f"template {self.template_id} has no year slot")
        assert c_span is not None
        return words, c_span, y_span


@dataclass(frozen=True)
class Fact:
    fact_id: int
    entity: int
    relation: str
    attribute: str
    year: str | None = None

    @property
    def multi(self) -> bool:
        return self.year is not None


@dataclass
class World:
    seed: int
    entities: list[str]
    relations: dict[str, dict]
    facts: list[Fact]
    templates: list[QuestionTemplate]
    splits: dict[str, list[int]]
    years: list[str] = field(default_factory=list)
    patch_grid: int = 4
    patch_dim: int = 16
    image_mode: str = "localized"
    sigma_img: float = 0.05
    vocab: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.vocab:
            self.vocab = build_vocab(self)
        self._index = {tok: i for i, tok in enumerate(self.vocab)}
        self._fact_key = {(f.entity, f.relation, f.year): f for f in self.facts}

    # -- vocabulary ----------------------------------------------------------
    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [self._index[w] for w in words]
        except KeyError as exc:
            raise WorldError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.vocab[i] for i in ids]

    # -- lookup --------------------------------------------------------------
    @property
    def n_visual(self) -> int:
        return self.patch_grid**2

    @property
    def signature_positions(self) -> list[int]:
        n = self.n_visual
        if self.image_mode == "distributed":
            return list(range(n))
        return list(range(n - math.ceil(n / 4), n))

    def fact(self, entity: int, relation: str, year: str | None = None) -> Fact | None:
        return self._fact_key.get((entity, relation, year))

    def split(self, name: str) -> list[Fact]:
        return [self.facts[i] for i in self.splits[name]]

    def single_facts(self, split: str = "train") -> list[Fact]:
        return [f for f in self.split(split) if not f.multi]

    def multi_facts(self, split: str = "train") -> list[Fact]:
        return [f for f in self.split(split) if f.multi]

    def templates_for(self, relation: str) -> list[QuestionTemplate]:
        return [t for t in self.templates if t.relation == relation]

    def is_trained(self, fact: Fact) -> bool:
        return fact.fact_id in self._train_ids

    @property
    def _train_ids(self) -> set[int]:
        return set(self.splits["train"])

    def distractors(self, fact: Fact) -> list[int]:
        """Entities whose trained fact for the same relation (and year)
        differs from ``fact``'s answer; all names are single tokens."""
        out = []
        train = self._train_ids
        for e in range(len(self.entities)):
            if e == fact.entity:
                continue
            other = self.fact(e, fact.relation, fact.year)
            if other is not None and other.fact_id in train and other.attribute != fact.attribute:
                out.append(e)
        return out

    def other_years(self, fact: Fact) -> list[str]:
        out = []
        for y in self.years:
            if y == fact.year:
                continue
            other = self.fact(fact.entity, fact.relation, y)
            if other is not None and other.fact_id in self._train_ids and other.attribute != fact.attribute:
                out.append(y)
        return out

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": WORLD_FORMAT,
            "version": WORLD_VERSION,
            "seed": self.seed,
            "image": {"patch_grid": self.patch_grid, "patch_dim": self.patch_dim,
                      "mode": self.image_mode, "sigma_img": self.sigma_img},
            "entities": list(self.entities),
            "relations": self.relations,
            "years": list(self.years),
            "facts": [
                {"id": f.fact_id, "entity": f.entity, "relation": f.relation,
                 "attribute": f.attribute, "year": f.year} for f in self.facts
            ],
            "templates": [
                {"id": t.template_id, "relation": t.relation, "pattern": list(t.pattern),
                 "paraphrase_group": t.paraphrase_group, "multi": t.multi}
                for t in self.templates
            ],
            "splits": {k: list(v) for k, v in self.splits.items()},
            "vocab": list(self.vocab),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "World":
        if data.get("format") != WORLD_FORMAT:
            raise WorldError("not a world document")
        if data.get("version") != WORLD_VERSION:
            raise WorldError(f"unsupported world version {data.get('version')}")
        img = data["image"]
        return cls(
            seed=data["seed"],
            entities=list(data["entities"]),
            relations=data["relations"],
            facts=[Fact(f["id"], f["entity"], f["relation"], f["attribute"], f["year"])
                   for f in data["facts"]],
            templates=[QuestionTemplate(t["id"], t["relation"], tuple(t["pattern"]),
                                        t["paraphrase_group"], t["multi"]) for t in data["templates"]],
            splits={k: list(v) for k, v in data["splits"].items()},
            years=list(data["years"]),
            patch_grid=img["patch_grid"], patch_dim=img["patch_dim"],
            image_mode=img["mode"], sigma_img=img["sigma_img"],
            vocab=list(data["vocab"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "World":
        return cls.from_dict(json.loads(text))


def build_vocab(world: World) -> list[str]:
    words = set(CONSTRAINT_WORDS) | {NAME_ARTICLE}
    for t in world.templates:
        words.update(w for w in t.pattern if not w.startswith("{"))
    words.update(r["word"] for r in world.relations.values())
    attrs = sorted({f.attribute for f in world.facts} |
                   {a for r in world.relations.values() for a in r["attributes"]})
    return list(SPECIALS) + sorted(words) + list(world.entities) + attrs + list(world.years)


def _entity_names(n: int, rng: np.random.Generator) -> list[str]:
    names: list[str] = []
    seen: set[str] = set()
    while len(names) < n:
        k = int(rng.integers(2, 4))
        name = "".join(_SYLLABLES[i] for i in rng.integers(0, len(_SYLLABLES), size=k))
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def _balanced_assignment(n_entities: int, n_attrs: int, rng: np.random.Generator) -> np.ndarray:
    """Attribute index per entity; every attribute used by >= 2 entities."""
    base = np.arange(n_entities) % n_attrs
    return rng.permutation(base)


def gen_world(n_entities: int = 50, n_relations: int = 4, seed: int = 0, *,
              n_years: int = 2, attrs_per_relation: int | None = None,
              longtail_fraction: float = 0.1, eval_fraction: float = 0.2,
              patch_grid: int = 4, patch_dim: int = 16, image_mode: str = "localized",
              sigma_img: float = 0.05) -> World:
    """Generate a deterministic fact world.

    Each relation gets ``attrs_per_relation`` attribute tokens (default
    ``n_entities // 5``), each shared by at least two entities.  Roughly
    ``longtail_fraction`` of single-constraint facts are held out of
    training; ``eval`` is a subset of the training facts used for
    early-stopping checks.
    """
    if n_entities < 2:
        raise WorldError("need at least two entities")
    if not 1 <= n_relations <= len(RELATION_CATALOG):
        raise WorldError(f"n_relations must be in [1, {len(RELATION_CATALOG)}]")
    if not 0 <= n_years <= len(YEARS):
        raise WorldError(f"n_years must be in [0, {len(YEARS)}]")
    if image_mode not in ("localized", "distributed"):
        raise WorldError(f"unknown image mode {image_mode!r}")
    n_attrs = attrs_per_relation or max(2, n_entities // 5)
    if n_attrs < 2 or n_attrs * 2 > n_entities:
        raise WorldError("infeasible attribute count: each attribute needs two entities "
                         "and distractors need two attributes")
    if n_years > n_attrs:
        raise WorldError("n_years exceeds the attribute count; per-year answers must differ")
    rng = np.random.default_rng(seed)
    entities = _entity_names(n_entities, rng)

    relations: dict[str, dict] = {}
    facts: list[Fact] = []
    for name, word, prefix in RELATION_CATALOG[:n_relations]:
        attrs = [f"{prefix}{i}" for i in range(n_attrs)]
        relations[name] = {"word": word, "attributes": attrs, "multi": False}
        assign = _balanced_assignment(n_entities, n_attrs, rng)
        for e in range(n_entities):
            facts.append(Fact(len(facts), e, name, attrs[assign[e]]))
    n_single = len(facts)

    years = list(YEARS[:n_years])
    if n_years >= 2:
        name, word, prefix = MULTI_RELATION
        attrs = [f"{prefix}{i}" for i in range(n_attrs)]
        relations[name] = {"word": word, "attributes": attrs, "multi": True}
        assign = _balanced_assignment(n_entities, n_attrs, rng)
        # shift per year so an entity's answer differs between years
        shifts = np.concatenate([[0], 1 + rng.permutation(n_attrs - 1)[:n_years - 1]])
        for yi, y in enumerate(years):
            for e in range(n_entities):
                facts.append(Fact(len(facts), e, name, attrs[(assign[e] + shifts[yi]) % n_attrs], y))

    templates: list[QuestionTemplate] = []
    for name, spec in relations.items():
        patterns = MULTI_PATTERNS if spec["multi"] else SINGLE_PATTERNS
        for pat in patterns:
            templates.append(QuestionTemplate(len(templates), name, pat, name, spec["multi"]))

    # longtail: hold out single facts, keeping >= 1 trained fact per entity
    n_long = int(round(longtail_fraction * n_single))
    order = rng.permutation(n_single)
    held: list[int] = []
    per_entity_held: dict[int, int] = {}
    for i in order:
        if len(held) >= n_long:
            break
        e = facts[i].entity
        if per_entity_held.get(e, 0) + 1 >= n_relations:
            continue
        held.append(int(i))
        per_entity_held[e] = per_entity_held.get(e, 0) + 1
    held_set = set(held)
    train = [f.fact_id for f in facts if f.fact_id not in held_set]
    n_eval = max(1, int(round(eval_fraction * len(train))))
    eval_ids = sorted(int(i) for i in rng.choice(train, size=n_eval, replace=False))
    splits = {"train": train, "eval": eval_ids, "longtail": sorted(held)}
    world = World(seed=seed, entities=entities, relations=relations, facts=facts,
                  templates=templates, splits=splits, years=years, patch_grid=patch_grid,
                  patch_dim=patch_dim, image_mode=image_mode, sigma_img=sigma_img)
    for f in world.facts:
        if f.fact_id in held_set:
            continue
        if not f.multi and not world.distractors(f):
            raise WorldError(f"fact {f.fact_id} has no valid distractor")
    return world


# -- images -------------------------------------------------------------------

def render_image(world: World, entity: int, sample_seed: int = 0, *,
                 sigma_img: float | None = None, mode: str | None = None) -> np.ndarray:
    """Deterministic ``(N, patch_dim)`` patch grid for ``entity``.

    Signature patches carry an entity-keyed pseudo-random vector; in
    ``localized`` mode the remaining patches carry a background shared by
    all entities.  Per-sample noise has amplitude ``sigma_img``.
    """
    if not 0 <= entity < len(world.entities):
        raise WorldError(f"unknown entity {entity}")
    mode = mode or world.image_mode
    sigma = world.sigma_img if sigma_img is None else sigma_img
    n, dim = world.n_visual, world.patch_dim
    sig = np.random.default_rng([world.seed, 1, entity]).normal(size=(n, dim))
    if mode == "distributed":
        img = sig
    elif mode == "localized":
        img = np.random.default_rng([world.seed, 2]).normal(size=(n, dim))
        pos = list(range(n - math.ceil(n / 4), n))
        img[pos] = sig[pos]
    else:
        raise WorldError(f"unknown image mode {mode!r}")
    if sigma > 0:
        img = img + sigma * np.random.default_rng([world.seed, 3, entity, sample_seed]).normal(size=(n, dim))
    return img


# -- prompts --------------------------------------------------------------------

def make_prompt(world: World, fact: Fact, template: QuestionTemplate, sample_seed: int = 0, *,
                form: str = "image", image_entity: int | None = None,
                sigma_img: float | None = None) -> PromptSpec:
    """Build a prompt for ``fact`` from ``template``.

    ``form``: ``"image"`` (image of the entity, visual constraint
    ``this entity``), ``"name"`` (entity named in text, image of
    ``image_entity`` or of the entity itself) or ``"text"`` (no image).
    """
    if template.relation != fact.relation or template.multi != fact.multi:
        raise WorldError(f"template {template.template_id} does not fit fact {fact.fact_id}")
    rel_word = world.relations[fact.relation]["word"]
    name = world.entities[fact.entity]
    constraint = list(CONSTRAINT_WORDS) if form == "image" else [NAME_ARTICLE, name]
    words, c_span, y_span = template.fill(rel_word, constraint, fact.year)
    if form == "image":
        image = render_image(world, fact.entity, sample_seed, sigma_img=sigma_img)
        vis_span, text_span = c_span, y_span
    elif form == "name":
        shown = fact.entity if image_entity is None else image_entity
        image = render_image(world, shown, sample_seed, sigma_img=sigma_img)
        vis_span, text_span = None, y_span if y_span else c_span
    elif form == "text":
        image = None
        vis_span, text_span = None, y_span if y_span else c_span
    else:
        raise WorldError(f"unknown prompt form {form!r}")
    meta = {
        "fact_id": fact.fact_id, "entity": fact.entity, "relation": fact.relation,
        "template_id": template.template_id, "year": fact.year, "form": form,
        "sample_seed": sample_seed, "entity_span": c_span,
        "text_constraint_kind": ("year" if y_span else "entity") if text_span else None,
    }
    return PromptSpec(image=image, question_tokens=tuple(world.encode(words)),
                      visual_constraint_span=vis_span, text_constraint_span=text_span,
                      answer_tokens=tuple(world.encode([fact.attribute])), metadata=meta)


def paraphrase(world: World, prompt: PromptSpec, index: int = 0) -> PromptSpec:
    """Same fact and image, the ``index``-th other template of the group."""
    meta = prompt.metadata
    fact = world.facts[meta["fact_id"]]
    current = world.templates[meta["template_id"]]
    others = [t for t in world.templates
              if t.paraphrase_group == current.paraphrase_group and t.template_id != current.template_id]
    if not others:
        raise WorldError("no paraphrase available")
    tmpl = others[index % len(others)]
    new = make_prompt(world, fact, tmpl, meta["sample_seed"], form=meta["form"])
    # keep the exact image (it may have been rendered with a custom sigma)
    return new.replace(image=prompt.image)


def paraphrases(world: World, prompt: PromptSpec) -> list[PromptSpec]:
    current = world.templates[prompt.metadata["template_id"]]
    n = sum(1 for t in world.templates if t.paraphrase_group == current.paraphrase_group) - 1
    return [paraphrase(world, prompt, i) for i in range(n)]


def detokenize(world: World, prompt: PromptSpec) -> str:
    return " ".join(world.decode(prompt.question_tokens))
