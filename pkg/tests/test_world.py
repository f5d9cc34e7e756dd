import json

import numpy as np
import pytest

from mmtl.world import (World, WorldError, detokenize, gen_world, make_prompt, paraphrase, paraphrases,
                        render_image)


def test_generation_is_deterministic():
    assert gen_world(12, 3, seed=5).to_json() == gen_world(12, 3, seed=5).to_json()
    assert gen_world(12, 3, seed=5).to_json() != gen_world(12, 3, seed=6).to_json()


def test_json_round_trip(small_world):
    again = World.from_json(small_world.to_json())
    assert again.to_json() == small_world.to_json()
    assert json.loads(small_world.to_json())["format"] == "mmtl-world"


def test_unknown_version_rejected(small_world):
    data = json.loads(small_world.to_json())
    data["version"] = 99
    with pytest.raises(WorldError):
        World.from_dict(data)


def test_default_world_shape():
    w = gen_world()
    assert len(w.entities) == 50
    assert len(w.single_facts("train")) + len(w.split("longtail")) == 200
    assert len(w.split("longtail")) == 20
    assert set(w.splits["eval"]) <= set(w.splits["train"])
    assert not set(w.splits["longtail"]) & set(w.splits["train"])


def test_each_entity_keeps_a_trained_fact(small_world):
    trained = {f.entity for f in small_world.split("train")}
    assert trained == set(range(len(small_world.entities)))


def test_every_attribute_shared_and_distractors_exist(small_world):
    for rel, spec in small_world.relations.items():
        counts = {}
        for f in small_world.facts:
            if f.relation == rel:
                counts[f.attribute] = counts.get(f.attribute, 0) + 1
        assert min(counts.values()) >= 2
    for f in small_world.single_facts("train"):
        for e in small_world.distractors(f):
            assert small_world.fact(e, f.relation).attribute != f.attribute


def test_year_changes_the_answer(small_world):
    for f in small_world.multi_facts("train"):
        for y in small_world.other_years(f):
            assert small_world.fact(f.entity, f.relation, y).attribute != f.attribute


def test_images_deterministic_and_localized(small_world):
    a = render_image(small_world, 2, 7)
    assert np.array_equal(a, render_image(small_world, 2, 7))
    clean_a = render_image(small_world, 2, sigma_img=0.0)
    clean_b = render_image(small_world, 3, sigma_img=0.0)
    sig = small_world.signature_positions
    other = [i for i in range(small_world.n_visual) if i not in sig]
    assert np.array_equal(clean_a[other], clean_b[other])
    assert not np.allclose(clean_a[sig], clean_b[sig])


def test_prompt_spans_point_at_constraint_words(small_world):
    f = small_world.single_facts("train")[0]
    for t in small_world.templates_for(f.relation):
        p = make_prompt(small_world, f, t, 0)
        words = small_world.decode(p.question_tokens)
        s = p.visual_constraint_span
        assert words[s[0]:s[1]] == ["this", "entity"]
        assert p.answer_tokens == tuple(small_world.encode([f.attribute]))
        n = make_prompt(small_world, f, t, 0, form="name")
        nw = small_world.decode(n.question_tokens)
        assert small_world.entities[f.entity] in nw and n.visual_constraint_span is None


def test_multi_prompt_marks_year(small_world):
    f = small_world.multi_facts("train")[0]
    p = make_prompt(small_world, f, small_world.templates_for(f.relation)[0], 0)
    words = small_world.decode(p.question_tokens)
    s = p.text_constraint_span
    assert words[s[0]:s[1]] == [f.year]
    assert p.metadata["text_constraint_kind"] == "year"


def test_paraphrase_keeps_image_and_answer(small_world, image_prompt):
    q = paraphrase(small_world, image_prompt, 0)
    assert np.array_equal(q.image, image_prompt.image)
    assert q.answer_tokens == image_prompt.answer_tokens
    assert q.question_tokens != image_prompt.question_tokens
    assert len(paraphrases(small_world, image_prompt)) == 2
    assert "?" in detokenize(small_world, q)


@pytest.mark.parametrize("kw", [dict(n_entities=1), dict(n_relations=0), dict(image_mode="x"),
                                dict(n_entities=10, attrs_per_relation=6)])
def test_invalid_generation_arguments(kw):
    with pytest.raises(WorldError):
        gen_world(**kw)


def test_unknown_words_rejected(small_world):
    with pytest.raises(WorldError):
        small_world.encode(["zzzz-not-a-word"])
