import json
import math
from dataclasses import replace

import numpy as np
import pytest

from mmtl.editing import (EditRequest, MultEdit, apply_edit, baseline_finetune, closed_form_update, edit_report,
                          evaluate_edit, extract_key, fix_suite, layer_sweep, longtail_suite, optimize_value,
                          run_case, stationarity_residual, summarize_results, value_loss_and_grad)
from mmtl.world import make_prompt
from gradcheck import numeric_grad, rel_error


def _instance(rng, d=6, m=9):
    return rng.normal(size=(d, m)), rng.normal(size=m), rng.normal(size=d), float(10 ** rng.uniform(-3, 1))


def test_closed_form_is_stationary_and_matches_dense_solve():
    rng = np.random.default_rng(0)
    for _ in range(50):
        w, k, z, lam = _instance(rng)
        new = closed_form_update(w, k, z, lam)
        assert np.abs(stationarity_residual(new, w, k, z, lam)).max() < 1e-8
        A = lam * np.eye(len(k)) + np.outer(k, k)
        dense = np.linalg.solve(A.T, (lam * w + np.outer(z, k)).T).T
        assert np.abs(new - dense).max() < 1e-9


def test_closed_form_limits():
    rng = np.random.default_rng(1)
    w, k, z, _ = _instance(rng)
    np.testing.assert_allclose(closed_form_update(w, k, z, 1e6), w, atol=1e-4)
    assert np.array_equal(closed_form_update(w, np.zeros_like(k), z, 0.1), w)
    with pytest.raises(ValueError):
        closed_form_update(w, k[:-1], z, 0.1)
    with pytest.raises(ValueError):
        closed_form_update(w, k, z, 0.0)


def test_weight_change_shrinks_as_lambda_grows():
    rng = np.random.default_rng(2)
    for _ in range(20):
        w, k, z, _ = _instance(rng)
        norms = [np.linalg.norm(closed_form_update(w, k, z, lam) - w) for lam in (1e-3, 1e-2, 1e-1, 1.0)]
        assert all(a >= b - 1e-12 for a, b in zip(norms, norms[1:]))


def test_key_reproduces_mlp_output(tiny_model, image_prompt):
    _, cache = tiny_model.forward(image_prompt, cache=True)
    for l in range(tiny_model.config.n_layers):
        k = extract_key(tiny_model, image_prompt, l, image_prompt.constraint_position)
        w = tiny_model.layer_param(l, "mlp.W_proj").data.T
        b = tiny_model.layer_param(l, "mlp.b_proj").data
        assert np.abs(w @ k - (cache.mlp_out[l, image_prompt.constraint_position] - b)).max() < 1e-10


def test_value_gradient_matches_finite_differences(tiny_model, small_world, image_prompt):
    rng = np.random.default_rng(3)
    other = small_world.encode([small_world.relations[small_world.single_facts()[0].relation]["attributes"][1]])
    for layer in range(tiny_model.config.n_layers):
        req = EditRequest(image_prompt, other, layer=layer)
        z = rng.normal(size=tiny_model.config.d_model)
        _, g = value_loss_and_grad(tiny_model, req, z)
        num = numeric_grad(lambda a: value_loss_and_grad(tiny_model, req, a[0])[0], [z], 0)
        assert rel_error(g, num) < 1e-3


def test_edit_touches_only_the_target_projection(tiny_model, small_world, image_prompt):
    target = small_world.encode([small_world.relations[small_world.single_facts()[0].relation]["attributes"][2]])
    req = EditRequest(image_prompt, target, layer=1, max_steps=5)
    edited, _ = apply_edit(tiny_model, req)
    changed = [n for n in tiny_model.param_names()
               if not np.array_equal(edited.params[n].data, tiny_model.params[n].data)]
    assert changed == ["blocks.1.mlp.W_proj"]
    _, before = tiny_model.forward(image_prompt, cache=True)
    _, after = edited.forward(image_prompt, cache=True)
    assert np.array_equal(before.hidden_out[0], after.hidden_out[0])
    assert np.array_equal(before.mlp_proj_in[1], after.mlp_proj_in[1])


def test_evaluate_edit_requires_sets(tiny_model, image_prompt):
    req = EditRequest(image_prompt, image_prompt.answer_tokens)
    with pytest.raises(ValueError):
        evaluate_edit(tiny_model, req, [], [image_prompt])
    with pytest.raises(ValueError):
        evaluate_edit(tiny_model, req, [image_prompt], [])
    res = evaluate_edit(tiny_model, req, [image_prompt], [image_prompt])
    assert res.specificity_drop == 0.0 and res.weight_change == 0.0


def test_request_validation(image_prompt):
    with pytest.raises(ValueError):
        EditRequest(image_prompt, ())
    with pytest.raises(ValueError):
        EditRequest(image_prompt, (3,), lam=0.0)
    with pytest.raises(ValueError):
        EditRequest(image_prompt, (3,), position=99)


def test_value_optimization_requires_frozen_model(tiny_model, image_prompt):
    from mmtl.editing import EditError
    m = tiny_model.clone().requires_grad_(True)
    with pytest.raises(EditError):
        optimize_value(m, EditRequest(image_prompt, image_prompt.answer_tokens))


def test_finetune_zero_ball_leaves_model_unchanged(tiny_model, image_prompt):
    req = EditRequest(image_prompt, image_prompt.answer_tokens)
    tuned = baseline_finetune(tiny_model, req, constrained=True, delta=0.0, max_steps=3)
    for n in tiny_model.param_names():
        assert np.array_equal(tuned.params[n].data, tiny_model.params[n].data)


# -- on a trained model ----------------------------------------------------

@pytest.fixture(scope="module")
def trained(trained_small):
    return trained_small.model


@pytest.fixture(scope="module")
def fix_cases(small_world):
    return fix_suite(small_world, 10, layer=1, seed=0, n_unrelated=10)


def _confident_prompt(model, world):
    for f in world.single_facts("train"):
        p = make_prompt(world, f, world.templates_for(f.relation)[0], 1)
        if model.answer_prob(p, p.answer_tokens) > 0.97:
            return p
    pytest.fail("no confidently known fact")


def test_known_answer_needs_no_value_steps(trained, small_world):
    p = _confident_prompt(trained, small_world)
    req = EditRequest(p, p.answer_tokens, layer=1)
    _, loss, steps = optimize_value(trained, req)
    assert steps <= 1 and loss < 0.05
    edited, res = apply_edit(trained, req)
    assert res.weight_change < 1e-3


def test_value_optimization_raises_target_probability(trained, fix_cases):
    for c in fix_cases:
        before = trained.answer_prob(c.request.prompt, c.request.target)
        _, loss, steps = optimize_value(trained, c.request)
        assert math.exp(-loss) > before and steps <= c.request.max_steps


def test_keys_are_stable_across_images_of_an_entity(trained, small_world):
    f = small_world.single_facts("train")[0]
    tmpl = small_world.templates_for(f.relation)[0]
    a, b = (make_prompt(small_world, f, tmpl, s) for s in (1, 2))
    assert not np.array_equal(a.image, b.image)
    ka = extract_key(trained, a, 1, a.constraint_position)
    kb = extract_key(trained, b, 1, b.constraint_position)
    assert ka @ kb / np.linalg.norm(ka) / np.linalg.norm(kb) > 0.9


def test_fix_suite_shape(small_world, fix_cases):
    assert len(fix_cases) == 10
    for c in fix_cases:
        assert c.request.target != c.request.prompt.answer_tokens
        assert c.paraphrases and len(c.unrelated) == 10
    tail = longtail_suite(small_world)
    assert len(tail) == len(small_world.split("longtail"))
    assert all(c.request.target == c.request.prompt.answer_tokens for c in tail)


def test_multedit_edits_and_reports(trained, fix_cases):
    results = [run_case(trained, c) for c in fix_cases[:4]]
    s = summarize_results(results)
    assert s.efficacy > s.pre_efficacy
    body = json.loads(edit_report(fix_cases[0].request, results[0]))
    assert set(body) == {"request", "metrics", "specificity_drop"}
    assert body["request"]["layer"] == 1


def test_finetune_baselines(trained, fix_cases):
    case = fix_cases[0]
    free = baseline_finetune(trained, case.request)
    assert free.answer_prob(case.request.prompt, case.request.target) >= 0.8
    tight = baseline_finetune(trained, case.request, constrained=True, delta=1e-3)
    for n in trained.param_names():
        assert np.abs(tight.params[n].data - trained.params[n].data).max() <= 1e-3 + 1e-12


def test_layer_sweep_and_estimator(trained, fix_cases):
    table = layer_sweep(trained, fix_cases[:2], [0, 3])
    assert set(table) == {0, 3} and all(0.0 <= v <= 1.0 for v in table.values())
    est = MultEdit(layer=2, lam=0.1).fit(trained)
    c = fix_cases[0]
    edited, res = est.edit(c.request.prompt, c.request.target)
    assert res.value_steps >= 1 and est.get_params()["layer"] == 2
    with pytest.raises(ValueError):
        MultEdit(layer=9).fit(trained)
    req = replace(c.request, layer=2, lam=0.1)
    assert est.request(c.request.prompt, c.request.target) == req
