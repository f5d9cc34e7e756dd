import numpy as np
import pytest

from mmtl.model import Intervention
from mmtl.tracing import (CausalTracer, Corruption, CorruptionSpec, MarginError, TraceError, TraceGrid,
                          build_corrupted, full_restore_logits, min_causal_window, run_trace, summarize,
                          trace_joint, trace_multiconstraint)
from mmtl.world import make_prompt


def _replace(world, prompt, model=None):
    return build_corrupted(prompt, CorruptionSpec("token_replace", seed=1), world, model)


def test_identity_corruption_has_no_effect(tiny_model, image_prompt):
    for site in ("mlp", "attn", "hidden"):
        grid = run_trace(tiny_model, image_prompt, Corruption.identity(image_prompt), site, window=2)
        assert np.abs(grid.iee).max() < 1e-10
        assert grid.p_clean == grid.p_corr


def test_full_hidden_restore_is_bitwise(tiny_model, small_world, image_prompt):
    for corr in (_replace(small_world, image_prompt),
                 build_corrupted(image_prompt, CorruptionSpec("gaussian_embed"), small_world, tiny_model)):
        clean, restored = full_restore_logits(tiny_model, image_prompt, corr)
        assert np.array_equal(clean, restored)
        grid = run_trace(tiny_model, image_prompt, corr, "mlp", 1)
        assert grid.metadata["p_full_restore"] == grid.p_clean


def test_cells_match_explicit_interventions(tiny_model, small_world, image_prompt):
    corr = _replace(small_world, image_prompt)
    grid = run_trace(tiny_model, image_prompt, corr, "mlp", window=2)
    _, cache = tiny_model.forward(image_prompt, cache=True, extra_tokens=image_prompt.answer_tokens[:-1])
    L = tiny_model.config.n_layers
    for k, l in [(0, 0), (image_prompt.constraint_position, 1), (image_prompt.last_position, L - 1)]:
        layers = list(range(l, min(l + 2, L)))
        iv = Intervention.restore("mlp_out", layers, [k], cache)
        p = tiny_model.answer_prob(corr.prompt, image_prompt.answer_tokens, [iv])
        assert grid.iee[k, l] == pytest.approx(p - grid.p_corr, abs=1e-12)


def test_token_replace_changes_only_the_span(small_world, image_prompt):
    corr = _replace(small_world, image_prompt)
    a, b = image_prompt.question_tokens, corr.prompt.question_tokens
    s = image_prompt.visual_constraint_span
    assert a[:s[0]] == b[:s[0]] and a[s[1]:] == b[s[1]:] and a[s[0]:s[1]] != b[s[0]:s[1]]
    assert np.array_equal(corr.prompt.image, image_prompt.image)
    assert corr.distractor_answer != image_prompt.answer_tokens


def test_gaussian_corruption_targets_image_and_constraint(tiny_model, small_world, image_prompt):
    corr = build_corrupted(image_prompt, CorruptionSpec("gaussian_embed", noise_std=0.5), small_world)
    (iv,) = corr.interventions
    expected = list(range(image_prompt.n_visual)) + image_prompt.span_positions("visual")
    assert list(iv.positions) == expected and iv.site == "embedding"
    with pytest.raises(TraceError):
        build_corrupted(image_prompt, CorruptionSpec("gaussian_embed"), small_world)


def test_year_corruption(small_world, tiny_model):
    f = small_world.multi_facts("train")[0]
    p = make_prompt(small_world, f, small_world.templates_for(f.relation)[0], 0)
    grid = trace_multiconstraint(tiny_model, p, 2, small_world)
    assert grid.metadata["text_constraint_position"] == p.text_constraint_position
    with pytest.raises(TraceError):
        trace_multiconstraint(tiny_model, make_prompt(small_world, small_world.single_facts()[0],
                                                      small_world.templates[0], 0), 2, small_world)


def test_grid_files_round_trip(tiny_model, small_world, image_prompt):
    grid = run_trace(tiny_model, image_prompt, _replace(small_world, image_prompt), "attn", 3)
    again = TraceGrid.from_files(grid.to_json(), grid.to_csv())
    assert np.array_equal(again.iee, grid.iee)
    assert again.p_clean == grid.p_clean and again.window == 3
    assert again.to_csv() == grid.to_csv()


@pytest.mark.parametrize("kw", [dict(site="resid"), dict(window=0), dict(window=99)])
def test_invalid_trace_arguments(tiny_model, image_prompt, kw):
    with pytest.raises(TraceError):
        run_trace(tiny_model, image_prompt, Corruption.identity(image_prompt), **kw)


def test_margin_error_on_identity(tiny_model, image_prompt):
    with pytest.raises(MarginError):
        min_causal_window(tiny_model, image_prompt, Corruption.identity(image_prompt))


def test_summary_thirds_and_argmax(tiny_model, small_world):
    facts = small_world.single_facts("train")[:3]
    prompts = [make_prompt(small_world, f, small_world.templates_for(f.relation)[0], 0) for f in facts]
    tracer = CausalTracer(site="mlp", window=1, seed=2).fit(tiny_model, small_world)
    grids = tracer.transform(prompts)
    s = summarize(grids)
    assert s.constraint.shape == (tiny_model.config.n_layers,)
    early, late = s.thirds()
    assert early == pytest.approx(s.constraint[0]) and late == pytest.approx(s.constraint[-1])
    assert set(s.argmax_layers()) == {"constraint", "last", "last_visual"}
    assert s.to_csv().splitlines()[0] == "layer,constraint,last,last_visual"


def test_trained_model_localizes_recovery(trained_small, small_world):
    model = trained_small.model
    f = small_world.single_facts("train")[1]
    p = make_prompt(small_world, f, small_world.templates_for(f.relation)[0], 0)
    corr = _replace(small_world, p)
    grid = run_trace(model, p, corr, "hidden", 1)
    assert grid.p_clean > 0.5 and grid.p_corr < grid.p_clean
    w = min_causal_window(model, p, corr, "hidden", margin=0.0)
    assert w is not None and 1 <= w <= model.config.n_layers


def test_joint_restore_matches_single_cell_and_full_restore(tiny_model, small_world, image_prompt):
    corr = _replace(small_world, image_prompt)
    c = image_prompt.constraint_position
    grid = run_trace(tiny_model, image_prompt, corr, "mlp", 2)
    np.testing.assert_allclose(trace_joint(tiny_model, image_prompt, corr, [c], "mlp", 2), grid.iee[c], atol=1e-12)
    every = trace_joint(tiny_model, image_prompt, corr, range(image_prompt.seq_len), "hidden", 1)
    assert every[0] == pytest.approx(grid.p_clean - grid.p_corr, abs=1e-12)
    with pytest.raises(TraceError):
        trace_joint(tiny_model, image_prompt, corr, [])
