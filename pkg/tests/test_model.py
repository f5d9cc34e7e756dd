import numpy as np
import pytest

from mmtl import numerics as nx
from mmtl.model import Intervention, ModelConfig, MultiModalLM, PromptSpec
from mmtl.training import default_model_config
from conftest import TINY, randomized


def test_config_round_trip_and_validation():
    cfg = ModelConfig(vocab_size=20, n_layers=2, n_heads=2, d_model=8, d_mlp=16)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=20, n_heads=3, d_model=8)


def test_parameter_order_is_canonical(tiny_model):
    names = tiny_model.param_names()
    assert names[:5] == ["vision.W", "proj.W", "vision.pos", "tok_emb", "text_pos"]
    assert names[-4:] == ["ln_f.g", "ln_f.b", "unembed.W", "unembed.b"]
    assert names.index("blocks.0.mlp.b_proj") < names.index("blocks.1.ln1.g")


def test_forward_is_deterministic(tiny_model, image_prompt):
    a, _ = tiny_model.forward(image_prompt)
    b, _ = tiny_model.forward(image_prompt)
    assert np.array_equal(a, b)


def test_zero_image_gives_zero_visual_tokens(tiny_model):
    params = tiny_model.state_dict()
    params["vision.pos"][:] = 0.0
    m = MultiModalLM(tiny_model.config, params)
    img = np.zeros((m.config.n_visual, m.config.patch_dim))
    assert np.all(m.encode_and_project(img).data == 0.0)


def test_causality(tiny_model, image_prompt):
    logits, _ = tiny_model.forward(image_prompt)
    toks = list(image_prompt.question_tokens)
    toks[-1] = (toks[-1] + 1) % tiny_model.config.vocab_size
    changed, _ = tiny_model.forward(image_prompt.replace(question_tokens=tuple(toks)))
    assert np.array_equal(logits[:-1], changed[:-1])
    assert not np.array_equal(logits[-1], changed[-1])


def test_attention_rows_are_causal_distributions(tiny_model, image_prompt):
    _, cache = tiny_model.forward(image_prompt, cache=True)
    a = cache.attn_pattern
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)
    t = a.shape[-1]
    assert np.all(a[..., np.triu_indices(t, 1)[0], np.triu_indices(t, 1)[1]] == 0.0)


def test_residual_stream_decomposes(tiny_model, image_prompt):
    _, cache = tiny_model.forward(image_prompt, cache=True)
    prev = cache.embedding
    for l in range(tiny_model.config.n_layers):
        np.testing.assert_allclose(cache.hidden_out[l], prev + cache.attn_out[l] + cache.mlp_out[l], atol=1e-12)
        prev = cache.hidden_out[l]


def test_restoring_clean_values_is_bitwise_noop(tiny_model, image_prompt):
    logits, cache = tiny_model.forward(image_prompt, cache=True)
    pos = range(image_prompt.seq_len)
    for site in ("attn_out", "mlp_out", "hidden"):
        iv = Intervention.restore(site, [1], pos, cache)
        patched, _ = tiny_model.forward(image_prompt, [iv])
        assert np.array_equal(patched, logits)


def test_full_hidden_substitution_reproduces_clean(tiny_model, image_prompt):
    logits, cache = tiny_model.forward(image_prompt, cache=True)
    other = image_prompt.replace(image=image_prompt.image[::-1].copy())
    iv = Intervention.restore("hidden", [tiny_model.config.n_layers - 1], range(image_prompt.seq_len), cache)
    patched, _ = tiny_model.forward(other, [iv])
    assert np.array_equal(patched, logits)


def test_batch_matches_single(tiny_model, small_world):
    from mmtl.world import make_prompt
    facts = small_world.single_facts("train")[:4]
    prompts = [make_prompt(small_world, f, small_world.templates_for(f.relation)[i % 3], i)
               for i, f in enumerate(facts)]
    batch = tiny_model.batch_logits(prompts)
    for p, lg in zip(prompts, batch):
        np.testing.assert_allclose(lg, tiny_model.forward(p)[0], atol=1e-10)
    gens = tiny_model.batch_generate(prompts, max_new=2)
    assert gens == [tiny_model.generate_greedy(p, max_new=2) for p in prompts]


def test_start_layer_resumes_the_run(tiny_model, image_prompt):
    x, _ = tiny_model.embed_batch([image_prompt])
    record = {}
    with nx.no_grad():
        full = tiny_model.run(x, record=record).data
        resumed = tiny_model.run(nx.Tensor(record["hidden_out"][0]), start_layer=1).data
    np.testing.assert_allclose(resumed, full, atol=1e-12)


def test_noise_intervention_is_seeded(tiny_model, image_prompt):
    iv = Intervention.noise("embedding", [0, 1], 0.5, seed=4)
    a, _ = tiny_model.forward(image_prompt, [iv])
    b, _ = tiny_model.forward(image_prompt, [iv])
    c, _ = tiny_model.forward(image_prompt)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_answer_prob_is_product_of_next_token_probs(tiny_model, image_prompt):
    ans = image_prompt.answer_tokens
    p = tiny_model.answer_prob(image_prompt, ans)
    assert p == pytest.approx(tiny_model.next_token_probs(image_prompt)[ans[0]], rel=1e-12)


@pytest.mark.parametrize("bad", ["image", "token", "length", "layer"])
def test_invalid_inputs_raise(tiny_model, image_prompt, bad):
    with pytest.raises(ValueError):
        if bad == "image":
            tiny_model.forward(image_prompt.replace(image=np.zeros((3, 3))))
        elif bad == "token":
            tiny_model.forward(image_prompt.replace(question_tokens=(10_000,)))
        elif bad == "length":
            tiny_model.forward(image_prompt.replace(question_tokens=(3,) * 40, visual_constraint_span=None,
                                                    text_constraint_span=None))
        else:
            tiny_model.forward(image_prompt, [Intervention.replace("mlp_out", [99], [0], np.zeros(16))])


def test_prompt_spec_validation():
    with pytest.raises(ValueError):
        PromptSpec(None, (1, 2, 3), visual_constraint_span=(1, 5))
    with pytest.raises(ValueError):
        PromptSpec(None, (1, 2, 3), visual_constraint_span=(0, 2), text_constraint_span=(1, 3))
    p = PromptSpec(np.zeros((4, 2)), (5, 6, 7), visual_constraint_span=(0, 2))
    assert p.constraint_position == 5 and p.last_position == 6


def test_text_only_twin_has_no_visual_parameters_in_use(small_world):
    m = randomized(MultiModalLM(default_model_config(small_world, text_only=True, **TINY)))
    p = PromptSpec(None, small_world.encode(["what", "is", "the"]))
    logits, _ = m.forward(p)
    assert logits.shape == (3, small_world.vocab_size)
