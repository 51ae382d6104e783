import dataclasses

import numpy as np
import pytest

from himemformer import tensor as T
from himemformer.config import toy_config
from himemformer.gradcheck import toy_problem
from himemformer.model import (
    ModelConfig,
    decode_coarse,
    decode_fine,
    encode_agent_long,
    enhance_with_context,
    forward_anticipate,
    init_params,
    one_hot,
    scene_target,
    total_loss,
)
from himemformer.streams import MemoryViews
from himemformer.tensor import Tape, Tensor, backward

TOY = toy_config().model


def loss_of(params, views, all_labels, target, la=1.0, lb=1.0):
    pred = forward_anticipate(views, params)
    coarse = pred.coarse.logits if pred.coarse is not None else None
    return total_loss(coarse, pred.logits, all_labels, target, la, lb)


def grads(params, views, all_labels, target, la, lb):
    params.zero_grad()
    with Tape() as tape:
        parts = loss_of(params, views, all_labels, target, la, lb)
    backward(parts.total, tape)
    return {name: p.grad.copy() for name, p in params.named_parameters()}


def test_toy_dimensions():
    assert (TOY.dim, TOY.long_tokens, TOY.short_tokens, TOY.anticipation_steps, TOY.num_classes,
            TOY.latent1, TOY.latent2) == (8, 8, 4, 2, 3, 4, 2)


def test_config_rejects_expanding_compression():
    with pytest.raises(ValueError):
        ModelConfig(latent1=2, latent2=4)


@pytest.mark.parametrize("n_l", [8, 64, 256])
def test_fixed_size_compression(n_l):
    params = init_params(TOY, seed=0)
    rng = np.random.default_rng(n_l)
    mask = np.ones(n_l, bool)
    out = encode_agent_long(rng.normal(size=(n_l, 8)), mask, params)
    assert out.shape == (TOY.latent2, TOY.dim)


def test_compression_cold_start_is_finite():
    params = init_params(TOY, seed=1)
    mem = np.zeros((8, 8))
    mem[-1] = np.random.default_rng(0).normal(size=8)
    mask = np.zeros(8, bool)
    mask[-1] = True
    assert np.isfinite(encode_agent_long(mem, mask, params).data).all()


def test_compression_purity():
    params = init_params(TOY, seed=2)
    mem = np.random.default_rng(1).normal(size=(8, 8))
    a = encode_agent_long(mem, np.ones(8, bool), params).data
    b = encode_agent_long(mem.copy(), np.ones(8, bool), params).data
    assert a.tobytes() == b.tobytes()
    zeros = encode_agent_long(np.zeros((8, 8)), np.ones(8, bool), params).data
    assert zeros.tobytes() == encode_agent_long(np.zeros((8, 8)), np.ones(8, bool), params).data.tobytes()


def test_enhance_shape_and_kv_permutation():
    params = init_params(TOY, seed=3)
    rng = np.random.default_rng(2)
    summary = rng.normal(size=(TOY.latent2, 8))
    ctx = rng.normal(size=(8, 8))
    mask = np.ones(8, bool)
    out = enhance_with_context(ctx, mask, Tensor(summary), params)
    assert out.shape == (8, 8)
    perm = enhance_with_context(ctx, mask, Tensor(summary[::-1].copy()), params)
    assert np.allclose(out.data, perm.data, atol=1e-12)


def test_enhance_gradient_reaches_queries_and_encoder():
    params, views, all_labels, target = toy_problem(seed=4)
    ctx = Tensor(views.long_context, requires_grad=True)
    params.zero_grad()
    with Tape() as tape:
        summary = encode_agent_long(views.long_agent, views.long_mask, params)
        out = enhance_with_context(ctx, views.long_mask, summary, params)
        w = np.random.default_rng(0).normal(size=out.shape)
        loss = T.sum_all(T.mul_const(out, w))
    backward(loss, tape)
    assert np.abs(ctx.grad).max() > 0
    assert np.abs(params.latent2.grad).max() > 0
    assert np.abs(params.compress1[0].cross_attn.w_v.grad).max() > 0
    err = T.finite_diff_check(
        lambda t: T.sum_all(T.mul_const(
            enhance_with_context(t, views.long_mask,
                                 encode_agent_long(views.long_agent, views.long_mask, params), params), w)),
        ctx)
    assert err < 1e-5


def test_coarse_and_fine_shapes():
    params, views, _, _ = toy_problem(seed=5)
    summary = encode_agent_long(views.long_agent, views.long_mask, params)
    enc = enhance_with_context(views.long_context, views.long_mask, summary, params)
    coarse = decode_coarse(views.short_context, views.short_mask, enc, params, views.long_mask)
    n_s, n_f, k1 = TOY.short_tokens, TOY.anticipation_steps, TOY.num_outputs
    assert coarse.tokens.shape == (n_s + n_f, 8)
    assert coarse.logits.shape == (n_f, k1)
    assert np.array_equal(coarse.future.data, coarse.tokens.data[n_s:])
    pred = decode_fine(views.short_agent, views.short_mask, coarse, params)
    assert pred.logits.shape == (n_f, k1)
    assert np.abs(pred.probs.sum(axis=-1) - 1).max() < 1e-9


def test_forward_deterministic_and_batched():
    params, views, _, _ = toy_problem(seed=6)
    a = forward_anticipate(views, params)
    b = forward_anticipate(views, params)
    assert a.logits.data.tobytes() == b.logits.data.tobytes()
    stacked = MemoryViews.stack([views, views])
    batched = forward_anticipate(stacked, params)
    assert batched.logits.shape == (2, TOY.anticipation_steps, TOY.num_outputs)
    assert np.allclose(batched.logits.data[1], a.logits.data, atol=1e-12)


def test_identical_agents_identical_predictions():
    params, views, _, _ = toy_problem(seed=7)
    twin = dataclasses.replace(views, short_agent=views.short_agent.copy())
    assert np.array_equal(forward_anticipate(views, params).probs, forward_anticipate(twin, params).probs)


def test_agent_short_memory_changes_prediction():
    params, views, _, _ = toy_problem(seed=8)
    other = dataclasses.replace(views, short_agent=views.short_agent + np.random.default_rng(1).normal(
        scale=0.5, size=views.short_agent.shape))
    diff = np.abs(forward_anticipate(views, params).probs - forward_anticipate(other, params).probs)
    assert diff.max() > 1e-6


def test_context_off_model():
    cfg = dataclasses.replace(TOY, use_context=False)
    params = init_params(cfg, seed=0)
    assert params.context_encoder == [] and params.coarse_decoder == []
    _, views, _, _ = toy_problem(seed=0)
    pred = forward_anticipate(views, params)
    assert pred.coarse is None
    assert pred.logits.shape == (TOY.anticipation_steps, TOY.num_outputs)
    names = [n for n, _ in params.named_parameters()]
    assert not any(n.startswith(("context_encoder", "coarse_decoder")) for n in names)


def test_unshared_classifier():
    cfg = dataclasses.replace(TOY, share_classifier=False)
    params = init_params(cfg, seed=0)
    assert params.coarse_classifier_w is not None
    _, views, all_labels, target = toy_problem(seed=0)
    g = grads(params, views, all_labels, target, 1.0, 0.0)
    assert np.abs(g["coarse_classifier_w"]).max() > 0
    assert not g["classifier_w"].any()


# losses


def test_one_hot_and_scene_target():
    assert np.array_equal(one_hot([1, 0], 3), [[0, 1, 0], [1, 0, 0]])
    tgt = scene_target(np.array([[2], [5]]), 6)
    assert np.allclose(tgt[0], [0, 0, 0.5, 0, 0, 0.5])
    same = scene_target(np.array([[3], [3]]), 6)
    assert np.array_equal(same[0], one_hot([3], 6)[0])


def test_labels_out_of_range():
    with pytest.raises(ValueError):
        one_hot([4], 4)
    with pytest.raises(ValueError):
        scene_target(np.array([[-1]]), 4)


def test_lambda_coarse_zero_is_fine_loss():
    params, views, all_labels, target = toy_problem(seed=9)
    parts = loss_of(params, views, all_labels, target, 0.0, 1.0)
    assert parts.total.item() == parts.fine.item()


def test_single_agent_targets_collapse():
    labels = np.array([1, 3])
    single = scene_target(labels[None, :], 4)
    assert np.abs(single - one_hot(labels, 4)).max() <= 1e-12
    params, views, _, _ = toy_problem(seed=10)
    pred = forward_anticipate(views, params)
    lab = np.array([2, 1])
    parts = total_loss(pred.coarse.logits, pred.logits, lab[None, :], lab, 1.0, 1.0)
    coarse_onehot = T.cross_entropy_soft(pred.coarse.logits, one_hot(lab, 4)).item()
    assert abs(parts.coarse.item() - coarse_onehot) <= 1e-12


@pytest.mark.parametrize("la,lb", [(0.3, 1.7), (2.0, 0.0), (0.0, 0.5), (1.0, 1.0)])
def test_loss_linearity(la, lb):
    params, views, all_labels, target = toy_problem(seed=11)
    total = loss_of(params, views, all_labels, target, la, lb).total.item()
    c = loss_of(params, views, all_labels, target, 1.0, 0.0).total.item()
    f = loss_of(params, views, all_labels, target, 0.0, 1.0).total.item()
    assert abs(total - (la * c + lb * f)) <= 1e-12


def test_fine_loss_is_mean_neg_log_prob():
    params, views, all_labels, target = toy_problem(seed=12)
    pred = forward_anticipate(views, params)
    parts = total_loss(pred.coarse.logits, pred.logits, all_labels, target)
    ref = -np.mean(np.log(pred.probs[np.arange(len(target)), target]))
    assert abs(parts.fine.item() - ref) < 1e-12
    assert parts.fine.item() >= 0 and parts.coarse.item() >= 0


def test_supervision_separation():
    params, views, all_labels, target = toy_problem(seed=13)
    coarse_only = grads(params, views, all_labels, target, 1.0, 0.0)
    fine_only_names = [n for n in coarse_only if n.startswith("fine_decoder")]
    assert fine_only_names
    for n in fine_only_names:
        assert not coarse_only[n].any(), n
    assert np.abs(coarse_only["future_queries"]).max() > 0
    fine_only = grads(params, views, all_labels, target, 0.0, 1.0)
    for prefix in ("compress1", "compress2", "latent1", "latent2", "context_encoder", "coarse_decoder",
                   "future_queries"):
        total = sum(np.abs(g).sum() for n, g in fine_only.items() if n.startswith(prefix))
        assert total > 0, prefix


def test_future_query_gradient_matches_fd_with_coarse_only():
    params, views, all_labels, target = toy_problem(seed=14)
    g = grads(params, views, all_labels, target, 1.0, 0.0)["future_queries"]
    err = T.finite_diff_check(lambda _: loss_of(params, views, all_labels, target, 1.0, 0.0).total,
                              params.future_queries, analytic=g)
    assert np.abs(g).max() > 1e-6
    assert err < 1e-4


def test_anticipation_step_count():
    for tau, f in ((2.0, 4.0), (1.0, 1.0), (2.0, 1.0)):
        cfg = toy_config(horizon=tau, frame_rate=f, long_span=8.0 / f * 1, short_span=4.0 / f)
        assert cfg.model.anticipation_steps == round(tau * f)
        params = init_params(cfg.model, seed=0)
        mc = cfg.model
        views = MemoryViews(np.zeros((mc.long_tokens, 8)), np.zeros((mc.long_tokens, 8)),
                            np.zeros((mc.short_tokens, 8)), np.zeros((mc.short_tokens, 8)),
                            np.ones(mc.long_tokens, bool), np.ones(mc.short_tokens, bool))
        assert forward_anticipate(views, params).probs.shape[0] == round(tau * f)
