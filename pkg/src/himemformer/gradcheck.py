"""Finite-difference checks of every primitive, the transformer blocks and the
full model at toy size."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .blocks import decoder_unit, init_attention, init_decoder_unit, multi_head_attention
from .config import Config, toy_config
from .model import forward_anticipate, init_params, total_loss
from .streams import MemoryViews


def _rand(rng, *shape):
    return T.Tensor(rng.normal(size=shape), requires_grad=True)


def primitive_checks(seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    fd = T.finite_diff_check
    out = {}
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    out["matmul"] = max(fd(lambda x: _wsum(T.matmul(x, b), w), a, h),
                        fd(lambda x: _wsum(T.matmul(a, x), w), b, h))
    x = _rand(rng, 2, 3, 4)
    y = _rand(rng, 2, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    out["bmm"] = max(fd(lambda t: _wsum(T.bmm(t, y), w), x, h), fd(lambda t: _wsum(T.bmm(x, t), w), y, h))
    v = _rand(rng, 5)
    w = rng.normal(size=5)
    out["softmax"] = fd(lambda t: _wsum(T.softmax_lastdim(t), w), v, h)
    x, g, bb = _rand(rng, 2, 8), _rand(rng, 8), _rand(rng, 8)
    w = rng.normal(size=(2, 8))
    out["layer_norm"] = max(fd(lambda t: _wsum(T.layer_norm(t, g, bb), w), x, h),
                            fd(lambda t: _wsum(T.layer_norm(x, t, bb), w), g, h),
                            fd(lambda t: _wsum(T.layer_norm(x, g, t), w), bb, h))
    x = _rand(rng, 3, 4)
    w = rng.normal(size=(3, 4))
    out["gelu"] = fd(lambda t: _wsum(T.gelu(t), w), x, h)
    p, q = _rand(rng, 2, 3), _rand(rng, 3, 3)
    w = rng.normal(size=(5, 3))
    out["concat"] = max(fd(lambda t: _wsum(T.concat_tokens(t, q), w), p, h),
                        fd(lambda t: _wsum(T.concat_tokens(p, t), w), q, h))
    logits = _rand(rng, 4, 5)
    target = rng.dirichlet(np.ones(5), size=4)
    out["cross_entropy"] = fd(lambda t: T.cross_entropy_soft(t, target), logits, h)
    return out


def _wsum(t: T.Tensor, w: np.ndarray) -> T.Tensor:
    """Random linear functional of ``t`` so every output entry matters."""
    return T.sum_all(T.mul_const(t, w))


def block_checks(seed: int = 0, dim: int = 8, heads: int = 2, h: float = 1e-5) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    out = {}
    q, kv = _rand(rng, 3, dim), _rand(rng, 5, dim)
    mask = np.array([True, True, False, True, True])
    attn = init_attention(dim, heads, rng)
    w = rng.normal(size=(3, dim))
    f = lambda _: _wsum(multi_head_attention(q, kv, attn, mask), w)
    out["attention"] = max(T.finite_diff_check(f, t, h) for t in (q, kv, attn.w_q, attn.w_k, attn.w_v, attn.w_o))
    unit = init_decoder_unit(dim, heads, 4 * dim, rng)
    for t in (unit.ln1_bias, unit.ln2_bias, unit.ln3_bias, unit.ffn_b1, unit.ffn_b2):
        t.data[:] = rng.normal(scale=0.1, size=t.shape)
    f = lambda _: _wsum(decoder_unit(q, kv, unit, memory_mask=mask), w)
    tensors = [q, kv] + list(_unit_tensors(unit))
    out["decoder_unit"] = max(T.finite_diff_check(f, t, h) for t in tensors)
    return out


def _unit_tensors(unit):
    for a in (unit.self_attn, unit.cross_attn):
        yield from (a.w_q, a.w_k, a.w_v, a.w_o)
    yield from (unit.ffn_w1, unit.ffn_b1, unit.ffn_w2, unit.ffn_b2, unit.ln1_gain, unit.ln1_bias,
                unit.ln2_gain, unit.ln2_bias, unit.ln3_gain, unit.ln3_bias)


def toy_problem(cfg: Config | None = None, seed: int = 0):
    """Random views, labels and fresh params at toy size (2 agents in scene)."""
    cfg = cfg or toy_config()
    mc = cfg.model
    rng = np.random.default_rng([seed, 5])
    d, n_l, n_s, n_f = mc.dim, mc.long_tokens, mc.short_tokens, mc.anticipation_steps
    long_mask = np.ones(n_l, bool)
    long_mask[: n_l // 4] = False
    short_mask = np.ones(n_s, bool)
    views = MemoryViews(rng.normal(size=(n_l, d)), rng.normal(size=(n_l, d)),
                        rng.normal(size=(n_s, d)), rng.normal(size=(n_s, d)), long_mask, short_mask)
    all_labels = rng.integers(0, mc.num_outputs, size=(2, n_f))
    params = init_params(mc, seed=seed)
    return params, views, all_labels, all_labels[0]


def model_checks(seed: int = 0, h: float = 1e-5, cfg: Config | None = None,
                 lambda_coarse: float = 1.0, lambda_fine: float = 1.0) -> "OrderedDict[str, float]":
    """Max relative error per parameter tensor of the end-to-end loss."""
    params, views, all_labels, target = toy_problem(cfg, seed)

    def loss():
        pred = forward_anticipate(views, params)
        coarse = pred.coarse.logits if pred.coarse is not None else None
        return total_loss(coarse, pred.logits, all_labels, target, lambda_coarse, lambda_fine).total

    T.grad_of(loss, params.parameters())
    errors = OrderedDict()
    for name, p in params.named_parameters():
        errors[name] = T.finite_diff_check(lambda _: loss(), p, h, analytic=p.grad.copy())
    return errors


def stage_of(name: str) -> str:
    return name.split(".", 1)[0]


def run_suite(seed: int = 0) -> "OrderedDict[str, float]":
    """Max relative error per block: primitives, blocks, then model stages."""
    report = OrderedDict()
    report.update(primitive_checks(seed))
    report.update(block_checks(seed))
    for name, err in model_checks(seed).items():
        key = f"model.{stage_of(name)}"
        report[key] = max(report.get(key, 0.0), err)
    return report
