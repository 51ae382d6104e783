"""The hierarchical memory-aware anticipation network.

Data flow for one target agent at one stream time::

    agent long memory  --compress x2-->  latent agent summary
    context long memory (+pos) attends over the summary  -> encoded long memory
    [context short (+pos); future queries] attends over encoded long  -> coarse
    [agent short (+pos); refined future queries] attends over coarse  -> fine

Coarse logits are supervised with every agent's labels, fine logits with the
target agent's. With ``use_context=False`` the context encoder and coarse
stage are dropped and the fine stage attends the agent summary directly.

All functions accept arbitrary leading batch dims on the memory arrays.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .blocks import DecoderUnitParams, PositionalTable, decoder_stack, init_decoder_unit, positional_add
from .streams import MemoryViews
from .tensor import (
    Tensor,
    add,
    concat_tokens,
    cross_entropy_soft,
    expand_leading,
    matmul,
    scale,
    slice_tokens,
    tensor_create,
)


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    heads: int = 4
    units_per_stage: int = 2
    ffn_dim: int = 256
    latent1: int = 16
    latent2: int = 8
    num_classes: int = 10
    anticipation_steps: int = 8
    long_tokens: int = 64
    short_tokens: int = 20
    use_context: bool = True
    share_classifier: bool = True
    eps: float = 1e-5

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not self.latent2 <= self.latent1:
            raise ValueError("second compression stage may not expand (latent2 <= latent1)")
        if self.anticipation_steps < 1 or self.num_classes < 1:
            raise ValueError("need at least one anticipation step and one action class")

    @property
    def num_outputs(self) -> int:
        return self.num_classes + 1


@dataclass
class HiMemFormerParams:
    compress1: list[DecoderUnitParams]
    latent1: Tensor
    compress2: list[DecoderUnitParams]
    latent2: Tensor
    context_encoder: list[DecoderUnitParams]
    coarse_decoder: list[DecoderUnitParams]
    fine_decoder: list[DecoderUnitParams]
    future_queries: Tensor
    classifier_w: Tensor
    classifier_b: Tensor
    coarse_classifier_w: Tensor | None = None
    coarse_classifier_b: Tensor | None = None
    config: ModelConfig = field(default_factory=ModelConfig, compare=False)
    positions: PositionalTable | None = field(default=None, compare=False, repr=False)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from _walk(self, "")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _walk(obj, prefix: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}")
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, (ModelConfig, PositionalTable)):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if val is None:
                continue
            yield from _walk(val, f"{prefix}.{f.name}" if prefix else f.name)


def init_params(config: ModelConfig, seed: int = 0) -> HiMemFormerParams:
    rng = np.random.default_rng(seed)
    c = config

    def stack(n):
        return [init_decoder_unit(c.dim, c.heads, c.ffn_dim, rng) for _ in range(n)]

    def tokens(n):
        return tensor_create((n, c.dim), "uniform", low=-0.5, high=0.5, rng=rng, requires_grad=True)

    units = c.units_per_stage
    compress1, latent1 = stack(units), tokens(c.latent1)
    compress2, latent2 = stack(units), tokens(c.latent2)
    context_encoder = stack(units) if c.use_context else []
    coarse_decoder = stack(units) if c.use_context else []
    fine_decoder = stack(units)
    future = tokens(c.anticipation_steps)
    cls_w = tensor_create((c.dim, c.num_outputs), "xavier", rng=rng, requires_grad=True)
    cls_b = tensor_create((c.num_outputs,), "zeros", requires_grad=True)
    coarse_w = coarse_b = None
    if c.use_context and not c.share_classifier:
        coarse_w = tensor_create((c.dim, c.num_outputs), "xavier", rng=rng, requires_grad=True)
        coarse_b = tensor_create((c.num_outputs,), "zeros", requires_grad=True)
    return HiMemFormerParams(
        compress1, latent1, compress2, latent2, context_encoder, coarse_decoder,
        fine_decoder, future, cls_w, cls_b, coarse_w, coarse_b, config=c,
        positions=positional_table(c),
    )


def positional_table(config: ModelConfig) -> PositionalTable:
    return PositionalTable.build(max(config.long_tokens, config.short_tokens, 1), config.dim)


@dataclass
class CoarseOutput:
    tokens: Tensor
    future: Tensor
    logits: Tensor


@dataclass
class Prediction:
    logits: Tensor
    probs: np.ndarray
    coarse: CoarseOutput | None


def _lead(x: np.ndarray) -> tuple[int, ...]:
    return x.shape[:-2]


def _positions(params: HiMemFormerParams) -> PositionalTable:
    if params.positions is None:
        params.positions = positional_table(params.config)
    return params.positions


def classify(tokens: Tensor, params: HiMemFormerParams, coarse: bool = False) -> Tensor:
    if coarse and params.coarse_classifier_w is not None:
        return add(matmul(tokens, params.coarse_classifier_w), params.coarse_classifier_b)
    return add(matmul(tokens, params.classifier_w), params.classifier_b)


def encode_agent_long(long_agent, long_mask, params: HiMemFormerParams) -> Tensor:
    """Two-stage compression to a fixed ``latent2`` token summary."""
    mem = long_agent if isinstance(long_agent, Tensor) else Tensor(long_agent)
    lead = mem.shape[:-2]
    eps = params.config.eps
    q1 = expand_leading(params.latent1, lead)
    stage1 = decoder_stack(q1, mem, params.compress1, memory_mask=long_mask, eps=eps)
    q2 = expand_leading(params.latent2, lead)
    return decoder_stack(q2, stage1, params.compress2, eps=eps)


def enhance_with_context(long_context, long_mask, agent_summary: Tensor,
                         params: HiMemFormerParams) -> Tensor:
    """Context long memory (with positions) queries the agent summary."""
    ctx = long_context if isinstance(long_context, Tensor) else Tensor(long_context)
    queries = positional_add(ctx, _positions(params))
    return decoder_stack(queries, agent_summary, params.context_encoder,
                         query_mask=long_mask, eps=params.config.eps)


def _with_future(short_tokens: Tensor, short_mask, future: Tensor, params):
    n_f = future.shape[-2]
    queries = concat_tokens(positional_add(short_tokens, _positions(params)), future)
    mask = None
    if short_mask is not None:
        short_mask = np.asarray(short_mask, dtype=bool)
        mask = np.concatenate([short_mask, np.ones(short_mask.shape[:-1] + (n_f,), bool)], axis=-1)
    return queries, mask


def decode_coarse(short_context, short_mask, encoded_long: Tensor, params: HiMemFormerParams,
                  long_mask=None) -> CoarseOutput:
    sc = short_context if isinstance(short_context, Tensor) else Tensor(short_context)
    lead = sc.shape[:-2]
    future = expand_leading(params.future_queries, lead)
    queries, qmask = _with_future(sc, short_mask, future, params)
    tokens = decoder_stack(queries, encoded_long, params.coarse_decoder,
                           query_mask=qmask, memory_mask=long_mask, eps=params.config.eps)
    n = tokens.shape[-2]
    refined = slice_tokens(tokens, n - future.shape[-2], n)
    return CoarseOutput(tokens, refined, classify(refined, params, coarse=True))


def decode_fine(short_agent, short_mask, coarse: CoarseOutput, params: HiMemFormerParams) -> Prediction:
    sa = short_agent if isinstance(short_agent, Tensor) else Tensor(short_agent)
    queries, qmask = _with_future(sa, short_mask, coarse.future, params)
    tokens = decoder_stack(queries, coarse.tokens, params.fine_decoder,
                           query_mask=qmask, eps=params.config.eps)
    return _predict(tokens, params, coarse)


def _predict(tokens: Tensor, params, coarse) -> Prediction:
    n = tokens.shape[-2]
    n_f = params.config.anticipation_steps
    logits = classify(slice_tokens(tokens, n - n_f, n), params)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return Prediction(logits, e / e.sum(axis=-1, keepdims=True), coarse)


def decode_agent_only(short_agent, short_mask, agent_summary: Tensor, params) -> Prediction:
    """Context-free path: the fine stage attends the agent summary directly."""
    sa = short_agent if isinstance(short_agent, Tensor) else Tensor(short_agent)
    future = expand_leading(params.future_queries, sa.shape[:-2])
    queries, qmask = _with_future(sa, short_mask, future, params)
    tokens = decoder_stack(queries, agent_summary, params.fine_decoder,
                           query_mask=qmask, eps=params.config.eps)
    return _predict(tokens, params, None)


def forward_anticipate(views: MemoryViews, params: HiMemFormerParams) -> Prediction:
    summary = encode_agent_long(views.long_agent, views.long_mask, params)
    if not params.config.use_context:
        return decode_agent_only(views.short_agent, views.short_mask, summary, params)
    encoded = enhance_with_context(views.long_context, views.long_mask, summary, params)
    coarse = decode_coarse(views.short_context, views.short_mask, encoded, params,
                           long_mask=views.long_mask)
    return decode_fine(views.short_agent, views.short_mask, coarse, params)


# --------------------------------------------------------------------------
# losses


def one_hot(labels, num_outputs: int) -> np.ndarray:
    labels = np.asarray(labels)
    _check_labels(labels, num_outputs)
    return np.eye(num_outputs)[labels]


def scene_target(all_labels, num_outputs: int) -> np.ndarray:
    """Normalized multi-hot over the agents' labels at each step.

    ``all_labels`` has shape ``[..., A, N_F]``; result ``[..., N_F, K+1]``.
    Duplicate labels count once.
    """
    all_labels = np.asarray(all_labels)
    _check_labels(all_labels, num_outputs)
    hot = (np.eye(num_outputs)[all_labels] > 0).any(axis=-3).astype(np.float64)
    return hot / hot.sum(axis=-1, keepdims=True)


def _check_labels(labels: np.ndarray, num_outputs: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= num_outputs):
        raise ValueError(f"labels must lie in 0..{num_outputs - 1}")


@dataclass
class LossParts:
    total: Tensor
    coarse: Tensor | None
    fine: Tensor


def total_loss(coarse_logits: Tensor | None, fine_logits: Tensor, all_agent_labels,
               target_labels, lambda_coarse: float = 1.0, lambda_fine: float = 1.0) -> LossParts:
    """Weighted sum of the scene-level (coarse) and target-agent (fine) cross entropies."""
    k1 = fine_logits.shape[-1]
    fine = cross_entropy_soft(fine_logits, one_hot(target_labels, k1))
    total = scale(fine, lambda_fine)
    coarse = None
    if coarse_logits is not None:
        coarse = cross_entropy_soft(coarse_logits, scene_target(all_agent_labels, k1))
        if lambda_coarse != 0.0:
            total = add(scale(coarse, lambda_coarse), total)
    return LossParts(total, coarse, fine)
