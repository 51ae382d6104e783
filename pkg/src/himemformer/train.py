"""AdamW with linear warmup, anchor sampling, the training loop and HMF1
checkpoints."""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config, parse_config, serialize_config
from .model import HiMemFormerParams, forward_anticipate, init_params, total_loss
from .streams import MemoryViews, StreamConfig, views_at
from .synthetic import Episode
from .tensor import ShapeError, Tape, backward

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


def adamw_step(named_params, state: OptimState, lr: float) -> None:
    """One AdamW update in place. ``named_params`` yields ``(name, tensor)``
    with gradients in ``tensor.grad``. Weight decay is decoupled and applied
    before the moment update."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in named_params:
        g = p.grad
        if g is None or g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name} missing or misshapen")
        m = state.first.get(name)
        if m is None:
            m = state.first[name] = np.zeros_like(p.data)
            state.second[name] = np.zeros_like(p.data)
        v = state.second[name]
        if m.shape != p.data.shape:
            raise ShapeError(f"optimizer state for {name} has shape {m.shape}, param {p.data.shape}")
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class Schedule:
    peak: float = 7e-5
    warmup_steps: int = 0


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear ramp from 0 at step 0 to ``peak`` at ``warmup_steps``, then flat."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if schedule.warmup_steps <= 0 or step >= schedule.warmup_steps:
        return schedule.peak
    return schedule.peak * step / schedule.warmup_steps


# --------------------------------------------------------------------------
# batching


def check_compatible(episodes: list[Episode], cfg: Config) -> None:
    if not episodes:
        raise DataError("dataset is empty")
    for i, ep in enumerate(episodes):
        if ep.feature_dim != cfg.dim:
            raise DataError(f"episode {i}: feature dim {ep.feature_dim} != config dim {cfg.dim}")
        if ep.num_classes and ep.num_classes != cfg.num_classes:
            raise DataError(f"episode {i}: K={ep.num_classes} in data but K={cfg.num_classes} in config")
        if ep.labels.max() > cfg.num_classes:
            raise DataError(f"episode {i}: label {ep.labels.max()} exceeds K={cfg.num_classes}")


def valid_anchors(ep: Episode, steps: int) -> np.ndarray:
    """Newest-frame indices whose next ``steps`` labels exist."""
    return np.arange(0, max(ep.frames - steps, 0))


@dataclass
class Batch:
    views: MemoryViews
    all_labels: np.ndarray
    target_labels: np.ndarray


def make_batch(episodes: list[Episode], picks, stream: StreamConfig) -> Batch:
    """``picks`` is a list of ``(episode index, agent, newest frame)``."""
    n_f = stream.anticipation_steps
    views, all_l, tgt = [], [], []
    max_agents = max(episodes[e].num_agents for e, _, _ in picks)
    for e, a, now in picks:
        ep = episodes[e]
        views.append(views_at(ep.agent_features[a], ep.context_features, now, stream))
        fut = ep.labels[:, now + 1: now + 1 + n_f]
        # repeating the target row is a no-op for the set-valued scene target
        pad = np.repeat(fut[a:a + 1], max_agents - ep.num_agents, axis=0)
        all_l.append(np.concatenate([fut, pad]))
        tgt.append(fut[a])
    return Batch(MemoryViews.stack(views), np.stack(all_l), np.stack(tgt))


def sample_anchors(episodes: list[Episode], cfg: Config, rng: np.random.Generator):
    n_f = cfg.stream.anticipation_steps
    picks = []
    for e, ep in enumerate(episodes):
        anchors = valid_anchors(ep, n_f)
        if anchors.size == 0:
            continue
        nows = rng.choice(anchors, size=cfg.anchors_per_episode)
        agents = rng.integers(0, ep.num_agents, size=cfg.anchors_per_episode)
        picks.extend((e, int(a), int(t)) for a, t in zip(agents, nows))
    order = rng.permutation(len(picks))
    return [picks[i] for i in order]


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: HiMemFormerParams
    config: Config
    curve: list[tuple[int, float, float, float]]


def loss_on_batch(params: HiMemFormerParams, batch: Batch, cfg: Config):
    pred = forward_anticipate(batch.views, params)
    coarse = pred.coarse.logits if pred.coarse is not None else None
    return total_loss(coarse, pred.logits, batch.all_labels, batch.target_labels,
                      cfg.lambda_coarse, cfg.lambda_fine)


def train(episodes: list[Episode], cfg: Config, max_steps: int | None = None,
          params: HiMemFormerParams | None = None) -> TrainResult:
    """Train from scratch (or continue ``params``) for ``cfg.epochs`` epochs.

    Fully determined by ``cfg.seed`` and the data.
    """
    check_compatible(episodes, cfg)
    stream = cfg.stream
    rng = np.random.default_rng([cfg.seed, 17])
    params = params or init_params(cfg.model, seed=cfg.seed)
    n_anchor = sum(1 for ep in episodes if valid_anchors(ep, stream.anticipation_steps).size)
    if n_anchor == 0:
        raise DataError("no episode is long enough to supervise the anticipation horizon")
    steps_per_epoch = -(-n_anchor * cfg.anchors_per_episode // cfg.batch_size)
    sched = Schedule(cfg.lr, int(round(cfg.warmup_epochs * steps_per_epoch)))
    state = OptimState(weight_decay=cfg.weight_decay)
    named = list(params.named_parameters())
    curve = []
    step = 0
    for epoch in range(cfg.epochs):
        picks = sample_anchors(episodes, cfg, rng)
        for i in range(0, len(picks), cfg.batch_size):
            if max_steps is not None and step >= max_steps:
                return TrainResult(params, cfg, curve)
            batch = make_batch(episodes, picks[i:i + cfg.batch_size], stream)
            params.zero_grad()
            with Tape() as tape:
                parts = loss_on_batch(params, batch, cfg)
            backward(parts.total, tape)
            adamw_step(named, state, lr_at(step, sched))
            step += 1
            lc = parts.coarse.item() if parts.coarse is not None else 0.0
            curve.append((step, lc, parts.fine.item(), parts.total.item()))
        log.info("epoch %d: step %d loss %.4f", epoch + 1, step, curve[-1][3] if curve else float("nan"))
    return TrainResult(params, cfg, curve)


def write_curve(curve, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss_coarse,loss_fine,total\n")
        for step, lc, lf, lt in curve:
            fh.write(f"{step},{lc!r},{lf!r},{lt!r}\n")


# --------------------------------------------------------------------------
# HMF1 checkpoints

CKPT_MAGIC = b"HMF1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: HiMemFormerParams, cfg: Config) -> bytes:
    named = list(params.named_parameters())
    text = serialize_config(cfg).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(named)),
             struct.pack("<I", len(text)), text]
    for name, t in named:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}Q", *t.shape))
        parts.append(t.data.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(buf: bytes) -> tuple[HiMemFormerParams, Config]:
    if len(buf) < 20 or buf[:4] != CKPT_MAGIC:
        raise CheckpointError("not an HMF1 checkpoint (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", body, 12)
    off = 16
    cfg = parse_config(body[off:off + clen].decode("utf-8"))
    off += clen
    params = init_params(cfg.model, seed=cfg.seed)
    table = dict(params.named_parameters())
    if len(table) != count:
        raise CheckpointError(f"checkpoint holds {count} tensors, config implies {len(table)}")
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}Q", body, off)
            off += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(body, dtype="<f4", count=size, offset=off).astype(np.float64)
            off += 4 * size
            if name not in table or table[name].shape != tuple(dims):
                raise CheckpointError(f"unexpected tensor {name} {dims}")
            table[name].data = data.reshape(dims).copy()
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if off != len(body):
        raise CheckpointError(f"{len(body) - off} unexpected trailing bytes")
    return params, cfg


def save_checkpoint(params: HiMemFormerParams, cfg: Config, path) -> None:
    Path(path).write_bytes(encode_checkpoint(params, cfg))


def load_checkpoint(path) -> tuple[HiMemFormerParams, Config]:
    return decode_checkpoint(Path(path).read_bytes())
