"""Streaming memory buffers and long/short window extraction.

Frame indices are 0-based; a buffer that has received ``t`` frames has its
newest frame at index ``t - 1``. Every window is anchored at that newest
frame, so it is always the last row, and rows before the start of the
stream are zero with validity False.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class StreamError(ValueError):
    pass


@dataclass(frozen=True)
class StreamConfig:
    frame_rate: float = 4.0
    long_span: float = 64.0
    short_span: float = 5.0
    sample_rate: int = 4
    horizon: float = 2.0
    feature_dim: int = 64

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")
        if not self.long_span >= self.short_span > 0:
            raise ValueError(f"need long_span >= short_span > 0, got {self.long_span}, {self.short_span}")
        if self.sample_rate < 1:
            raise ValueError("sample_rate must be >= 1")
        if self.short_frames < 1:
            raise ValueError("short window holds no frames")
        if self.long_tokens < 1:
            raise ValueError("long window holds no tokens after down-sampling")
        if self.anticipation_steps < 1:
            raise ValueError("horizon * frame_rate must round to at least one step")

    @property
    def long_frames(self) -> int:
        return int(round(self.long_span * self.frame_rate))

    @property
    def long_tokens(self) -> int:
        return self.long_frames // self.sample_rate

    @property
    def short_frames(self) -> int:
        return int(round(self.short_span * self.frame_rate))

    @property
    def anticipation_steps(self) -> int:
        return int(round(self.horizon * self.frame_rate))


def long_indices(now: int, config: StreamConfig) -> np.ndarray:
    """Frame indices of the long window, oldest first: ``now, now-SR, ...``
    (reversed). Negative entries are pre-stream padding."""
    k = np.arange(config.long_tokens)[::-1]
    return now - k * config.sample_rate


def short_indices(now: int, config: StreamConfig) -> np.ndarray:
    return np.arange(now - config.short_frames + 1, now + 1)


def gather(history: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows of ``history [..., T, D]`` at ``idx``; negative indices give zero rows."""
    valid = idx >= 0
    rows = np.take(history, np.where(valid, idx, 0), axis=-2)
    rows = np.where(valid[:, None], rows, 0.0)
    return rows, valid


@dataclass
class MemoryViews:
    long_agent: np.ndarray
    long_context: np.ndarray
    short_agent: np.ndarray
    short_context: np.ndarray
    long_mask: np.ndarray
    short_mask: np.ndarray

    @classmethod
    def stack(cls, views: list["MemoryViews"]) -> "MemoryViews":
        """Batch several views along a new leading axis."""
        return cls(*(np.stack([getattr(v, f) for v in views]) for f in
                     ("long_agent", "long_context", "short_agent", "short_context",
                      "long_mask", "short_mask")))


def views_at(agent_history: np.ndarray, context_history: np.ndarray, now: int,
             config: StreamConfig) -> MemoryViews:
    """Extract the four memory views with the newest frame at index ``now``.

    Only rows ``<= now`` are ever read.
    """
    if now < 0 or now >= agent_history.shape[0] or now >= context_history.shape[0]:
        raise StreamError(f"frame {now} not available")
    li = long_indices(now, config)
    si = short_indices(now, config)
    la, lmask = gather(agent_history, li)
    lc, _ = gather(context_history, li)
    sa, smask = gather(agent_history, si)
    sc, _ = gather(context_history, si)
    return MemoryViews(la, lc, sa, sc, lmask, smask)


class StreamBuffer:
    """Append-only per-agent and context feature histories."""

    def __init__(self, num_agents: int, feature_dim: int, capacity: int = 256):
        self.num_agents = num_agents
        self.feature_dim = feature_dim
        self._agents = np.zeros((num_agents, capacity, feature_dim))
        self._context = np.zeros((capacity, feature_dim))
        self.t = 0

    def _grow(self) -> None:
        cap = self._context.shape[0] * 2
        agents = np.zeros((self.num_agents, cap, self.feature_dim))
        agents[:, : self.t] = self._agents[:, : self.t]
        context = np.zeros((cap, self.feature_dim))
        context[: self.t] = self._context[: self.t]
        self._agents, self._context = agents, context

    def push_frame(self, agent_feats, context_feat) -> "StreamBuffer":
        agent_feats = np.asarray(agent_feats, dtype=np.float64)
        context_feat = np.asarray(context_feat, dtype=np.float64)
        if agent_feats.shape != (self.num_agents, self.feature_dim):
            raise StreamError(
                f"expected {self.num_agents} agent features of dim {self.feature_dim}, "
                f"got shape {agent_feats.shape}"
            )
        if context_feat.shape != (self.feature_dim,):
            raise StreamError(f"context feature must have shape ({self.feature_dim},)")
        if self.t == self._context.shape[0]:
            self._grow()
        self._agents[:, self.t] = agent_feats
        self._context[self.t] = context_feat
        self.t += 1
        return self

    def agent_history(self, agent: int) -> np.ndarray:
        return self._agents[agent, : self.t]

    def context_history(self) -> np.ndarray:
        return self._context[: self.t]

    def long_window(self, view: int | str, config: StreamConfig, t: int | None = None):
        """Long window for agent index ``view`` or ``"context"`` as of ``t`` frames seen."""
        hist = self.context_history() if view == "context" else self.agent_history(view)
        return gather(hist, long_indices(self._now(t), config))

    def short_window(self, view: int | str, config: StreamConfig, t: int | None = None):
        hist = self.context_history() if view == "context" else self.agent_history(view)
        return gather(hist, short_indices(self._now(t), config))

    def views(self, agent: int, config: StreamConfig, t: int | None = None) -> MemoryViews:
        return views_at(self.agent_history(agent), self.context_history(), self._now(t), config)

    def _now(self, t: int | None) -> int:
        t = self.t if t is None else t
        if not 1 <= t <= self.t:
            raise StreamError(f"time {t} outside the {self.t} frames received")
        return t - 1
