"""Synthetic multi-agent activity streams and the HME1 episode file format.

A scenario has one or two agents, each working through one or two tasks.
A task is a first-order Markov chain over action segments (no self
transitions) restricted to a class subset plus background; segment lengths
are geometric. Two-task agents hop between disjoint subsets. In two-agent
scenes, each time agent 2 starts a new segment it copies a fixed function of
agent 1's current class with probability ``coupling``.

Everything that defines the "world" (task chains, collaboration rule, class
prototypes) is drawn from ``world_seed`` so that episodes with different
``seed`` share it and a model can learn it.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SCENARIOS = {"1x1": 11, "1x2": 12, "2x1": 21, "2x2": 22}
SCENARIO_NAMES = {v: k for k, v in SCENARIOS.items()}

# train/eval episode counts per scenario at desk scale
DEFAULT_SPLITS = {"1x1": (24, 8), "1x2": (8, 24), "2x1": (8, 24), "2x2": (8, 24)}

MAGIC = b"HME1"
VERSION = 1
_HEADER = struct.Struct("<4sIIQIIIQ")
_CRC = struct.Struct("<I")


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ScenarioSpec:
    agents: int = 2
    tasks: int = 1
    num_classes: int = 10
    coupling: float = 0.0
    mean_duration: float = 8.0
    noise: float = 0.1
    frames: int = 512
    feature_dim: int = 64
    seed: int = 0
    world_seed: int = 0
    task_switch: float = 0.25
    concentration: float = 1.0

    def __post_init__(self):
        if self.agents not in (1, 2) or self.tasks not in (1, 2):
            raise ValueError("agents and tasks must each be 1 or 2")
        if self.num_classes < 3:
            raise ValueError("need at least 3 action classes")
        if self.tasks == 2 and self.num_classes < 4:
            raise ValueError("two tasks need at least 4 action classes")
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError("coupling must lie in [0, 1]")
        if self.mean_duration < 1.0 or self.concentration <= 0 or self.noise < 0 or self.frames < 1 or self.feature_dim < 1:
            raise ValueError("invalid duration, noise, length or feature size")

    @property
    def scenario(self) -> str:
        return f"{self.agents}x{self.tasks}"

    @classmethod
    def from_tag(cls, tag: str, **kw) -> "ScenarioSpec":
        if tag not in SCENARIOS:
            raise ValueError(f"unknown scenario {tag!r}; expected one of {sorted(SCENARIOS)}")
        a, t = (int(c) for c in tag.split("x"))
        return cls(agents=a, tasks=t, **kw)


@dataclass
class TaskScript:
    actions: np.ndarray
    transition: np.ndarray

    @property
    def states(self) -> np.ndarray:
        return np.concatenate([[0], self.actions])


@dataclass
class World:
    scripts: list[TaskScript]
    rule: np.ndarray
    prototypes: np.ndarray


def build_world(spec: ScenarioSpec) -> World:
    rng = np.random.default_rng([spec.world_seed, spec.num_classes, spec.tasks, 7])
    k = spec.num_classes
    perm = rng.permutation(np.arange(1, k + 1))
    subsets = [np.sort(perm)] if spec.tasks == 1 else [np.sort(perm[: k // 2]), np.sort(perm[k // 2:])]
    scripts = []
    for actions in subsets:
        states = np.concatenate([[0], actions])
        trans = np.zeros((k + 1, k + 1))
        for s in states:
            others = states[states != s]
            trans[s, others] = rng.dirichlet(np.full(len(others), spec.concentration))
        scripts.append(TaskScript(actions, trans))
    # rule[task, c]: agent 2's next class when agent 1 is in class c
    rule = np.stack([sc.actions[rng.permutation(k + 1) % len(sc.actions)] for sc in scripts])
    protos = np.random.default_rng([spec.world_seed, spec.feature_dim, k, 11]).normal(size=(k + 1, spec.feature_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return World(scripts, rule, protos)


@dataclass
class Skeleton:
    labels: np.ndarray
    boundaries: list[list[int]]
    coupled: list[list[bool]]
    task_ids: np.ndarray


def _sample_agent(spec, world, agent, leader=None) -> tuple[np.ndarray, list[int], list[bool], np.ndarray]:
    rng = np.random.default_rng([spec.seed, agent, 0])
    n_tasks = len(world.scripts)
    task = agent % n_tasks
    labels = np.empty(spec.frames, dtype=np.int64)
    tasks = np.empty(spec.frames, dtype=np.int64)
    boundaries, coupled = [], []
    cls = int(rng.choice(world.scripts[task].states))
    t = 0
    while t < spec.frames:
        dur = int(rng.geometric(1.0 / spec.mean_duration))
        labels[t:t + dur] = cls
        tasks[t:t + dur] = task
        t += dur
        if t >= spec.frames:
            break
        if n_tasks == 2 and rng.random() < spec.task_switch:
            task = 1 - task
            nxt = int(rng.choice(world.scripts[task].actions))
        else:
            row = world.scripts[task].transition[cls]
            if row.sum() == 0:
                row = np.isin(np.arange(len(row)), world.scripts[task].states).astype(float)
                row /= row.sum()
            nxt = int(rng.choice(len(row), p=row))
        hit = leader is not None and rng.random() < spec.coupling
        if hit:
            nxt = int(world.rule[task, leader[t - 1]])
        boundaries.append(t)
        coupled.append(hit)
        cls = nxt
    return labels, boundaries, coupled, tasks


def sample_skeleton(spec: ScenarioSpec, world: World | None = None) -> Skeleton:
    """Labels and segment structure for every agent, without features."""
    world = world or build_world(spec)
    lab0, b0, c0, t0 = _sample_agent(spec, world, 0)
    out = [(lab0, b0, c0, t0)]
    if spec.agents == 2:
        out.append(_sample_agent(spec, world, 1, leader=lab0))
    return Skeleton(
        labels=np.stack([o[0] for o in out]),
        boundaries=[o[1] for o in out],
        coupled=[o[2] for o in out],
        task_ids=np.stack([o[3] for o in out]),
    )


@dataclass
class Episode:
    agent_features: np.ndarray
    context_features: np.ndarray
    labels: np.ndarray
    scenario: str
    seed: int
    num_classes: int = field(default=0)

    @property
    def num_agents(self) -> int:
        return self.agent_features.shape[0]

    @property
    def frames(self) -> int:
        return self.context_features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.context_features.shape[1]

    def __eq__(self, other) -> bool:
        return (isinstance(other, Episode) and self.scenario == other.scenario and self.seed == other.seed
                and self.num_classes == other.num_classes
                and np.array_equal(self.agent_features, other.agent_features)
                and np.array_equal(self.context_features, other.context_features)
                and np.array_equal(self.labels, other.labels))


def emit_features(labels: np.ndarray, prototypes: np.ndarray, noise: float, seed: int):
    """FPV = prototype of the agent's class + noise; TPV = mean prototype over
    agents + noise. Values are rounded through float32 (the storage precision)."""
    n_agents, frames = labels.shape
    d = prototypes.shape[1]
    agents = np.empty((n_agents, frames, d))
    for a in range(n_agents):
        rng = np.random.default_rng([seed, a, 1])
        agents[a] = prototypes[labels[a]] + noise * rng.normal(size=(frames, d))
    ctx_rng = np.random.default_rng([seed, 1000, 1])
    context = prototypes[labels].mean(axis=0) + noise * ctx_rng.normal(size=(frames, d))
    return _f32(agents), _f32(context)


def _f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def generate_episode(spec: ScenarioSpec, world: World | None = None) -> Episode:
    world = world or build_world(spec)
    sk = sample_skeleton(spec, world)
    agents, context = emit_features(sk.labels, world.prototypes, spec.noise, spec.seed)
    return Episode(agents, context, sk.labels.astype(np.int64), spec.scenario, spec.seed, spec.num_classes)


def generate_split(spec: ScenarioSpec, n_train: int, n_eval: int) -> tuple[list[Episode], list[Episode]]:
    """Episodes with consecutive seeds from ``spec.seed``; eval follows train."""
    world = build_world(spec)
    eps = [generate_episode(replace(spec, seed=spec.seed + i), world) for i in range(n_train + n_eval)]
    return eps[:n_train], eps[n_train:]


# --------------------------------------------------------------------------
# HME1


def _frame_dtype(agents: int, dim: int) -> np.dtype:
    agent = np.dtype([("feat", "<f4", (dim,)), ("label", "<u2")])
    return np.dtype([("context", "<f4", (dim,)), ("agents", agent, (agents,))])


def hme1_size(agents: int, frames: int, dim: int) -> int:
    return _HEADER.size + frames * (4 * dim + agents * (4 * dim + 2)) + _CRC.size


def encode_episode(ep: Episode) -> bytes:
    a, t, d = ep.num_agents, ep.frames, ep.feature_dim
    header = _HEADER.pack(MAGIC, VERSION, a, t, d, ep.num_classes, SCENARIOS[ep.scenario], ep.seed)
    rec = np.zeros(t, dtype=_frame_dtype(a, d))
    rec["context"] = ep.context_features
    rec["agents"]["feat"] = np.swapaxes(ep.agent_features, 0, 1)
    rec["agents"]["label"] = ep.labels.T
    payload = rec.tobytes()
    return header + payload + _CRC.pack(zlib.crc32(payload))


def decode_episode(buf: bytes) -> Episode:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {_HEADER.size} bytes", len(buf))
    magic, version, a, t, d, k, code, seed = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if code not in SCENARIO_NAMES:
        raise FormatError(f"unknown scenario code {code}", 28)
    expected = hme1_size(a, t, d)
    if len(buf) < expected:
        raise FormatError(f"truncated file: {len(buf)} of {expected} bytes", len(buf))
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes", expected)
    end = expected - _CRC.size
    payload = buf[_HEADER.size:end]
    (crc,) = _CRC.unpack_from(buf, end)
    if zlib.crc32(payload) != crc:
        raise FormatError("payload checksum mismatch", end)
    rec = np.frombuffer(payload, dtype=_frame_dtype(a, d), count=t)
    agents = np.swapaxes(rec["agents"]["feat"].astype(np.float64), 0, 1).copy()
    labels = rec["agents"]["label"].T.astype(np.int64)
    return Episode(agents, rec["context"].astype(np.float64), labels, SCENARIO_NAMES[code], seed, k)


def write_episode(ep: Episode, path) -> None:
    Path(path).write_bytes(encode_episode(ep))


def read_episode(path) -> Episode:
    return decode_episode(Path(path).read_bytes())


def write_dataset(episodes, path) -> list[Path]:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, ep in enumerate(episodes):
        p = root / f"episode_{i:04d}.hme"
        write_episode(ep, p)
        paths.append(p)
    return paths


def read_dataset(path) -> list[Episode]:
    root = Path(path)
    files = sorted(root.glob("*.hme"))
    if not files:
        raise FileNotFoundError(f"no .hme episodes under {root}")
    return [read_episode(p) for p in files]
