"""Flat ``key = value`` run configuration.

Keys are the field names of :class:`Config`; the short aliases in
``ALIASES`` (``m_L``, ``m_S``, ``SR``, ``H`` ...) are accepted on input and
normalized on output.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .model import ModelConfig
from .streams import StreamConfig
from .synthetic import SCENARIOS, ScenarioSpec


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.key = key


@dataclass(frozen=True)
class Config:
    # streaming memory
    frame_rate: float = 4.0
    long_span: float = 64.0
    short_span: float = 5.0
    sample_rate: int = 4
    horizon: float = 2.0
    # model
    dim: int = 64
    heads: int = 4
    units_per_stage: int = 2
    ffn_dim: int = 256
    latent1: int = 16
    latent2: int = 8
    num_classes: int = 10
    use_context: bool = True
    share_classifier: bool = True
    dropout: float = 0.0
    # loss and optimization
    lambda_coarse: float = 1.0
    lambda_fine: float = 1.0
    lr: float = 7e-5
    warmup_epochs: float = 10.0
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 25
    anchors_per_episode: int = 32
    seed: int = 0
    # synthetic data
    scenario: str = "2x1"
    coupling: float = 0.9
    noise: float = 0.1
    mean_duration: float = 8.0
    concentration: float = 1.0
    episode_frames: int = 512
    train_episodes: int = -1
    eval_episodes: int = -1
    world_seed: int = 0
    data_seed: int = 0
    # evaluation
    eval_stride: int = 1
    # paths
    data_dir: str = ""
    out_dir: str = ""

    def __post_init__(self):
        validate(self)

    @property
    def stream(self) -> StreamConfig:
        return StreamConfig(self.frame_rate, self.long_span, self.short_span,
                            self.sample_rate, self.horizon, self.dim)

    @property
    def model(self) -> ModelConfig:
        s = self.stream
        return ModelConfig(
            dim=self.dim, heads=self.heads, units_per_stage=self.units_per_stage,
            ffn_dim=self.ffn_dim, latent1=self.latent1, latent2=self.latent2,
            num_classes=self.num_classes, anticipation_steps=s.anticipation_steps,
            long_tokens=s.long_tokens, short_tokens=s.short_frames,
            use_context=self.use_context, share_classifier=self.share_classifier,
        )

    def scenario_spec(self, scenario: str | None = None, seed: int | None = None) -> ScenarioSpec:
        return ScenarioSpec.from_tag(
            scenario or self.scenario, num_classes=self.num_classes,
            coupling=self.coupling, mean_duration=self.mean_duration,
            concentration=self.concentration, noise=self.noise,
            frames=self.episode_frames, feature_dim=self.dim,
            seed=self.data_seed if seed is None else seed, world_seed=self.world_seed,
        )

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)


ALIASES = {
    "f": "frame_rate", "m_L": "long_span", "m_S": "short_span", "SR": "sample_rate",
    "tau_f": "horizon", "D": "dim", "H": "heads", "D_ff": "ffn_dim",
    "n1": "latent1", "n2": "latent2", "K": "num_classes",
    "lambda_a": "lambda_coarse", "lambda_b": "lambda_fine", "wd": "weight_decay",
    "rho": "coupling", "sigma": "noise", "T": "episode_frames",
}

_FIELDS = {f.name: f for f in fields(Config)}


def validate(cfg: Config) -> None:
    if cfg.scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {cfg.scenario!r}", key="scenario")
    if not cfg.long_span >= cfg.short_span > 0:
        raise ConfigError(f"short_span ({cfg.short_span}) must be in (0, long_span={cfg.long_span}]",
                          key="short_span")
    if cfg.dim % cfg.heads:
        raise ConfigError(f"dim {cfg.dim} not divisible by heads {cfg.heads}", key="heads")
    for name in ("batch_size", "epochs", "anchors_per_episode", "eval_stride", "units_per_stage",
                 "latent1", "latent2", "ffn_dim", "dim"):
        if getattr(cfg, name) < 1:
            raise ConfigError("must be >= 1", key=name)
    if cfg.dropout != 0.0:
        raise ConfigError("dropout is not implemented; only 0 is accepted", key="dropout")
    try:
        stream = cfg.stream
        cfg.model
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.latent1 > stream.long_tokens:
        raise ConfigError(f"latent1 ({cfg.latent1}) exceeds long-window tokens ({stream.long_tokens})",
                          key="latent1")


def _coerce(key: str, raw: str, line: int | None):
    typ = _FIELDS[key].type
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"expected {typ}, got {raw!r}", line, key) from None


def canonical_key(key: str) -> str:
    return ALIASES.get(key, key)


def parse_config(text: str, base: Config | None = None) -> Config:
    values: dict = {}
    lines: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", lineno)
        key, raw = (s.strip() for s in line.split("=", 1))
        name = canonical_key(key)
        if name not in _FIELDS:
            raise ConfigError("unknown key", lineno, key)
        values[name] = _coerce(name, raw, lineno)
        lines[name] = (lineno, key)
    try:
        return dataclasses.replace(base or Config(), **values)
    except ConfigError as exc:
        if exc.key in lines:
            lineno, key = lines[exc.key]
            raise ConfigError(str(exc).split(": ", 1)[-1], lineno, key) from None
        raise


def override(cfg: Config, pairs: list[str]) -> Config:
    """Apply ``key=value`` strings (e.g. from ``--set``)."""
    return parse_config("\n".join(pairs), base=cfg)


def serialize_config(cfg: Config) -> str:
    out = []
    for f in fields(Config):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"


def load_config(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def desk_config(**kw) -> Config:
    """Settings that train in minutes on a CPU: larger peak lr and more steps
    than the reference schedule, same architecture defaults."""
    base = dict(lr=1e-3, warmup_epochs=2, epochs=30, weight_decay=1e-4)
    base.update(kw)
    return Config(**base)


def toy_config(**kw) -> Config:
    """The tiny shape used by gradient checks and overfit runs."""
    base = dict(frame_rate=1.0, long_span=8.0, short_span=4.0, sample_rate=1, horizon=2.0,
                dim=8, heads=2, units_per_stage=2, ffn_dim=32, latent1=4, latent2=2,
                num_classes=3, episode_frames=24, mean_duration=3.0)
    base.update(kw)
    return Config(**base)
