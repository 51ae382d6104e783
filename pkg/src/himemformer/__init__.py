"""Hierarchical memory-aware transformer for online multi-agent action
anticipation, on a small numpy reverse-mode autodiff core."""

from .config import Config, parse_config, serialize_config
from .model import ModelConfig, forward_anticipate, init_params, total_loss
from .streams import MemoryViews, StreamBuffer, StreamConfig
from .synthetic import Episode, ScenarioSpec, generate_episode, read_dataset, write_dataset
from .tensor import Tape, Tensor, backward

__all__ = [
    "Config", "parse_config", "serialize_config", "ModelConfig", "forward_anticipate",
    "init_params", "total_loss", "MemoryViews", "StreamBuffer", "StreamConfig", "Episode",
    "ScenarioSpec", "generate_episode", "read_dataset", "write_dataset", "Tape", "Tensor",
    "backward",
]
__version__ = "0.1.0"
