"""Run configuration document: one validated JSON covering model, training, data.

Unknown keys are rejected everywhere. The resolved document (defaults filled
in, overrides applied) is echoed into the run's output directory so any run
can be relaunched exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError
from .mesh import ChannelSchema
from .model import ModelConfig
from .runner import TrainSettings


def take_keys(doc: dict, allowed: set[str], where: str) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object, got {type(doc).__name__}")
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return dict(doc)


@dataclass(frozen=True)
class DataConfig:
    manifest: str = ""
    input_channels: tuple[str, ...] | None = None   # default: all file channels
    output_channels: tuple[str, ...] | None = None  # default: all file channels
    direct_channels: tuple[str, ...] = ()

    def resolve_schema(self, names: tuple[str, ...]) -> ChannelSchema:
        inputs = self.input_channels if self.input_channels is not None else names
        outputs = self.output_channels if self.output_channels is not None else names
        return ChannelSchema(names=tuple(names), input_channels=tuple(inputs),
                             output_channels=tuple(outputs),
                             direct_channels=frozenset(self.direct_channels))


@dataclass(frozen=True)
class ModelOptions:
    message_passing_steps: int = 4
    latent_size: int = 32
    hidden_layers: int = 2
    use_layer_norm: bool = True

    def resolve(self, node_in: int, edge_in: int, node_out: int) -> ModelConfig:
        return ModelConfig(message_passing_steps=self.message_passing_steps,
                           latent_size=self.latent_size, node_in=node_in,
                           edge_in=edge_in, node_out=node_out,
                           hidden_layers=self.hidden_layers,
                           use_layer_norm=self.use_layer_norm)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelOptions = field(default_factory=ModelOptions)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataConfig = field(default_factory=DataConfig)
    trace: bool = True

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["train"].pop("seed")  # the root seed is authoritative
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        top = take_keys(doc, {"seed", "model", "train", "data", "trace"}, "config")
        model = take_keys(top.get("model", {}) or {},
                          {"message_passing_steps", "latent_size", "hidden_layers",
                           "use_layer_norm"}, "config.model")
        train = take_keys(top.get("train", {}) or {},
                          {"mode", "n_parts", "steps", "accumulation", "noise_std",
                           "lr_initial", "lr_floor", "lr_decay_steps",
                           "normalizer_horizon", "scheduler", "replica_check_every",
                           "legacy_node_only_exchange"}, "config.train")
        data = take_keys(top.get("data", {}) or {},
                         {"manifest", "input_channels", "output_channels",
                          "direct_channels"}, "config.data")
        for key in ("input_channels", "output_channels", "direct_channels"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        seed = top.get("seed", 0)
        if "noise_std" in train and isinstance(train["noise_std"], list):
            train["noise_std"] = tuple(train["noise_std"])
        try:
            return cls(seed=seed, model=ModelOptions(**model),
                       train=TrainSettings(seed=seed, **train),
                       data=DataConfig(**data), trace=top.get("trace", True))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def write_resolved(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
