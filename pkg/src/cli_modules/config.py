import logging
import os.path as osp
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from datasets import TaskSpec
from inference import DecodeConfig
from models import TrainConfig
from nets import ModelConfig
from utils.errors import ConfigError

from .rich import increment_version

logger = logging.getLogger(__name__)

PROBE_KINDS = ("da_scan", "mask_ratio", "first_token", "dump")


@dataclass
class OutputConfig:
    dir: str = "${oc.env:STABLEMASK_OUT,logs}"
    name: str = "default_name"
    version: str = "version_0"
    # pick the first unused version_<i> instead of ``version``
    increment_version: bool = False


@dataclass
class ProbeConfig:
    kind: str = "mask_ratio"
    eps: float = 0.05
    n_inputs: int = 256
    plot: bool = False
    layer: int = 0
    head: int = 0


@dataclass
class BenchConfig:
    lengths: List[int] = field(default_factory=lambda: [32, 64, 128])
    block_sizes: List[int] = field(default_factory=lambda: [8, 16, 32])
    head_dim: int = 16
    gamma: float = 0.5
    repeats: int = 3
    decode: bool = False


@dataclass
class ExtrapolationConfig:
    # windowed evaluation length as a multiple of model.max_len
    length_factor: int = 4
    n_sequences: int = 4


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    extrapolation: ExtrapolationConfig = field(default_factory=ExtrapolationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.task.validate()
        self.decode.validate()
        if self.model.vocab_size < self.task.vocab_size():
            raise ConfigError(
                f"model vocab {self.model.vocab_size} is smaller than the {self.task.kind} vocab {self.task.vocab_size()}"
            )
        if self.probe.kind not in PROBE_KINDS:
            raise ConfigError(f"unknown probe {self.probe.kind!r}, expected one of {PROBE_KINDS}")
        if self.probe.eps < 0:
            raise ConfigError(f"probe.eps must be >= 0, got {self.probe.eps}")
        if self.extrapolation.length_factor < 1 or self.extrapolation.n_sequences < 1:
            raise ConfigError("extrapolation.length_factor and n_sequences must be >= 1")
        if any(n < 1 for n in self.bench.lengths) or any(b < 1 for b in self.bench.block_sizes):
            raise ConfigError("bench lengths and block sizes must be >= 1")


# CLI flag -> dotted config keys it sets
FLAG_KEYS = {
    "seed": ("train.seed", "task.seed", "decode.seed"),
    "out": ("output.dir",),
    "mask": ("model.mask.kind",),
    "pe": ("model.pe.kind",),
    "gamma": ("model.mask.gamma",),
    "headwise_gamma": ("model.mask.headwise_gamma",),
    "window": ("decode.window",),
    "name": ("output.name",),
    "version": ("output.version",),
    "increment_version": ("output.increment_version",),
    "plot": ("probe.plot",),
    "kind": ("probe.kind",),
}


def _flags_dotlist(flags: Dict[str, Any]) -> List[str]:
    dotlist = []
    for flag, value in flags.items():
        if value is None or value is False or flag not in FLAG_KEYS:
            continue
        for key in FLAG_KEYS[flag]:
            dotlist.append(f"{key}={str(value).lower() if isinstance(value, bool) else value}")
    return dotlist


def default_yaml() -> str:
    return OmegaConf.to_yaml(OmegaConf.structured(RunConfig))


def load(
    config_path: Optional[str] = None,
    dotlist: Sequence[str] = (),
    flags: Optional[Dict[str, Any]] = None,
    validate: bool = True,
) -> RunConfig:
    """Defaults, then the YAML file, then dot-list overrides, then CLI flags."""
    try:
        layers = [OmegaConf.structured(RunConfig)]
        if config_path:
            if not osp.exists(config_path):
                raise ConfigError(f"config file {config_path} does not exist")
            layers.append(OmegaConf.load(config_path))
        layers.append(OmegaConf.from_dotlist(list(dotlist)))
        layers.append(OmegaConf.from_dotlist(_flags_dotlist(flags or {})))
        cfg: RunConfig = OmegaConf.to_object(OmegaConf.merge(*layers))
    except OmegaConfBaseException as e:
        raise ConfigError(str(e)) from e

    cfg.model.vocab_size = cfg.task.vocab_size()
    if cfg.task.at_tokens and cfg.model.at_token is None and cfg.task.position_task:
        cfg.model.at_token = cfg.task.vocab.at
    if validate:
        cfg.validate()
    return cfg


def run_dir(cfg: RunConfig, subcommand: str) -> str:
    """``<out>/<name>/<version>/<subcommand>``; resolves ``increment_version`` once."""
    out = cfg.output
    if out.increment_version:
        out.version = increment_version(out.dir, out.name)
        out.increment_version = False
    return osp.join(out.dir, out.name, out.version, subcommand)
