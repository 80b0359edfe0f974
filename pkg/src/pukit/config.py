"""Run configuration: an INI file with ``[network]``, ``[loss]`` and ``[train]`` sections."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .loss import LossConfig
from .punet import DEFAULT_RADII, NetworkConfig


@dataclass(frozen=True)
class NetworkSpec:
    """The handful of knobs that determine a :class:`NetworkConfig`."""

    input_count: int = 1024
    upsample_rate: int = 4
    width_divisor: int = 1
    radii: tuple = DEFAULT_RADII
    group_size: int = 32

    def build(self) -> NetworkConfig:
        if self.width_divisor < 1:
            raise ConfigError("width_divisor must be >= 1")
        if len(self.radii) != 4:
            raise ConfigError("radii needs one value per level (4)")
        return NetworkConfig.scaled(
            self.width_divisor, self.input_count, self.upsample_rate,
            tuple(self.radii), self.group_size,
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    batch_size: int = 28
    learning_rate: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables intermediate checkpoints
    augment: bool = True
    scale_min: float = 0.8
    scale_max: float = 1.25
    shift: float = 0.1
    dtype: str = "float32"
    network: NetworkSpec = field(default_factory=NetworkSpec)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if not 0 < self.scale_min <= self.scale_max:
            raise ConfigError("need 0 < scale_min <= scale_max")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        self.network.build()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"]["radii"] = list(self.network.radii)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        net = dict(d.pop("network", {}))
        if "radii" in net:
            net["radii"] = tuple(net["radii"])
        loss = d.pop("loss", {})
        return cls(network=NetworkSpec(**net), loss=LossConfig(**loss), **d)


_BOOL = {"true": True, "yes": True, "on": True, "1": True,
         "false": False, "no": False, "off": False, "0": False}


def _convert(raw: str, default, where):
    try:
        if isinstance(default, bool):
            return _BOOL[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.replace(",", " ").split())
        return raw.strip()
    except (ValueError, KeyError):
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def _section(parser, name, cls, path):
    if not parser.has_section(name):
        return {}
    known = {f.name: f.default for f in fields(cls) if f.name not in ("network", "loss")}
    out = {}
    for key, raw in parser.items(name):
        if key not in known:
            raise ConfigError(f"{path}: unknown key [{name}] {key}")
        out[key] = _convert(raw, known[key], f"{path} [{name}] {key}")
    return out


def parse_config(text: str, path="<config>") -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = set(parser.sections()) - {"network", "loss", "train"}
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    try:
        return TrainConfig(
            network=NetworkSpec(**_section(parser, "network", NetworkSpec, path)),
            loss=LossConfig(**_section(parser, "loss", LossConfig, path)),
            **_section(parser, "train", TrainConfig, path),
        )
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config(text, path)


def dump_config(cfg: TrainConfig) -> str:
    """INI text that :func:`parse_config` maps back to ``cfg``."""
    d = cfg.to_dict()
    lines = []
    for section, values in (("network", d["network"]), ("loss", d["loss"]),
                            ("train", {k: v for k, v in d.items() if k not in ("network", "loss")})):
        lines.append(f"[{section}]")
        for k, v in values.items():
            if isinstance(v, (list, tuple)):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
