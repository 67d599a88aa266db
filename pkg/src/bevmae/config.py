"""Run configuration and its flat ``key = value`` file format.

Lines are ``key = value``; ``#`` starts a comment. Tuple-valued keys take
comma-separated numbers, e.g. ``voxel_size = 0.1, 0.1, 0.15``.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .geometry import GridSpec
from .sparse import LayerSpec
from .synthetic import SceneConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # grid
    x_min: float = -22.4
    x_max: float = 22.4
    y_min: float = -22.4
    y_max: float = 22.4
    z_min: float = -0.3
    z_max: float = 1.5
    voxel_size: tuple = (0.1, 0.1, 0.15)
    downsample_d: int = 8
    # model
    encoder_channels: tuple = (16, 32, 64, 64)
    nonlinear: bool = True
    decoder_kind: str = "conv3x3"
    decoder_channels: int = 64
    decoder_relu: bool = True
    num_pred_points: int = 20
    token_std: float = 0.02
    # masking and losses
    mask_ratio: float = 0.7
    lambda_d: float = 1.0
    smooth_l1_beta: float = 1.0
    density_scale: float = 1e-3
    # optimisation
    max_lr: float = 3e-4
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    steps: int = 400
    batch_size: int = 2
    checkpoint_every: int = 100
    dtype: str = "float32"
    # data
    data: str = "synthetic"              # "synthetic" or a glob of .bin scans
    n_scenes: int = 64
    scene_points_budget: int = 16000
    scene_n_objects: int = 8
    scene_alpha: float = 2.0
    scene_noise: float = 0.02
    # run
    seed: int = 0
    out_dir: str = ""

    def __post_init__(self):
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)

    # ------------------------------------------------------------ derived
    def grid_spec(self) -> GridSpec:
        return GridSpec(self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max,
                        self.voxel_size, self.downsample_d)

    def encoder_config(self) -> EncoderConfig:
        cfg = EncoderConfig.default()
        if len(self.encoder_channels) != len(cfg.layers):
            raise ConfigError(f"encoder_channels needs {len(cfg.layers)} widths")
        layers, cin = [], cfg.in_channels
        for layer, cout in zip(cfg.layers, self.encoder_channels):
            layers.append(LayerSpec(layer.kind, cin, cout, layer.stride, layer.padding))
            cin = cout
        return EncoderConfig(layers, self.nonlinear, True)

    def decoder_config(self) -> DecoderConfig:
        c_in = self.encoder_config().bev_channels(self.grid_spec())
        return DecoderConfig(c_in, self.decoder_channels, self.num_pred_points, self.decoder_kind, self.decoder_relu)

    def scene_config(self, seed: int) -> SceneConfig:
        return SceneConfig(n_objects=self.scene_n_objects, points_budget=self.scene_points_budget,
                           falloff_alpha=self.scene_alpha, noise_sigma=self.scene_noise, seed=seed)

    def validate(self) -> "RunConfig":
        try:
            spec = self.grid_spec()
            self.encoder_config().validate(spec)
            self.decoder_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0 < self.mask_ratio < 1:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if self.lambda_d < 0:
            raise ConfigError("lambda_d must be non-negative")
        if self.steps < 0 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("steps >= 0, batch_size >= 1 and checkpoint_every >= 1 required")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.max_lr <= 0 or not 0 <= self.pct_start <= 1:
            raise ConfigError("max_lr must be positive and pct_start in [0, 1]")
        if self.data == "synthetic" and self.n_scenes < 1:
            raise ConfigError("n_scenes must be positive for synthetic data")
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------ serialisation
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string("[run]\n" + text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        return cls.from_mapping(dict(parser["run"]))

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def from_mapping(cls, raw: dict) -> "RunConfig":
        types = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(types[key].default, value, key)
        return cls(**kwargs)


def _coerce(default, value, key):
    if not isinstance(value, str):
        return value
    value = value.strip()
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(v) for v in value.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    return value
