"""JSON run configuration.  Unknown keys are rejected at every level."""

import json
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class DatasetConfig:
    size: int = 64
    count_range: tuple = (2, 8)
    size_range: tuple = (8, 24)
    depth_range: tuple = (2.0, 20.0)
    background_tilt: float = 0.15
    min_contrast: float = 0.25
    n_train: int = 1000
    n_val: int = 100
    n_test: int = 100


@dataclass
class FogConfig:
    beta: float = 0.08
    airlight: tuple = (0.85, 0.85, 0.85)


@dataclass
class DehazeConfig:
    kinds: tuple = ("aodnet", "aodnetx")
    lr: float = 1e-3
    epochs: int = 3
    batch_size: int = 8
    max_train: int = 0          # 0 = use every train record
    use_gt_rois: bool = True


@dataclass
class DetectConfig:
    families: tuple = ("A", "B")
    grid: int = 8
    anchor: tuple = (16.0, 16.0)
    light_lr: float = 3e-3
    light_epochs: int = 8
    heavy_lr: float = 1e-3
    heavy_epochs: int = 8
    batch_size: int = 8
    condition: str = "clear"


@dataclass
class PipelineConfig:
    split: str = "val"
    variants: tuple = ("HeavyOnly", "AODNetThenHeavy", "LightAODNetXHeavy")
    conf_thresh: float = 0.25
    det_thresh: float = 0.05
    nms_iou: float = 0.45
    iou_thresh: float = 0.5
    n_pairs: int = 4


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    threads: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    fog: FogConfig = field(default_factory=FogConfig)
    dehaze: DehazeConfig = field(default_factory=DehazeConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    @property
    def out_dir(self):
        out = Path(self.out)
        return out if out.is_absolute() else self.base_dir / out

    def to_json(self):
        d = asdict(self)
        d.pop("base_dir")
        return d


_SECTIONS = {"dataset": DatasetConfig, "fog": FogConfig, "dehaze": DehazeConfig,
             "detect": DetectConfig, "pipeline": PipelineConfig}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a JSON object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls) if f.name != "base_dir"}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed {sorted(known)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        if name in _SECTIONS and cls is RunConfig:
            value = _build(_SECTIONS[name], value, f"{where}.{name}")
        else:
            default = f.default if f.default is not MISSING else None
            value = _coerce(value, default, f"{where}.{name}")
        kwargs[name] = value
    return cls(**kwargs)


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def config_from_dict(data, base_dir="."):
    cfg = _build(RunConfig, data, "config")
    cfg.base_dir = Path(base_dir)
    return cfg


def load_config(path):
    """Parse a RunConfig; relative paths inside resolve against the file's directory."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return config_from_dict(data, base_dir=path.resolve().parent)
