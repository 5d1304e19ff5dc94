"""Run configuration: one structured file covering network, training, data,
mesh, and eval parameters, with dotted-key command-line overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .network import NetworkConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    path: str = "dataset"
    n_scenes: int = 20
    n_views: int = 12
    fov_deg: float = 50.0
    radius: float = 2.0
    image_hw: tuple[int, int] = (64, 64)
    eval_fraction: float = 0.25
    holdout_scenes: int = 2
    previews: bool = True


@dataclass
class MeshConfig:
    voxel: float = 0.02
    n_cameras: int = 200
    trunc: float | None = None
    image_hw: tuple[int, int] = (128, 128)
    min_fraction: float = 0.05
    camera_radius: float | None = None


@dataclass
class EvalConfig:
    thresholds: tuple[float, ...] = (0.01, 0.005)
    icp: bool = True
    max_points: int = 100_000


_SECTIONS = {"network": NetworkConfig, "train": TrainConfig,
             "data": DataConfig, "mesh": MeshConfig, "eval": EvalConfig}
_TUPLE_FIELDS = {"image_hw", "betas", "thresholds"}


@dataclass
class RunConfig:
    seed: int = 0
    out: str | None = None
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "out": self.out}
        for name in _SECTIONS:
            out[name] = dataclasses.asdict(getattr(self, name))
        return out

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1,
                                         sort_keys=True))


def _build_section(cls, values: dict, where: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(fields)
    if unknown:
        raise KeyError(f"unknown key(s) {sorted(unknown)} in section "
                       f"{where!r}; valid: {sorted(fields)}")
    fixed = {}
    for k, v in values.items():
        if k in _TUPLE_FIELDS and isinstance(v, list):
            v = tuple(v)
        fixed[k] = v
    return cls(**fixed)


def config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = raw.pop(name, {})
        if not isinstance(section, dict):
            raise TypeError(f"section {name!r} must be a mapping")
        kwargs[name] = _build_section(cls, section, name)
    for top in ("seed", "out"):
        if top in raw:
            kwargs[top] = raw.pop(top)
    if raw:
        raise KeyError(f"unknown top-level key(s) {sorted(raw)}; valid: "
                       f"{['seed', 'out'] + sorted(_SECTIONS)}")
    return RunConfig(**kwargs)


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus key=value
    overrides with dotted paths (e.g. train.lr=0.001, seed=3)."""
    raw = json.loads(Path(path).read_text()) if path else {}
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = value
    return config_from_dict(raw)
