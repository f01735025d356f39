"""Flat key=value run configuration shared by every command.

A single file covers the scene generator, rendering, trajectories, training
and the pose solver.  Keys are the field names of the underlying dataclasses;
``seed`` is shared by all of them.  Unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .exceptions import BadConfig, IoError
from .io import build_config, parse_key_values
from .pose_solver import RansacConfig
from .synth import RenderConfig, TrajectorySpec
from .training import TrainConfig


@dataclass(frozen=True)
class SceneConfig:
    num_points: int = 200
    descriptor_dim: int = 64
    unreliable_fraction: float = 0.3


@dataclass(frozen=True)
class EvalConfig:
    # translation threshold as a fraction of the scene diameter
    threshold_trans_fraction: float = 0.05
    threshold_rot: float = 5.0


SECTIONS = {
    "scene": SceneConfig,
    "render": RenderConfig,
    "trajectory": TrajectorySpec,
    "train": TrainConfig,
    "solver": RansacConfig,
    "eval": EvalConfig,
}


def known_keys():
    keys = {"seed"}
    for cls in SECTIONS.values():
        keys.update(f.name for f in fields(cls))
    return keys


@dataclass(frozen=True)
class Settings:
    scene: SceneConfig = field(default_factory=SceneConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    solver: RansacConfig = field(default_factory=RansacConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    @classmethod
    def from_mapping(cls, values):
        unknown = sorted(set(values) - known_keys())
        if unknown:
            raise BadConfig(f"unknown configuration keys: {', '.join(unknown)}")
        try:
            built = {name: build_config(kind, values) for name, kind in SECTIONS.items()}
        except (TypeError, ValueError) as exc:
            if isinstance(exc, BadConfig):
                raise
            raise BadConfig(str(exc)) from None
        seed = int(values.get("seed", 0))
        return cls(**built).with_seed(seed)

    @classmethod
    def from_text(cls, text):
        return cls.from_mapping(parse_key_values(text))

    @classmethod
    def from_file(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    def with_seed(self, seed):
        try:
            return replace(self, seed=seed, render=replace(self.render, seed=seed),
                           train=replace(self.train, seed=seed), solver=replace(self.solver, seed=seed))
        except ValueError as exc:
            raise BadConfig(str(exc)) from None

    def to_text(self):
        lines = [f"seed = {self.seed}"]
        for name in SECTIONS:
            for key, value in asdict(getattr(self, name)).items():
                if key == "seed":
                    continue
                if isinstance(value, (tuple, list)):
                    value = ",".join(str(v) for v in value)
                lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def preset_path(name):
    return resources.files("d2s") / "presets" / f"{name}.cfg"


def load_preset(name):
    path = preset_path(name)
    if not path.is_file():
        raise BadConfig(f"no preset named {name!r}")
    return Settings.from_text(path.read_text())


def load_settings(spec=None):
    """``spec`` is None (defaults), a preset name, or a path to a config file."""
    if spec is None:
        return Settings()
    if Path(spec).exists():
        return Settings.from_file(spec)
    if preset_path(spec).is_file():
        return load_preset(spec)
    raise IoError(f"config not found: {spec}")
