# data_loaders.py — data-file resolution and run configuration.
# Default data root is ./data at the repository root.
#  - resolve_data_path(name): a filename resolved to ./data/<name> (or an existing absolute/relative path).
#  - load_json_config(name): JSON loader with the same resolution rules (SLAM presets).
#  - load_config(path): INI-style run configuration -> typed RunConfig.

from __future__ import annotations

import configparser
import json
import math
import os
import re
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional

from src.engines.vo_estimator import EstimatorConfig, EstimatorPolicy, ExternalPredictions
from src.models.camera import Intrinsics
from src.models.scene import Scene, TrajectorySpec, default_scene
from src.models.se3 import DOF_NAMES
from src.models.uncertainty import HyperParams, SigmaParams
from src.utils.errors import ConfigError

# Resolve ./data relative to the repository root (works for the CLI, tests and the app)
_DATA_DIR = os.path.normpath(os.path.join(os.path.dirname(__file__), "..", "..", "data"))


def _data_path(name: str) -> str:
    return os.path.join(_DATA_DIR, name)


def resolve_data_path(path_or_name: Optional[str], default_name: Optional[str] = None) -> str:
    """
    Resolution rules:
      1) If path_or_name is None -> use ./data/<default_name> (if provided) or raise.
      2) If path_or_name is an existing file (absolute or relative) -> use it.
      3) Else, try ./data/<basename(path_or_name)>.
      4) Else, raise FileNotFoundError listing attempted locations.
    """
    tried = []
    if path_or_name is None:
        if not default_name:
            raise FileNotFoundError("resolve_data_path: default_name is required when path_or_name is None")
        p = _data_path(default_name)
        if os.path.isfile(p):
            return p
        tried.append(p)
        raise FileNotFoundError(f"Missing required data file. Tried: {tried}")

    if os.path.isfile(path_or_name):
        return path_or_name
    tried.append(path_or_name)

    candidate = _data_path(os.path.basename(path_or_name))
    if os.path.isfile(candidate):
        return candidate
    tried.append(candidate)

    raise FileNotFoundError(f"No such file. Tried: {tried}")


@lru_cache(maxsize=None)
def load_json_config(path_or_name: Optional[str]) -> dict:
    """
    Load JSON config using resolve_data_path rules.
    Typical: load_json_config('slam_presets.json')
    """
    p = resolve_data_path(path_or_name, "slam_presets.json")
    with open(p, "r", encoding="utf-8") as f:
        return json.load(f)


def load_preset(name: str) -> dict:
    presets = load_json_config("slam_presets.json")
    if name not in presets:
        raise ConfigError(f"unknown SLAM preset {name!r}; available: {', '.join(sorted(presets))}")
    return dict(presets[name])


# -- run configuration ----------------------------------------------------------


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    threads: int = 1


@dataclass(frozen=True)
class CameraSection:
    f_x: Optional[float] = None
    f_y: Optional[float] = None
    c_x: Optional[float] = None
    c_y: Optional[float] = None
    width: Optional[int] = None
    height: Optional[int] = None
    baseline: Optional[float] = None


@dataclass(frozen=True)
class EstimatorSection:
    mode: str = "geometric"  # geometric | external
    predictions: Optional[str] = None
    max_iterations: int = 50
    tolerance: float = 1e-10
    huber_scale: float = 1.0
    stride: int = 2
    damping: float = 1e-6


@dataclass(frozen=True)
class SlamSection:
    preset: Optional[str] = None
    C_si: float = 10000.0
    C_r: float = 1.0
    T_loop: float = 50
    per_edge_covariance: bool = False
    information_method: str = "pinv"  # pinv | ridge
    max_iters: int = 100
    tol: float = 1e-9
    loop_flow: str = "file"  # file | oracle (ground-truth poses, simulator runs only)
    g2o_information: str = "7x7"  # 7x7 | 6x6 (graph.g2o edge blocks)


@dataclass(frozen=True)
class SigmaSection:
    sigma_tx: float = 0.02
    sigma_ty: float = 0.02
    sigma_tz: float = 0.02
    sigma_alpha: float = 0.002
    sigma_beta: float = 0.002
    sigma_gamma: float = 0.002


@dataclass(frozen=True)
class RelocSection:
    N_th: int = 20
    ratio: float = 0.7
    top_k: int = 20
    vocabulary_size: int = 64
    vocabulary: Optional[str] = None


@dataclass(frozen=True)
class MotionModelSection:
    """Optional truncation bounds, ``<dof> = lower, upper``."""

    t_x: Optional[str] = None
    t_y: Optional[str] = None
    t_z: Optional[str] = None
    alpha: Optional[str] = None
    beta: Optional[str] = None
    gamma: Optional[str] = None

    def bounds(self) -> dict:
        out = {}
        for dof in DOF_NAMES:
            raw = getattr(self, dof)
            if raw is None:
                continue
            parts = [p.strip() for p in raw.split(",")]
            try:
                lo, hi = (float(p) for p in parts)
            except ValueError:
                raise ConfigError(f"[motion_model] {dof} must be 'lower, upper', got {raw!r}") from None
            out[dof] = (lo, hi)
        return out


@dataclass(frozen=True)
class SimSection:
    half_extent: float = 8.0
    poses_per_segment: int = 25
    laps: float = 1.0
    heading_offset: float = -math.pi / 2
    smoothing: float = 2.0
    sprites: int = 40
    texture_frequency: float = 0.7
    texture_octaves: int = 4
    width: int = 160
    height: int = 120
    focal: float = 100.0


@dataclass(frozen=True)
class OdometryNoiseSection:
    enabled: bool = False
    sigma_t: float = 0.02
    sigma_rot: float = 0.002


_SECTIONS = {
    "run": RunSection,
    "camera": CameraSection,
    "estimator": EstimatorSection,
    "loop_estimator": EstimatorSection,
    "slam": SlamSection,
    "sigmas": SigmaSection,
    "reloc": RelocSection,
    "motion_model": MotionModelSection,
    "sim": SimSection,
    "odometry_noise": OdometryNoiseSection,
}

_CHOICES = {
    "mode": ("geometric", "external"),
    "information_method": ("pinv", "ridge"),
    "loop_flow": ("file", "oracle"),
    "g2o_information": ("7x7", "6x6"),
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    camera: CameraSection = field(default_factory=CameraSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    loop_estimator: EstimatorSection = field(default_factory=EstimatorSection)
    slam: SlamSection = field(default_factory=SlamSection)
    sigmas: SigmaSection = field(default_factory=SigmaSection)
    reloc: RelocSection = field(default_factory=RelocSection)
    motion_model: MotionModelSection = field(default_factory=MotionModelSection)
    sim: SimSection = field(default_factory=SimSection)
    odometry_noise: OdometryNoiseSection = field(default_factory=OdometryNoiseSection)
    base_dir: Path = field(default=Path("."), compare=False)

    def sigma_params(self) -> SigmaParams:
        return SigmaParams(**{f.name: getattr(self.sigmas, f.name) for f in fields(self.sigmas)})

    def hyper_params(self) -> HyperParams:
        return HyperParams(self.slam.C_si, self.slam.C_r, self.slam.T_loop)

    def intrinsics(self) -> Optional[Intrinsics]:
        """None when no camera section was given at all."""
        cam = self.camera
        values = {f.name: getattr(cam, f.name) for f in fields(cam)}
        required = [k for k in values if k != "baseline"]
        given = [k for k in required if values[k] is not None]
        if not given:
            return None
        missing = [k for k in required if values[k] is None]
        if missing:
            raise ConfigError(f"[camera] is missing {', '.join(missing)}")
        return Intrinsics(**values)

    def sim_intrinsics(self) -> Intrinsics:
        intr = self.intrinsics()
        if intr is not None:
            return intr
        s = self.sim
        return Intrinsics(s.focal, s.focal, s.width / 2.0, s.height / 2.0, s.width, s.height)

    def _source(self, section: EstimatorSection, name: str):
        if section.mode == "external":
            if not section.predictions:
                raise ConfigError(f"[{name}] mode = external needs a predictions file")
            path = Path(section.predictions)
            if not path.is_absolute():
                path = self.base_dir / path
            return ExternalPredictions(path, self.sigma_params(), self.hyper_params())
        return EstimatorConfig(
            section.max_iterations, section.tolerance, section.huber_scale, section.stride, section.damping
        )

    def estimator_policy(self) -> EstimatorPolicy:
        return EstimatorPolicy(
            self._source(self.estimator, "estimator"),
            self._source(self.loop_estimator, "loop_estimator"),
            self.slam.T_loop,
        )

    def trajectory_spec(self, seed: Optional[int] = None) -> TrajectorySpec:
        s, h = self.sim, self.sim.half_extent
        return TrajectorySpec(
            waypoints=((-h, -h), (h, -h), (h, h), (-h, h), (-h, -h)),
            poses_per_segment=s.poses_per_segment,
            laps=s.laps,
            heading_offset=s.heading_offset,
            smoothing=s.smoothing,
            sigma_t=self.odometry_noise.sigma_t,
            sigma_rot=self.odometry_noise.sigma_rot,
            seed=self.run.seed if seed is None else seed,
        )

    def scene(self, seed: Optional[int] = None) -> Scene:
        base = default_scene(self.run.seed if seed is None else seed, sprites=self.sim.sprites)
        return replace(base, texture_frequency=self.sim.texture_frequency, texture_octaves=self.sim.texture_octaves)


def _parse_float(text: str) -> float:
    if text.strip().lower() in ("inf", "+inf", "infinity", "off", "none"):
        return math.inf
    return float(text)


_TYPES = {
    "seed": int,
    "threads": int,
    "width": int,
    "height": int,
    "max_iterations": int,
    "stride": int,
    "max_iters": int,
    "N_th": int,
    "top_k": int,
    "vocabulary_size": int,
    "poses_per_segment": int,
    "sprites": int,
    "texture_octaves": int,
    "T_loop": _parse_float,
}
_STRINGS = {"mode", "predictions", "preset", "information_method", "loop_flow", "g2o_information", "vocabulary"} | set(DOF_NAMES)
_BOOLS = {"per_edge_covariance", "enabled"}


def _coerce(section: str, key: str, raw: str, where: str):
    if key in _STRINGS:
        if key in _CHOICES and raw not in _CHOICES[key]:
            raise ConfigError(f"{where}: [{section}] {key} must be one of {'|'.join(_CHOICES[key])}, got {raw!r}")
        return raw
    try:
        if key in _BOOLS:
            value = configparser.ConfigParser.BOOLEAN_STATES[raw.lower()]
        else:
            value = _TYPES.get(key, float)(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"{where}: [{section}] {key} = {raw!r} has the wrong type") from None
    return value


def _owners(key: str) -> list[str]:
    return [name for name, cls in _SECTIONS.items() if key in {f.name for f in fields(cls)}]


_HEADER = re.compile(r"^\s*\[")


def parse_config(text: str, where: str = "<config>", base_dir: Path = Path(".")) -> RunConfig:
    lines = text.splitlines()
    first = next((k for k, line in enumerate(lines) if _HEADER.match(line)), len(lines))
    body = "[__top__]\n" + "\n".join(lines[:first]) + "\n" + "\n".join(lines[first:])

    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive (C_si, N_th)
    try:
        parser.read_string(body, source=where)
    except configparser.Error as exc:
        raise ConfigError(f"{where}: {exc}") from None

    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if section == "__top__":
                owners = _owners(key)
                if len(owners) != 1:
                    reason = "unknown key" if not owners else f"ambiguous key (in {', '.join(owners)})"
                    raise ConfigError(f"{where}: {reason} {key!r} before any section header")
                target = owners[0]
            elif section not in _SECTIONS:
                raise ConfigError(f"{where}: unknown section [{section}]")
            else:
                target = section
                if key not in {f.name for f in fields(_SECTIONS[section])}:
                    raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
            values[target][key] = _coerce(target, key, raw, where)

    slam = values["slam"]
    if slam.get("preset"):
        preset = load_preset(slam["preset"])
        slam = {**{k: _coerce("slam", k, str(v), where) for k, v in preset.items()}, **slam}
        values["slam"] = slam

    try:
        sections = {name: cls(**values[name]) for name, cls in _SECTIONS.items()}
        cfg = RunConfig(**sections, base_dir=base_dir)
        cfg.hyper_params()
        cfg.sigma_params()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return cfg


def load_config(path: Optional[str]) -> RunConfig:
    """Run configuration from an INI-style file; None gives all defaults."""
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"No such config file: {p}")
    return parse_config(p.read_text(encoding="utf-8"), str(p), p.parent)
