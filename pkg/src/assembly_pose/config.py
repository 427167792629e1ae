"""Run configuration: a TOML file layered over documented defaults."""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dataset import GenConfig
from .parts import PartSpec, builtin_catalog
from .sensor import SensorNoiseConfig

DEFAULT_CONFIG = """\
# Master seed; every output records it.
seed = 0
# Directory for outputs when a subcommand gets no --out.
output_dir = "out"

[generation]
# 1 = distal multi-part scenes, 2 = single-part close-ups.
stage = 1
scene_count = 50
# Capture heights above the table (m).
stage1_height = 0.53
stage2_height = 0.31
# Probabilities for 1..5 parts per stage-1 scene.
part_count_weights = [0.1, 0.2, 0.3, 0.2, 0.2]
# Stage-2 prior perturbation half-widths (m, deg).
delta_xy = 0.010
delta_theta = 10.0
# Gap kept between bounding circles of neighbouring parts (m).
separation_margin = 0.005
placement_attempts = 1000
# Close-up datasets: part class and near-symmetry branch to generate.
stage2_class = "Gear1"
stage2_subclass = 0

[noise]
# false renders clean images (quantization still applies).
enabled = true
# Per-image pixel noise sigma range before blur (m).
pixel_noise_sigma_range = [0.005, 0.03]
# Per-image Gaussian blur sigma range (px).
blur_sigma_range = [2.0, 5.0]
# Clamp-and-stretch window (m).
depth_min = 0.2
depth_max = 0.8
dropout_enabled = false
dropout_gradient_threshold = 0.01

[catalog]
# Size of the near-symmetry breaking features (m).
asymmetry_scale = 0.002

# Per-class overrides, e.g.
# [catalog.overrides.Gear_1]
# asymmetry_scale = 0.003
# dims = { thickness = 0.012 }
# insertion = { R = 0.0041, r = 0.004 }
# grasp_in_part = [1, 0, 0, 0, 0, -1, 0, 0, 0, 0, -1, 0.012]
[catalog.overrides]

[assembly]
trials = 1000
# "zero", "uniform_disk" (error_radius) or "gaussian" (error_sigma).
error_model = "gaussian"
error_radius = 0.002
error_sigma = 0.001
# Lattice spacing override (m); 0 keeps 2 (R - r).
spacing = 0.0

[lattice]
# Hole and peg radii (m) and search area (m).
R = 0.0105
r = 0.01
search_area = [0.010, 0.010]
# 0 keeps 2 (R - r).
spacing = 0.0
"""


class ConfigError(ValueError):
    """Unreadable or invalid configuration."""


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        where = f"{path}{k}"
        if k not in base and not path.startswith("catalog.overrides"):
            raise ConfigError(f"unknown configuration key '{where}'")
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


@dataclass(frozen=True)
class RunConfig:
    data: dict

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls(tomllib.loads(DEFAULT_CONFIG))

    @classmethod
    def load(cls, path: str | Path | None = None, seed: int | None = None) -> "RunConfig":
        data = tomllib.loads(DEFAULT_CONFIG)
        if path is not None:
            try:
                user = tomllib.loads(Path(path).read_text())
            except OSError as exc:
                raise ConfigError(f"cannot read config '{path}': {exc.strerror or exc}") from exc
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"config '{path}' is not valid TOML: {exc}") from exc
            data = _merge(data, user)
        if seed is not None:
            data["seed"] = int(seed)
        cfg = cls(data)
        cfg.validate()
        return cfg

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = cls(_merge(tomllib.loads(DEFAULT_CONFIG), data))
        cfg.validate()
        return cfg

    def validate(self):
        try:
            self.gen_config()
            self.noise_config()
            if self.data["generation"]["stage"] not in (1, 2):
                raise ValueError("generation.stage must be 1 or 2")
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def stage(self) -> int:
        return int(self.data["generation"]["stage"])

    def digest(self) -> str:
        blob = json.dumps(self.data, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def gen_config(self) -> GenConfig:
        g = self.data["generation"]
        return GenConfig(
            stage1_height=float(g["stage1_height"]), stage2_height=float(g["stage2_height"]),
            part_count_weights=tuple(g["part_count_weights"]), scene_count=int(g["scene_count"]),
            delta_xy=float(g["delta_xy"]), delta_theta=float(g["delta_theta"]), master_seed=self.seed,
            separation_margin=float(g["separation_margin"]),
            placement_attempts=int(g["placement_attempts"]),
        )

    def noise_config(self) -> SensorNoiseConfig:
        n = self.data["noise"]
        common = dict(depth_min=float(n["depth_min"]), depth_max=float(n["depth_max"]),
                      dropout_enabled=bool(n["dropout_enabled"]),
                      dropout_gradient_threshold=float(n["dropout_gradient_threshold"]))
        if not n["enabled"]:
            return SensorNoiseConfig.noiseless(**common)
        return SensorNoiseConfig(pixel_noise_sigma_range=tuple(n["pixel_noise_sigma_range"]),
                                 blur_sigma_range=tuple(n["blur_sigma_range"]), **common)

    def catalog(self) -> list[PartSpec]:
        c = self.data["catalog"]
        try:
            return builtin_catalog(float(c["asymmetry_scale"]), c.get("overrides") or None)
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad catalog override: {exc}") from exc
