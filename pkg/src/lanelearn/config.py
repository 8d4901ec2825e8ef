"""Configuration: scenario description plus tunables for every stage.

All defaults live here. A plain-text config file (ini sections, key = value)
can override any of them; CLI flags override the file.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .errors import ValidationError

MPH_TO_MPS = 0.44704


@dataclass(frozen=True)
class ScenarioConfig:
    """One driving scenario: speeds in m/s, gaps in meters."""

    ego_speed: float = 45.0 * MPH_TO_MPS
    background_speed: float = 40.0 * MPH_TO_MPS
    adjacent_headway: float = 40.0
    style: str = "neutral"
    seed: int = 0
    dt: float = 0.05
    preceding_gap: float | None = None  # None = style-derived placement
    include_follower: bool = False
    follower_gap: float = 30.0

    def family_key(self) -> str:
        """Scenario family for experience transfer: speeds and style, not headway."""
        return f"{self.ego_speed:.4f}-{self.background_speed:.4f}-{self.style}"

    def cell_id(self) -> str:
        return (f"{self.ego_speed:.4f}-{self.background_speed:.4f}"
                f"-h{self.adjacent_headway:g}-{self.style}")


@dataclass(frozen=True)
class RoadConfig:
    length: float = 200.0
    lane_width: float = 3.5
    lane_count: int = 2
    curvature: float = 0.0


@dataclass(frozen=True)
class VehicleConfig:
    l_fr: float = 2.8     # front-to-rear axle distance, m
    length: float = 5.0
    width: float = 1.8


@dataclass(frozen=True)
class IdmConfig:
    headway: float = 1.5
    accel_max: float = 1.4
    decel_comfort: float = 2.0
    gap_min: float = 2.0
    exponent: float = 4.0
    decel_hard: float = 6.0   # emergency value returned for non-positive gaps


@dataclass(frozen=True)
class ZoneConfig:
    grid_s: float = 1.0
    grid_l: float = 0.1
    covariance: str = "pooled"    # "pooled" or "paper-literal"
    epsilon_scale: float = 1e-6
    min_samples: int = 8


@dataclass(frozen=True)
class PlannerConfig:
    k_min: int = 20
    k_max: int = 120
    lat_rate_max: float = 0.85    # m/s used by horizon selection
    steer_max: float = 0.35       # rad
    accel_max: float = 3.0        # m/s^2
    ridge: float = 1e-4           # fixed control regularization outside learned w
    convexity_eps: float = 1e-6
    pin_terminal_s: bool = False
    w_max: float = 1000.0
    w0_lane_hold: float = 2.0     # cold-start penalty on lateral offset squared
    w0_steer: float = 50.0        # cold-start steering stiffness; keeps the
                                  # normalized reward update contractive


@dataclass(frozen=True)
class LearningConfig:
    eta: float = 0.5
    window_before: int = 10
    window_after: int = 20
    labeling: str = "lesson"      # "lesson" or "literal"
    pref_weight: float = 10.0     # lateral midline preference in the expert problem
    scale_floor: float = 1e-6


@dataclass(frozen=True)
class DriverConfig:
    threshold: float = 0.3        # m, lateral deviation that triggers takeover
    trigger_margin: float = 0.3   # s, added to the style headway for the impedance trigger
    trigger_ticks: int = 10
    gain_lateral: float = 0.4     # rad per m of lateral error
    gain_speed: float = 0.5       # 1/s
    gain_heading: float = 1.5     # steering per rad of heading error
    heading_cap: float = 0.25     # rad, commanded heading limit


@dataclass(frozen=True)
class HarnessConfig:
    max_iterations: int = 60
    streak: int = 3
    verify_episodes: int = 5
    buffer_ticks: int = 40
    max_preroll_ticks: int = 600


@dataclass(frozen=True)
class Config:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    road: RoadConfig = field(default_factory=RoadConfig)
    vehicle: VehicleConfig = field(default_factory=VehicleConfig)
    idm: IdmConfig = field(default_factory=IdmConfig)
    zone: ZoneConfig = field(default_factory=ZoneConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    learning: LearningConfig = field(default_factory=LearningConfig)
    driver: DriverConfig = field(default_factory=DriverConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)


_SECTIONS = {
    "scenario": ScenarioConfig,
    "road": RoadConfig,
    "vehicle": VehicleConfig,
    "idm": IdmConfig,
    "zone": ZoneConfig,
    "planner": PlannerConfig,
    "learning": LearningConfig,
    "driver": DriverConfig,
    "harness": HarnessConfig,
}

# config-file conveniences: speeds may be given in mph
_MPH_KEYS = {"ego_speed_mph": "ego_speed", "background_speed_mph": "background_speed"}


def _coerce(raw: str, target_type, key: str):
    raw = raw.strip()
    if target_type is float or target_type == float | None:
        if raw.lower() in ("auto", "none", ""):
            return None
        return float(raw)
    if target_type is int:
        return int(raw)
    if target_type is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"config key '{key}': bad boolean '{raw}'")
    return raw


def load_config(path: str | None = None, overrides: dict | None = None) -> Config:
    """Build a Config from defaults, an optional ini file, and override pairs.

    overrides maps "section.key" to a value (already typed, or a string to coerce).
    Unknown sections or keys raise ValidationError.
    """
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        read = parser.read(path)
        if not read:
            raise ValidationError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ValidationError(f"unknown config section [{section}]")
            cls = _SECTIONS[section]
            fields = {f.name: f for f in dataclasses.fields(cls)}
            for key, raw in parser.items(section):
                name = _MPH_KEYS.get(key, key)
                if name not in fields:
                    raise ValidationError(f"unknown config key {section}.{key}")
                val = _coerce(raw, _field_type(cls, name), f"{section}.{key}")
                if key in _MPH_KEYS and val is not None:
                    val = val * MPH_TO_MPS
                values[section][name] = val
    for dotted, val in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in _SECTIONS:
            raise ValidationError(f"unknown config section '{section}'")
        cls = _SECTIONS[section]
        fields = {f.name for f in dataclasses.fields(cls)}
        if key not in fields:
            raise ValidationError(f"unknown config key {dotted}")
        if isinstance(val, str):
            val = _coerce(val, _field_type(cls, key), dotted)
        values[section][key] = val
    parts = {}
    for name, cls in _SECTIONS.items():
        parts[name] = cls(**values[name])
    cfg = Config(**parts)
    _validate(cfg)
    return cfg


def _field_type(cls, name):
    named = {"float": float, "int": int, "bool": bool, "str": str,
             "float | None": float | None}
    for f in dataclasses.fields(cls):
        if f.name == name:
            return named.get(f.type, str) if isinstance(f.type, str) else f.type
    raise ValidationError(f"no such field {name}")


def _validate(cfg: Config) -> None:
    sc = cfg.scenario
    if sc.dt <= 0:
        raise ValidationError("scenario.dt must be positive")
    if sc.ego_speed <= 0 or sc.background_speed <= 0:
        raise ValidationError("speeds must be positive")
    if sc.style not in ("aggressive", "neutral", "cautious"):
        raise ValidationError(f"unknown driver style '{sc.style}'")
    if cfg.zone.covariance not in ("pooled", "paper-literal"):
        raise ValidationError(f"unknown covariance mode '{cfg.zone.covariance}'")
    if cfg.learning.labeling not in ("lesson", "literal"):
        raise ValidationError(f"unknown labeling mode '{cfg.learning.labeling}'")
    if cfg.planner.k_min < 1 or cfg.planner.k_max < cfg.planner.k_min:
        raise ValidationError("planner horizon bounds malformed")
