"""Simulated driver: style profiles, the expected maneuver, takeover monitoring,
and the corrective controller used after an intervention."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import DriverConfig, IdmConfig, VehicleConfig
from .errors import ValidationError
from .sim import BackgroundPrediction, ControlInput, VehicleState, idm_accel

# style -> (desired time headway s, lane change duration s)
STYLES = {
    "aggressive": (1.15, 1.7),
    "neutral": (1.23, 2.1),
    "cautious": (1.76, 2.5),
}


@dataclass(frozen=True)
class DriverProfile:
    style: str
    headway: float
    duration: float
    threshold: float


def style_profile(style: str, cfg: DriverConfig) -> DriverProfile:
    if style not in STYLES:
        raise ValidationError(f"unknown driver style '{style}'")
    headway, duration = STYLES[style]
    return DriverProfile(style=style, headway=headway, duration=duration,
                         threshold=cfg.threshold)


@dataclass(frozen=True)
class ExpectedTrajectory:
    """What the driver expects the vehicle to do from the maneuver start tick."""

    lat: np.ndarray    # lateral position per tick, held at target past the end
    speed: np.ndarray  # reference speed per tick
    duration_ticks: int

    def lat_at(self, tick: int) -> float:
        return float(self.lat[min(max(tick, 0), len(self.lat) - 1)])

    def speed_at(self, tick: int) -> float:
        return float(self.speed[min(max(tick, 0), len(self.speed) - 1)])


def _quintic(tau: np.ndarray) -> np.ndarray:
    """Minimum-jerk 0->1 blend with zero velocity and acceleration at both ends."""
    return 10.0 * tau ** 3 - 15.0 * tau ** 4 + 6.0 * tau ** 5


def expected_trajectory(profile: DriverProfile, start: VehicleState,
                        l_target: float, prediction: BackgroundPrediction,
                        v_desired: float, dt: float, n_ticks: int,
                        idm: IdmConfig, veh: VehicleConfig) -> ExpectedTrajectory:
    """Style-parameterized expectation: minimum-jerk lateral motion over the
    style duration, and a car-following speed profile with the style headway
    against the target-lane leader."""
    n_style = max(int(math.ceil(profile.duration / dt)), 1)
    ticks = np.arange(n_ticks + 1)
    tau = np.clip(ticks / n_style, 0.0, 1.0)
    lat = start.l + (l_target - start.l) * _quintic(tau)

    style_idm = IdmConfig(headway=profile.headway, accel_max=idm.accel_max,
                          decel_comfort=idm.decel_comfort, gap_min=idm.gap_min,
                          exponent=idm.exponent, decel_hard=idm.decel_hard)
    v_lead = (prediction.s_a[1] - prediction.s_a[0]) / dt if len(prediction.s_a) > 1 else start.v
    speed = np.empty(n_ticks + 1)
    s = start.s
    v = start.v
    for t in range(n_ticks + 1):
        speed[t] = v
        i = min(t, len(prediction.s_a) - 1)
        lead_s = prediction.s_a[i] + (t - i) * dt * v_lead
        gap = lead_s - s - veh.length
        a = idm_accel(gap, v, v - v_lead, style_idm, v_desired) if gap > 0 else -style_idm.decel_hard
        s += dt * v
        v = max(v + dt * a, 0.0)
    return ExpectedTrajectory(lat=lat, speed=speed, duration_ticks=n_style)


@dataclass(frozen=True)
class TakeoverEvent:
    tick: int            # maneuver-relative
    deviation: float
    actual_l: float
    expected_l: float


def monitor(actual_l, expected: ExpectedTrajectory,
            profile: DriverProfile) -> TakeoverEvent | None:
    """First tick where the executed lateral position strays from the expectation
    by at least the threshold; equal time indices, lateral only, >= fires."""
    actual = np.atleast_1d(np.asarray(actual_l, dtype=float))
    for t in range(len(actual)):
        dev = abs(actual[t] - expected.lat_at(t))
        if dev >= profile.threshold:
            return TakeoverEvent(tick=t, deviation=float(dev),
                                 actual_l=float(actual[t]),
                                 expected_l=expected.lat_at(t))
    return None


def human_control(state: VehicleState, expected: ExpectedTrajectory, tick: int,
                  dt: float, cfg: DriverConfig, steer_max: float,
                  accel_max: float, l_fr: float) -> ControlInput:
    """Corrective tracking of the expected trajectory after a takeover.

    Lateral error maps to a commanded heading (capped), heading error to steering;
    speed error maps to acceleration. All outputs respect the actuation boxes.
    """
    l_ref = expected.lat_at(tick + 1)
    v = max(state.v, 1.0)
    # heading that produces the reference lateral rate: dl = dt * v * phi
    phi_ff = (expected.lat_at(tick + 1) - expected.lat_at(tick)) / (dt * v)
    phi_des = cfg.gain_lateral * (l_ref - state.l) + phi_ff
    phi_des = float(np.clip(phi_des, -cfg.heading_cap, cfg.heading_cap))
    delta = float(np.clip(cfg.gain_heading * (phi_des - state.phi),
                          -steer_max, steer_max))
    a = float(np.clip(cfg.gain_speed * (expected.speed_at(tick) - state.v),
                      -accel_max, accel_max))
    return ControlInput(a=a, delta=delta)


def impeded(ego: VehicleState, preceding: VehicleState, profile: DriverProfile,
            margin: float) -> bool:
    """Impedance test behind the preceding vehicle: time headway below the
    style's desired headway plus a margin."""
    if ego.v <= 0:
        return False
    return (preceding.s - ego.s) / ego.v < profile.headway + margin
