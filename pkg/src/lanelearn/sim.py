"""Two-lane world simulation: ego kinematics, car-following traffic, prediction.

Conventions: s is the longitudinal position along the road (m), l the lateral
offset with l=0 at the original lane center and positive toward the target lane,
v the speed (m/s), phi the heading relative to the road axis (rad).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .config import Config, IdmConfig, RoadConfig, ScenarioConfig, VehicleConfig
from .errors import CollisionError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VehicleState:
    s: float
    v: float
    l: float
    phi: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.v, self.l, self.phi])


@dataclass(frozen=True)
class ControlInput:
    a: float = 0.0
    delta: float = 0.0


def _check_finite(name, *vals):
    for v in vals:
        if not math.isfinite(v):
            raise ValidationError(f"{name}: non-finite value {v!r}")


def step_ego(x: VehicleState, u: ControlInput, dt: float, l_fr: float,
             curvature: float = 0.0) -> VehicleState:
    """Advance the ego one step under the discrete kinematic model.

    The lateral and heading updates use the current speed, so for a shared
    speed schedule the map is exactly linear in (x, u). Speed is floored at 0.
    """
    _check_finite("step_ego state", x.s, x.v, x.l, x.phi)
    _check_finite("step_ego control", u.a, u.delta)
    if dt <= 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    return VehicleState(
        s=x.s + dt * x.v,
        v=max(x.v + dt * u.a, 0.0),
        l=x.l + dt * x.v * x.phi,
        phi=x.phi + dt * (x.v / l_fr * u.delta - x.v * curvature),
    )


def idm_accel(gap: float, v: float, dv: float, p: IdmConfig, v0: float) -> float:
    """Car-following acceleration. dv = own speed minus leader speed.

    gap is bumper-to-bumper; a non-positive gap returns the hard-braking value.
    """
    if gap <= 0.0:
        log.warning("idm_accel: non-positive gap %.3f, emergency braking", gap)
        return -p.decel_hard
    s_star = p.gap_min + v * p.headway + v * dv / (2.0 * math.sqrt(p.accel_max * p.decel_comfort))
    return p.accel_max * (1.0 - (v / v0) ** p.exponent - (s_star / gap) ** 2)


@dataclass(frozen=True)
class WorldState:
    tick: int
    ego: VehicleState
    preceding: VehicleState
    adjacent: VehicleState
    extras: tuple[VehicleState, ...] = ()
    road: RoadConfig = field(default_factory=RoadConfig)

    def vehicles(self) -> list[tuple[str, VehicleState]]:
        out = [("ego", self.ego), ("preceding", self.preceding), ("adjacent", self.adjacent)]
        out += [(f"extra{i}", x) for i, x in enumerate(self.extras)]
        return out


def _lane_of(l: float, road: RoadConfig) -> int:
    return int(round(l / road.lane_width))


def _leader_gap(me: VehicleState, others, veh: VehicleConfig, road: RoadConfig):
    """Nearest vehicle ahead in my lane; returns (gap, leader_v) or (None, None)."""
    best = None
    for o in others:
        if _lane_of(o.l, road) != _lane_of(me.l, road) or o.s <= me.s:
            continue
        if best is None or o.s < best.s:
            best = o
    if best is None:
        return None, None
    return best.s - me.s - veh.length, best.v


def _check_collisions(world: WorldState, veh: VehicleConfig) -> None:
    vs = world.vehicles()
    for i in range(len(vs)):
        for j in range(i + 1, len(vs)):
            (n1, a), (n2, b) = vs[i], vs[j]
            if abs(a.l - b.l) < veh.width and abs(a.s - b.s) < veh.length:
                raise CollisionError(world.tick, n1, n2)


def step_world(world: WorldState, ego_u: ControlInput, cfg: Config,
               bg_v0: float) -> WorldState:
    """One world tick: ego under ego_u, background vehicles under car following.

    Background vehicles hold their lane; their speed never drops below zero.
    Raises CollisionError on bumper overlap after the step.
    """
    dt = cfg.scenario.dt
    ego = step_ego(world.ego, ego_u, dt, cfg.vehicle.l_fr, cfg.road.curvature)

    def advance(me: VehicleState, others):
        gap, lead_v = _leader_gap(me, others, cfg.vehicle, world.road)
        if gap is None:
            a = idm_accel(1e9, me.v, 0.0, cfg.idm, bg_v0)
        else:
            a = idm_accel(gap, me.v, me.v - lead_v, cfg.idm, bg_v0)
        return VehicleState(s=me.s + dt * me.v, v=max(me.v + dt * a, 0.0),
                            l=me.l, phi=0.0)

    everyone = [world.ego, world.preceding, world.adjacent, *world.extras]
    preceding = advance(world.preceding, [v for v in everyone if v is not world.preceding])
    adjacent = advance(world.adjacent, [v for v in everyone if v is not world.adjacent])
    extras = tuple(advance(x, [v for v in everyone if v is not x]) for x in world.extras)

    out = WorldState(tick=world.tick + 1, ego=ego, preceding=preceding,
                     adjacent=adjacent, extras=extras, road=world.road)
    _check_collisions(out, cfg.vehicle)
    for name, v in out.vehicles():
        if v.s > world.road.length:
            log.debug("vehicle %s exited the road extent at s=%.1f", name, v.s)
    return out


@dataclass(frozen=True)
class BackgroundPrediction:
    """Constant-velocity forecast of the two reference neighbors, steps 0..K."""

    s_p: np.ndarray
    l_p: np.ndarray
    s_a: np.ndarray
    l_a: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.s_p) - 1


def predict_background(world: WorldState, K: int, dt: float) -> BackgroundPrediction:
    """Forecast preceding and adjacent positions over K steps, index 0 = now."""
    t = np.arange(K + 1) * dt
    return BackgroundPrediction(
        s_p=world.preceding.s + world.preceding.v * t,
        l_p=np.full(K + 1, world.preceding.l),
        s_a=world.adjacent.s + world.adjacent.v * t,
        l_a=np.full(K + 1, world.adjacent.l),
    )


def make_scenario_world(cfg: Config) -> WorldState:
    """Initial world for a scenario, deterministic given the config (seed included).

    Ego starts at s=0 in the original lane. The preceding vehicle is placed so the
    impedance trigger fires after a short pre-roll; the adjacent vehicle leads by
    the configured headway in the target lane. The seed jitters gaps slightly.
    """
    sc = cfg.scenario
    rng = np.random.default_rng(sc.seed)
    gap_jitter, adj_jitter, speed_jitter = rng.uniform(-1.0, 1.0, 3)
    bg_speed = sc.background_speed + 0.3 * speed_jitter
    if sc.preceding_gap is not None:
        pre_gap = sc.preceding_gap
    else:
        from .driver import style_profile  # late import, no cycle at module load
        prof = style_profile(sc.style, cfg.driver)
        # start inside the impedance window: the ego's own car following holds
        # a longer headway than the trigger, so approaching from outside would
        # equilibrate without ever firing
        pre_gap = sc.ego_speed * (prof.headway + 0.05)
    pre_gap += 2.0 * gap_jitter
    adj_gap = sc.adjacent_headway + 2.0 * adj_jitter
    lane_w = cfg.road.lane_width
    ego = VehicleState(s=0.0, v=sc.ego_speed, l=0.0, phi=0.0)
    preceding = VehicleState(s=pre_gap, v=bg_speed, l=0.0)
    adjacent = VehicleState(s=adj_gap, v=bg_speed, l=lane_w)
    extras = ()
    if sc.include_follower:
        extras = (VehicleState(s=-sc.follower_gap, v=bg_speed, l=lane_w),)
    world = WorldState(tick=0, ego=ego, preceding=preceding, adjacent=adjacent,
                       extras=extras, road=cfg.road)
    if not preceding.s > ego.s:
        raise ValidationError("preceding vehicle must start ahead of the ego")
    return world
