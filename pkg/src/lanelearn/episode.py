"""One lane-change episode: pre-roll to the impedance trigger, plan, execute
with the takeover monitor, and fold any intervention back into the weights.

The pre-roll is a pure function of the config, so every episode of a scenario
starts the maneuver from the identical world state and the plan produced by the
previous iteration's update can be executed directly.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .config import Config
from .driver import (DriverProfile, ExpectedTrajectory, TakeoverEvent,
                     expected_trajectory, human_control, impeded, style_profile)
from .errors import CollisionError, ValidationError
from .learning import LearningState, Lesson, _resolve_corridor, update_policy
from .planner import PlanningProblem, Trajectory, choose_horizon, plan
from .sim import (ControlInput, VehicleState, WorldState, idm_accel,
                  make_scenario_world, predict_background, step_world)
from .zone import (SampleStore, extract_zone, full_zone, label_lesson,
                   project_bounds)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ManeuverTick:
    """Executed state at one maneuver tick plus the control applied there.

    The final tick of a maneuver carries zero controls (never applied).
    Neighbor speeds are logged so the world can be rebuilt for replay.
    """

    tick: int
    ego_s: float
    ego_v: float
    ego_l: float
    ego_phi: float
    p_s: float
    p_v: float
    p_l: float
    a_s: float
    a_v: float
    a_l: float
    operator: str          # "adas" or "human"
    accel: float
    steer: float
    extras: tuple = ()     # optional (s, v, l) triples


class EpisodeHooks:
    """Observer / driver-override points for an interactive session.

    The default implementation is inert; the automated loop uses it as-is.
    A UI session overrides takeover/control to splice a human in and on_tick
    to stream frames.
    """

    def on_maneuver_start(self, world: WorldState, traj: Trajectory,
                          expected: ExpectedTrajectory, zone) -> None:
        pass

    def on_tick(self, tick: int, world: WorldState, u: ControlInput,
                operator: str) -> None:
        pass

    def takeover(self, tick: int, ego_l: float) -> bool:
        """Extra takeover trigger (client-initiated); polled once per tick."""
        return False

    def control(self, tick: int, state: VehicleState) -> ControlInput | None:
        """Post-takeover control override; None falls back to the corrective
        controller."""
        return None

    def on_end(self, record: "EpisodeRecord") -> None:
        pass


@dataclass
class EpisodeRecord:
    scenario_id: str
    episode: int
    iteration: int                    # weight-update count when the plan was made
    takeover: TakeoverEvent | None
    ratio: float                      # distance covered before takeover / planned length
    plan_time: float
    learn_time: float
    collision: bool
    ticks: list[ManeuverTick]
    plan_states: np.ndarray           # (K+1, 4) planned states, maneuver-aligned
    plan_controls: np.ndarray         # (K, 2)
    expected_lat: np.ndarray
    expected_speed: np.ndarray
    zone_boundary: np.ndarray | None  # rim active while planning this episode
    zone_cells: int
    zone_cells_after: int             # after the lesson (0 when none ran)
    delta_w_norm: float
    events: list[str] = field(default_factory=list)
    maneuver_start_tick: int = 0
    K: int = 0
    dt: float = 0.05

    @property
    def success(self) -> bool:
        return self.takeover is None and not self.collision


def preroll(cfg: Config) -> tuple[WorldState, list[ManeuverTick]]:
    """Drive the ego with car following until the impedance trigger holds for
    the configured number of consecutive ticks. Deterministic given cfg.

    Returns the maneuver start state and the car-following trail, indexed with
    negative maneuver-relative ticks. The trail states are accepted automated
    driving and anchor the safe class at the start configuration, which early
    takeovers would otherwise label purely unsafe.
    """
    world = make_scenario_world(cfg)
    profile = style_profile(cfg.scenario.style, cfg.driver)
    bg_v0 = cfg.scenario.background_speed
    consecutive = 0
    raw: list[tuple[WorldState, float]] = []
    for _ in range(cfg.harness.max_preroll_ticks):
        if impeded(world.ego, world.preceding, profile, cfg.driver.trigger_margin):
            consecutive += 1
            if consecutive >= cfg.driver.trigger_ticks:
                trail = []
                for j, (w, a) in enumerate(raw):
                    e, p, av = w.ego, w.preceding, w.adjacent
                    trail.append(ManeuverTick(
                        tick=j - len(raw), ego_s=e.s, ego_v=e.v, ego_l=e.l,
                        ego_phi=e.phi, p_s=p.s, p_v=p.v, p_l=p.l,
                        a_s=av.s, a_v=av.v, a_l=av.l, operator="adas",
                        accel=a, steer=0.0,
                        extras=tuple((x.s, x.v, x.l) for x in w.extras)))
                return world, trail
        else:
            consecutive = 0
        gap = world.preceding.s - world.ego.s - cfg.vehicle.length
        a = idm_accel(gap, world.ego.v, world.ego.v - world.preceding.v,
                      cfg.idm, cfg.scenario.ego_speed)
        # actuator box: unclipped car following can brake hard enough to push
        # the headway back out of the trigger window mid confirmation
        a = float(np.clip(a, -cfg.planner.accel_max, cfg.planner.accel_max))
        raw.append((world, a))
        world = step_world(world, ControlInput(a=a, delta=0.0), cfg, bg_v0)
    raise ValidationError(
        "impedance trigger never fired within the pre-roll cap; "
        "check preceding_gap / speeds")


def _plan_inline(cfg: Config, ls: LearningState, world: WorldState,
                 target_l: float):
    """Plan from the current learning state when no carried-over plan exists
    (first episode, or first episode after an experience load)."""
    start = world.ego
    dt = cfg.scenario.dt
    k_max = cfg.planner.k_max
    if ls.zone is not None:
        zone = ls.zone
    elif ls.gda is not None:
        wide = predict_background(world, k_max, dt)
        zone = extract_zone(ls.gda, start, wide, cfg.road, k_max, dt, cfg.zone)
    else:
        zone = full_zone(start, cfg.road, k_max, dt, cfg.zone, "cold start")
    K = choose_horizon(zone, target_l, start.v, dt, cfg.planner)
    prediction = predict_background(world, K, dt)
    profile = style_profile(cfg.scenario.style, cfg.driver)
    expected = expected_trajectory(profile, start, target_l, prediction,
                                   cfg.scenario.ego_speed, dt,
                                   K + cfg.harness.buffer_ticks,
                                   cfg.idm, cfg.vehicle)
    lo = -0.5 * cfg.road.lane_width
    hi = (cfg.road.lane_count - 0.5) * cfg.road.lane_width
    prob = PlanningProblem(
        start=start, terminal_v=expected.speed_at(K), terminal_l=target_l,
        K=K, dt=dt, l_min=np.full(K + 1, lo), l_max=np.full(K + 1, hi),
        prediction=prediction, road=cfg.road,
        steer_max=cfg.planner.steer_max, accel_max=cfg.planner.accel_max,
        l_fr=cfg.vehicle.l_fr)
    if not zone.fallback:
        ref_s = start.s + start.v * dt * np.arange(K + 1)
        ref_l = np.linspace(start.l, target_l, K + 1)
        l_min, l_max = project_bounds(zone, ref_s, ref_l, cfg.road)
        l_min, l_max, _ = _resolve_corridor(l_min, l_max, prob, cfg)
        prob = replace(prob, l_min=l_min, l_max=l_max)
    traj = plan(prob, ls.w.for_horizon(K), cfg.planner)
    return traj, prob, expected, zone


def run_episode(cfg: Config, ls: LearningState, episode_index: int,
                hooks: EpisodeHooks | None = None,
                force_takeover_tick: int | None = None) -> EpisodeRecord:
    """Execute one episode and, when a takeover happened, run the lesson
    pipeline. The learning state is mutated only here, at the episode end."""
    hooks = hooks or EpisodeHooks()
    dt = cfg.scenario.dt
    target_l = cfg.road.lane_width
    world, pre_trail = preroll(cfg)
    start_tick = world.tick
    bg_v0 = cfg.scenario.background_speed
    profile = style_profile(cfg.scenario.style, cfg.driver)

    t_plan0 = time.perf_counter()
    if ls.next_plan is not None:
        prob = ls.next_problem
        if not np.allclose(world.ego.as_array(), prob.start.as_array(),
                           atol=1e-9):
            raise ValidationError(
                "carried-over plan does not match the maneuver start state")
        traj = ls.next_plan
        K = prob.K
        active_zone = ls.zone
        expected = expected_trajectory(profile, world.ego, target_l,
                                       prob.prediction, cfg.scenario.ego_speed,
                                       dt, K + cfg.harness.buffer_ticks,
                                       cfg.idm, cfg.vehicle)
        plan_time = 0.0
    else:
        traj, prob, expected, active_zone = _plan_inline(cfg, ls, world,
                                                         target_l)
        K = prob.K
        plan_time = time.perf_counter() - t_plan0

    zone_boundary = (active_zone.boundary.copy()
                     if active_zone is not None else None)
    zone_cells = active_zone.cell_count if active_zone is not None else 0
    hooks.on_maneuver_start(world, traj, expected, active_zone)

    ticks: list[ManeuverTick] = []
    takeover: TakeoverEvent | None = None
    collision = False
    t = 0

    def record_tick(u: ControlInput, operator: str) -> None:
        e, p, a = world.ego, world.preceding, world.adjacent
        ticks.append(ManeuverTick(
            tick=t, ego_s=e.s, ego_v=e.v, ego_l=e.l, ego_phi=e.phi,
            p_s=p.s, p_v=p.v, p_l=p.l, a_s=a.s, a_v=a.v, a_l=a.l,
            operator=operator, accel=u.a, steer=u.delta,
            extras=tuple((x.s, x.v, x.l) for x in world.extras)))

    while True:
        if takeover is None:
            if t >= K:
                break
            operator = "adas"
            u = ControlInput(a=float(traj.controls[t, 0]),
                             delta=float(traj.controls[t, 1]))
        else:
            done = (t >= K and abs(world.ego.l - target_l) < 0.1
                    and abs(world.ego.phi) < 0.05)
            if done or t >= K + cfg.harness.buffer_ticks:
                break
            operator = "human"
            u = hooks.control(t, world.ego) or human_control(
                world.ego, expected, t, dt, cfg.driver,
                cfg.planner.steer_max, cfg.planner.accel_max,
                cfg.vehicle.l_fr)
        record_tick(u, operator)
        hooks.on_tick(t, world, u, operator)
        try:
            world = step_world(world, u, cfg, bg_v0)
        except CollisionError as e:
            log.warning("episode %d: %s", episode_index, e)
            collision = True
            break
        t += 1
        if takeover is None:
            expected_l = expected.lat_at(t)
            dev = abs(world.ego.l - expected_l)
            fired = dev >= profile.threshold
            if force_takeover_tick is not None:
                fired = t >= force_takeover_tick
            if not fired and hooks.takeover(t, world.ego.l):
                fired = True
            if fired:
                takeover = TakeoverEvent(tick=t, deviation=float(dev),
                                         actual_l=float(world.ego.l),
                                         expected_l=float(expected_l))

    if not collision:
        record_tick(ControlInput(), "human" if takeover is not None else "adas")
        hooks.on_tick(t, world, ControlInput(),
                      "human" if takeover is not None else "adas")

    planned_length = float(traj.states[K, 0] - traj.states[0, 0])
    if takeover is None and not collision:
        ratio = 1.0
    else:
        stop = takeover.tick if takeover is not None else t
        covered = ticks[min(stop, len(ticks) - 1)].ego_s - ticks[0].ego_s
        ratio = float(np.clip(covered / planned_length, 0.0, 1.0))

    iteration = ls.t
    learn_time = 0.0
    delta_w_norm = 0.0
    zone_after = 0
    events: list[str] = []
    if takeover is not None and not collision:
        t_learn0 = time.perf_counter()
        labels = label_lesson(pre_trail + ticks, traj.states, prob.prediction,
                              takeover.tick, ls.t,
                              mode=cfg.learning.labeling,
                              window_before=cfg.learning.window_before,
                              window_after=cfg.learning.window_after)
        store = SampleStore()
        store.extend(labels)
        executed = np.array([[tk.ego_s, tk.ego_l]
                             for tk in ticks[:K + 1]])
        lesson = Lesson(episode=episode_index, takeover_tick=takeover.tick,
                        samples=store, plan=traj, problem=prob,
                        executed=executed)
        w_old = ls.w.w.copy()
        w_new, _ = update_policy(ls, lesson, cfg)
        learn_time = time.perf_counter() - t_learn0
        delta_w_norm = float(np.linalg.norm(w_new.w - w_old))
        zone_after = ls.zone.cell_count if ls.zone is not None else 0
        events = list(ls.last_events)
    elif takeover is None and not collision:
        # accepted plan: replay it next episode unchanged
        ls.next_plan = traj
        ls.next_problem = prob

    record = EpisodeRecord(
        scenario_id=cfg.scenario.cell_id(), episode=episode_index,
        iteration=iteration, takeover=takeover, ratio=ratio,
        plan_time=plan_time, learn_time=learn_time, collision=collision,
        ticks=ticks, plan_states=traj.states.copy(),
        plan_controls=traj.controls.copy(),
        expected_lat=expected.lat.copy(), expected_speed=expected.speed.copy(),
        zone_boundary=zone_boundary, zone_cells=zone_cells,
        zone_cells_after=zone_after, delta_w_norm=delta_w_norm,
        events=events, maneuver_start_tick=start_tick, K=K, dt=dt)
    hooks.on_end(record)
    return record


def replay_deviation(record: EpisodeRecord, cfg: Config) -> float:
    """Re-simulate the recorded control log from the recorded start and return
    the largest absolute difference against the logged trajectory."""
    first = record.ticks[0]
    world = WorldState(
        tick=record.maneuver_start_tick,
        ego=VehicleState(s=first.ego_s, v=first.ego_v, l=first.ego_l,
                         phi=first.ego_phi),
        preceding=VehicleState(s=first.p_s, v=first.p_v, l=first.p_l),
        adjacent=VehicleState(s=first.a_s, v=first.a_v, l=first.a_l),
        extras=tuple(VehicleState(s=s, v=v, l=l) for s, v, l in first.extras),
        road=cfg.road)
    worst = 0.0
    for i, tk in enumerate(record.ticks[:-1]):
        world = step_world(world, ControlInput(a=tk.accel, delta=tk.steer),
                           cfg, cfg.scenario.background_speed)
        nxt = record.ticks[i + 1]
        worst = max(
            worst,
            abs(world.ego.s - nxt.ego_s), abs(world.ego.v - nxt.ego_v),
            abs(world.ego.l - nxt.ego_l), abs(world.ego.phi - nxt.ego_phi),
            abs(world.preceding.s - nxt.p_s), abs(world.adjacent.s - nxt.a_s))
    return worst


def write_episode_jsonl(record: EpisodeRecord, path) -> None:
    """One episode as line-delimited JSON: a meta line, overlay lines (zone,
    plan, expected), then one line per executed tick. No wall-clock values."""
    with open(path, "w") as f:
        meta = {
            "type": "meta", "scenario": record.scenario_id,
            "episode": record.episode, "iteration": record.iteration,
            "K": record.K, "dt": record.dt,
            "maneuver_start_tick": record.maneuver_start_tick,
            "takeover_tick": record.takeover.tick if record.takeover else None,
            "ratio": record.ratio, "collision": record.collision,
            "zone_cells": record.zone_cells,
            "zone_cells_after": record.zone_cells_after,
            "delta_w_norm": record.delta_w_norm, "events": record.events,
        }
        f.write(json.dumps(meta) + "\n")
        if record.zone_boundary is not None:
            f.write(json.dumps({"type": "zone",
                                "boundary": record.zone_boundary.tolist()}) + "\n")
        f.write(json.dumps({"type": "plan",
                            "states": record.plan_states.tolist(),
                            "controls": record.plan_controls.tolist()}) + "\n")
        f.write(json.dumps({"type": "expected",
                            "lat": record.expected_lat.tolist(),
                            "speed": record.expected_speed.tolist()}) + "\n")
        for tk in record.ticks:
            row = {"type": "tick", "tick": tk.tick,
                   "ego": [tk.ego_s, tk.ego_v, tk.ego_l, tk.ego_phi],
                   "preceding": [tk.p_s, tk.p_v, tk.p_l],
                   "adjacent": [tk.a_s, tk.a_v, tk.a_l],
                   "control": [tk.accel, tk.steer], "operator": tk.operator}
            if tk.extras:
                row["extras"] = [list(x) for x in tk.extras]
            f.write(json.dumps(row) + "\n")


def read_episode_jsonl(path) -> EpisodeRecord:
    """Inverse of write_episode_jsonl (wall times come back as zero)."""
    meta = None
    zone_boundary = None
    plan_states = plan_controls = None
    expected_lat = expected_speed = None
    ticks: list[ManeuverTick] = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            kind = obj.get("type")
            if kind == "meta":
                meta = obj
            elif kind == "zone":
                zone_boundary = np.asarray(obj["boundary"], dtype=float)
            elif kind == "plan":
                plan_states = np.asarray(obj["states"], dtype=float)
                plan_controls = np.asarray(obj["controls"], dtype=float)
            elif kind == "expected":
                expected_lat = np.asarray(obj["lat"], dtype=float)
                expected_speed = np.asarray(obj["speed"], dtype=float)
            elif kind == "tick":
                e = obj["ego"]
                p = obj["preceding"]
                a = obj["adjacent"]
                c = obj["control"]
                ticks.append(ManeuverTick(
                    tick=obj["tick"], ego_s=e[0], ego_v=e[1], ego_l=e[2],
                    ego_phi=e[3], p_s=p[0], p_v=p[1], p_l=p[2],
                    a_s=a[0], a_v=a[1], a_l=a[2], operator=obj["operator"],
                    accel=c[0], steer=c[1],
                    extras=tuple(tuple(x) for x in obj.get("extras", []))))
    if meta is None or plan_states is None:
        raise ValidationError(f"malformed episode file: {path}")
    takeover = None
    if meta["takeover_tick"] is not None:
        i = int(meta["takeover_tick"])
        match = [tk for tk in ticks if tk.tick == i]
        l_at = match[0].ego_l if match else 0.0
        takeover = TakeoverEvent(tick=i, deviation=0.0, actual_l=l_at,
                                 expected_l=l_at)
    return EpisodeRecord(
        scenario_id=meta["scenario"], episode=meta["episode"],
        iteration=meta["iteration"], takeover=takeover,
        ratio=meta["ratio"], plan_time=0.0, learn_time=0.0,
        collision=meta["collision"], ticks=ticks, plan_states=plan_states,
        plan_controls=plan_controls, expected_lat=expected_lat,
        expected_speed=expected_speed, zone_boundary=zone_boundary,
        zone_cells=meta["zone_cells"],
        zone_cells_after=meta["zone_cells_after"],
        delta_w_norm=meta["delta_w_norm"], events=list(meta["events"]),
        maneuver_start_tick=meta["maneuver_start_tick"], K=meta["K"],
        dt=meta["dt"])
