"""Reward correction from takeover lessons.

Each rejected plan is paired with a surrogate expert (re-planned with a
perceived-safe-zone midline preference); the per-step feature expectations of
the two are differenced, row-normalized, and folded into the planner weight
matrix by a clamped gradient step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .config import Config
from .errors import InfeasibleProblemError, StageError, ValidationError
from .planner import (N_FEATURES, PlanningProblem, Trajectory, WeightMatrix,
                      plan, plan_with_preference)
from .sim import BackgroundPrediction
from .zone import DrivingZone, GdaModel, SampleStore, estimate_gda, \
    extract_zone, project_bounds

log = logging.getLogger(__name__)


def feature_expectation(traj: Trajectory,
                        prediction: BackgroundPrediction) -> np.ndarray:
    """Per-step 10-feature matrix (10, K): columns evaluate
    [l^2, l, phi^2, phi, l*d, phi*d, s*d, d^2, dist_p^2, dist_a^2] at steps
    0..K-1, dist terms squared against the predicted neighbors."""
    K = traj.K
    if prediction.horizon < K:
        raise ValidationError("prediction shorter than trajectory")
    s = traj.states[:K, 0]
    l = traj.states[:K, 2]
    phi = traj.states[:K, 3]
    d = traj.controls[:, 1]
    Phi = np.stack([
        l * l, l, phi * phi, phi, l * d, phi * d, s * d, d * d,
        (s - prediction.s_p[:K]) ** 2 + (l - prediction.l_p[:K]) ** 2,
        (s - prediction.s_a[:K]) ** 2 + (l - prediction.l_a[:K]) ** 2,
    ])
    if not np.isfinite(Phi).all():
        raise ValidationError("non-finite feature expectation")
    return Phi


@dataclass
class Lesson:
    """One rejected-plan event: the executed plan, its problem, and the
    samples labeled from the takeover."""

    episode: int
    takeover_tick: int | None
    samples: SampleStore
    plan: Trajectory
    problem: PlanningProblem
    # (K+1, 2) executed (s, l): automated until the takeover, corrective after.
    # The zone is projected along this demonstrated path when present.
    executed: np.ndarray | None = None


@dataclass
class LearningState:
    """Single-owner state threaded through the episode loop."""

    w: WeightMatrix
    t: int = 0
    scales: np.ndarray = field(
        default_factory=lambda: np.full(N_FEATURES, 1e-6))
    eta: float = 0.5
    samples: SampleStore = field(default_factory=SampleStore)
    gda: GdaModel | None = None
    zone: DrivingZone | None = None
    prev_plan: Trajectory | None = None
    prev_problem: PlanningProblem | None = None
    next_plan: Trajectory | None = None
    next_problem: PlanningProblem | None = None
    last_events: list = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: Config) -> "LearningState":
        return cls(w=WeightMatrix.initial(cfg.planner),
                   eta=cfg.learning.eta,
                   scales=np.full(N_FEATURES, cfg.learning.scale_floor))


def correct_reward(ls: LearningState, Phi_prev: np.ndarray,
                   Phi_expert: np.ndarray, w_max: float = 1e3) -> WeightMatrix:
    """Clamped gradient step on the first K weight columns; the running
    per-row max-abs normalizers in ls are updated first."""
    Phi_prev = np.asarray(Phi_prev, dtype=float)
    Phi_expert = np.asarray(Phi_expert, dtype=float)
    if Phi_prev.shape != Phi_expert.shape or Phi_prev.shape[0] != N_FEATURES:
        raise ValidationError(f"feature expectation shapes disagree: "
                              f"{Phi_prev.shape} vs {Phi_expert.shape}")
    if not (np.isfinite(Phi_prev).all() and np.isfinite(Phi_expert).all()):
        raise ValidationError("non-finite feature expectations")
    K = Phi_prev.shape[1]
    seen = np.maximum(np.abs(Phi_prev).max(axis=1),
                      np.abs(Phi_expert).max(axis=1))
    ls.scales = np.maximum(ls.scales, seen)
    delta = ls.eta * (Phi_prev - Phi_expert) / ls.scales[:, None]
    w_new = ls.w.w.copy()
    w_new[:, :K] = np.clip(w_new[:, :K] + delta, -w_max, w_max)
    return WeightMatrix(w_new)


def generate_expert(problem: PlanningProblem, w: WeightMatrix | np.ndarray,
                    cfg: Config) -> Trajectory:
    """Surrogate demonstration: the same problem re-planned with a lateral
    preference toward the corridor midline."""
    midline = 0.5 * (problem.l_min + problem.l_max)
    return plan_with_preference(problem, w, midline,
                                cfg.learning.pref_weight, cfg.planner)


def _resolve_corridor(l_min, l_max, prob: PlanningProblem, cfg: Config):
    """Make the projected corridor plannable: admit the terminal target, then
    verify with a zero-weight probe solve, blending toward the road edges when
    the zone-derived corridor is too tight to reach the target lane."""
    road = prob.road
    lo_edge = -0.5 * road.lane_width
    hi_edge = (road.lane_count - 0.5) * road.lane_width
    margin = 0.2
    events = []
    for blend in (0.0, 0.5, 1.0):
        lmin_c = (1.0 - blend) * l_min + blend * lo_edge
        lmax_c = (1.0 - blend) * l_max + blend * hi_edge
        lmin_c[-1] = min(lmin_c[-1], prob.terminal_l - margin)
        lmax_c[-1] = max(lmax_c[-1], prob.terminal_l + margin)
        if not (lmin_c < lmax_c).all():
            continue
        cand = replace(prob, l_min=lmin_c, l_max=lmax_c)
        try:
            plan(cand, np.zeros((N_FEATURES, prob.K)))
        except InfeasibleProblemError:
            continue
        if blend > 0.0:
            events.append(f"corridor_relaxed:{blend}")
            log.info("zone corridor infeasible, relaxed toward road edges "
                     "(blend %.1f)", blend)
        return lmin_c, lmax_c, events
    raise InfeasibleProblemError("no plannable corridor, even at road edges")


def update_policy(ls: LearningState, lesson: Lesson,
                  cfg: Config) -> tuple[WeightMatrix, Trajectory]:
    """One full correction: fit the safety classifier on all samples, extract
    the zone, project bounds along the rejected plan, build the midline
    expert, step the weights, and re-plan for the next episode."""
    prob = lesson.problem
    K = prob.K
    events = []

    stage = "estimate_gda"
    try:
        ls.samples.merge(lesson.samples)
        X, y, wts = ls.samples.arrays()
        model = estimate_gda(X, y, wts, cfg.zone)
        ls.gda = model
    except Exception as e:
        raise StageError(stage, e) from e

    stage = "extract_zone"
    try:
        zone = extract_zone(model, prob.start, prob.prediction, prob.road,
                            K, prob.dt, cfg.zone)
        ls.zone = zone
        events.extend(zone.events)
    except Exception as e:
        raise StageError(stage, e) from e

    stage = "project_bounds"
    try:
        if lesson.executed is not None:
            ref_s = lesson.executed[:K + 1, 0]
            ref_l = lesson.executed[:K + 1, 1]
        else:
            ref_s = lesson.plan.states[:, 0]
            ref_l = lesson.plan.states[:, 2]
        l_min, l_max = project_bounds(zone, ref_s, ref_l, prob.road)
        l_min, l_max, ev = _resolve_corridor(l_min, l_max, prob, cfg)
        events.extend(ev)
        problem2 = replace(prob, l_min=l_min, l_max=l_max)
    except Exception as e:
        raise StageError(stage, e) from e

    stage = "generate_expert"
    try:
        expert = generate_expert(problem2, ls.w.for_horizon(K), cfg)
    except Exception as e:
        raise StageError(stage, e) from e

    stage = "correct_reward"
    try:
        Phi_prev = feature_expectation(lesson.plan, prob.prediction)
        Phi_expert = feature_expectation(expert, prob.prediction)
        w_new = correct_reward(ls, Phi_prev, Phi_expert,
                               w_max=cfg.planner.w_max)
    except Exception as e:
        raise StageError(stage, e) from e

    stage = "plan"
    try:
        next_plan = plan(problem2, w_new.for_horizon(K), cfg.planner)
    except Exception as e:
        raise StageError(stage, e) from e

    ls.w = w_new
    ls.t += 1
    ls.next_plan = next_plan
    ls.next_problem = problem2
    ls.last_events = events
    return w_new, next_plan
