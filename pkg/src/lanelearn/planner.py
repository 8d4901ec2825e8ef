"""Lane-change trajectory planner.

Ten-feature quadratic cost {l^2, l, phi^2, phi, l*d, phi*d, s*d, d^2,
dist_p^2, dist_a^2} over a horizon K, minimized subject to the vehicle
recursion, terminal boundary conditions, a lateral corridor, and a steering
box.  The speed schedule is fixed ahead of the solve (ramp to the desired
terminal speed under the acceleration box), which makes the lateral recursion
exactly linear in steering; the problem condenses to a dense strictly convex
QP in the K steering inputs alone.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import PlannerConfig, RoadConfig
from .errors import InfeasibleProblemError, ValidationError
from .qp import solve_qp
from .sim import BackgroundPrediction, ControlInput, VehicleState, step_ego

log = logging.getLogger(__name__)

FEATURE_NAMES = ("l2", "l", "phi2", "phi", "l_delta", "phi_delta",
                 "s_delta", "delta2", "dist_p2", "dist_a2")
N_FEATURES = 10


@dataclass
class WeightMatrix:
    """Per-step cost weights, one row per feature, stored at the maximum
    horizon and sliced per problem."""

    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.w.ndim != 2 or self.w.shape[0] != N_FEATURES:
            raise ValidationError(f"weight matrix must be {N_FEATURES}xK, "
                                  f"got {self.w.shape}")
        if not np.isfinite(self.w).all():
            raise ValidationError("weight matrix has non-finite entries")

    @property
    def k_max(self) -> int:
        return self.w.shape[1]

    def for_horizon(self, K: int) -> np.ndarray:
        if K > self.k_max:
            raise ValidationError(f"horizon {K} exceeds stored {self.k_max}")
        return self.w[:, :K]

    def clamped(self, w_max: float) -> "WeightMatrix":
        return WeightMatrix(np.clip(self.w, -w_max, w_max))

    @classmethod
    def initial(cls, cfg: PlannerConfig) -> "WeightMatrix":
        w = np.zeros((N_FEATURES, cfg.k_max))
        w[0, :] = cfg.w0_lane_hold          # lane hold
        w[7, :] = cfg.w0_steer              # steering stiffness; the 1e-4 ridge
        # alone leaves the s*delta row's normalized update step larger than the
        # planner's restoring response and the iteration limit cycles
        return cls(w)

    def to_csv(self, path) -> None:
        np.savetxt(path, self.w, delimiter=",",
                   header=",".join(FEATURE_NAMES), comments="")

    @classmethod
    def from_csv(cls, path) -> "WeightMatrix":
        return cls(np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2))


@dataclass
class PlanningProblem:
    """One lane-change planning instance over a fixed horizon."""

    start: VehicleState
    terminal_v: float
    terminal_l: float
    K: int
    dt: float
    l_min: np.ndarray
    l_max: np.ndarray
    prediction: BackgroundPrediction
    road: RoadConfig
    steer_max: float = 0.35
    accel_max: float = 3.0
    l_fr: float = 2.8
    terminal_s: float | None = None

    def __post_init__(self):
        if self.K < 2:
            raise ValidationError(f"horizon must be >= 2, got {self.K}")
        self.l_min = np.asarray(self.l_min, dtype=float)
        self.l_max = np.asarray(self.l_max, dtype=float)
        if self.l_min.shape != (self.K + 1,) or self.l_max.shape != (self.K + 1,):
            raise ValidationError("lateral bounds must have K+1 entries")
        if not (self.l_min < self.l_max).all():
            i = int(np.argmax(self.l_min >= self.l_max))
            raise ValidationError(f"empty lateral corridor at step {i}")
        if self.steer_max <= 0 or self.accel_max <= 0:
            raise ValidationError("control limits must be positive")
        if self.prediction.horizon < self.K:
            raise ValidationError("background prediction shorter than horizon")
        if not np.isfinite([self.terminal_v, self.terminal_l]).all():
            raise ValidationError("terminal targets must be finite")


@dataclass
class ConvexityReport:
    """Eigenvalue diagnostics of the per-step (l, phi, delta) cost blocks."""

    step_min_eig: np.ndarray
    ridge: float

    @property
    def any_indefinite(self) -> bool:
        return bool((self.step_min_eig < 0).any())


@dataclass
class CostMatrices:
    """Per-step quadratic cost pieces over state (s, v, l, phi) and control
    (a, delta): J = sum_i x'Qx + D'x + x'Fu + u'Ru + const."""

    Q: np.ndarray
    D: np.ndarray
    F: np.ndarray
    R: np.ndarray
    const: np.ndarray
    report: ConvexityReport


@dataclass
class Trajectory:
    """Planned rollout with its solve diagnostics."""

    states: np.ndarray
    controls: np.ndarray
    cost: float
    kkt_residual: float
    dt: float
    convexity_shift: float = 0.0
    active_count: int = 0
    model_defect: float = 0.0

    @property
    def K(self) -> int:
        return len(self.controls)

    def state(self, i: int) -> VehicleState:
        s, v, l, phi = self.states[i]
        return VehicleState(s=s, v=v, l=l, phi=phi)

    @property
    def lateral(self) -> np.ndarray:
        return self.states[:, 2]

    def to_json(self) -> str:
        return json.dumps({
            "states": self.states.tolist(),
            "controls": self.controls.tolist(),
            "cost": self.cost,
            "kkt_residual": self.kkt_residual,
            "dt": self.dt,
            "convexity_shift": self.convexity_shift,
            "active_count": self.active_count,
            "model_defect": self.model_defect,
        })

    @classmethod
    def from_json(cls, text: str) -> "Trajectory":
        d = json.loads(text)
        return cls(states=np.array(d["states"]), controls=np.array(d["controls"]),
                   cost=d["cost"], kkt_residual=d["kkt_residual"], dt=d["dt"],
                   convexity_shift=d.get("convexity_shift", 0.0),
                   active_count=d.get("active_count", 0),
                   model_defect=d.get("model_defect", 0.0))


def longitudinal_profile(v0: float, v_target: float, K: int, dt: float,
                         accel_max: float, s0: float = 0.0,
                         terminal_s: float | None = None):
    """Speed schedule fixed ahead of the steering solve.

    Default: constant-acceleration ramp from v0 to v_target.  With terminal_s
    set, a quadratic-in-time speed profile meets both the terminal speed and
    the terminal longitudinal position.  Returns (v_bar, s_bar, a) with
    v_bar/s_bar of length K+1 and a of length K; a is recomputed from the
    realized v_bar so the rollout reproduces the schedule exactly.
    """
    T = K * dt
    t = np.arange(K + 1) * dt
    if terminal_s is None:
        a_need = (v_target - v0) / T
        if abs(a_need) > accel_max + 1e-9:
            raise InfeasibleProblemError(
                f"terminal speed {v_target:.2f} unreachable from {v0:.2f} "
                f"in {K} steps under |a| <= {accel_max}")
        v_bar = v0 + a_need * t
    else:
        # v(t) = v0 + alpha t + beta t^2 with v(T) = v_target and
        # integral = terminal_s - s0 (trapezoid sum matching the recursion)
        ds_need = terminal_s - s0
        # s_bar[K] = s0 + dt * sum_{i<K} v_bar_i
        ti = t[:K]
        rhs = np.array([v_target - v0,
                        ds_need - v0 * T])
        M = np.array([[T, T * T],
                      [dt * np.sum(ti), dt * np.sum(ti * ti)]])
        try:
            alpha, beta = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError:
            raise InfeasibleProblemError("degenerate longitudinal profile")
        v_bar = v0 + alpha * t + beta * t * t
    v_bar = np.maximum(v_bar, 0.0)          # matches the sim's speed floor
    a = np.diff(v_bar) / dt
    if np.abs(a).max() > accel_max + 1e-9:
        raise InfeasibleProblemError(
            f"longitudinal profile needs |a| = {np.abs(a).max():.3f} "
            f"> {accel_max}")
    s_bar = s0 + dt * np.concatenate([[0.0], np.cumsum(v_bar[:-1])])
    return v_bar, s_bar, a


def _lateral_maps(v_bar, K, dt, l_fr, curvature, l0, phi0):
    """Exact affine maps l = Ml d + ml, phi = Mp d + mp from the recursion
    under the fixed speed schedule."""
    Ml = np.zeros((K + 1, K))
    Mp = np.zeros((K + 1, K))
    ml = np.zeros(K + 1)
    mp = np.zeros(K + 1)
    ml[0], mp[0] = l0, phi0
    for i in range(K):
        Ml[i + 1] = Ml[i] + dt * v_bar[i] * Mp[i]
        ml[i + 1] = ml[i] + dt * v_bar[i] * mp[i]
        Mp[i + 1] = Mp[i]
        Mp[i + 1, i] += dt * v_bar[i] / l_fr
        mp[i + 1] = mp[i] - dt * v_bar[i] * curvature
    return Ml, ml, Mp, mp


def assemble_cost(w_cols: np.ndarray, p: PlanningProblem,
                  ridge: float = 1e-4) -> CostMatrices:
    """Expand the 10 weighted features into per-step (Q, D, F, R) over state
    (s, v, l, phi) and control (a, delta), dist terms squared against the
    predicted neighbors; the fixed control ridge sits outside the weights."""
    w_cols = np.asarray(w_cols, dtype=float)
    if w_cols.shape != (N_FEATURES, p.K):
        raise ValidationError(f"weights {w_cols.shape} do not match horizon "
                              f"{p.K}")
    if not np.isfinite(w_cols).all():
        raise ValidationError("non-finite weights")
    K = p.K
    (w1, w2, w3, w4, w5, w6, w7, w8, w9, w10) = w_cols
    sp = p.prediction.s_p[:K]
    lp = p.prediction.l_p[:K]
    sa = p.prediction.s_a[:K]
    la = p.prediction.l_a[:K]

    Q = np.zeros((K, 4, 4))
    Q[:, 0, 0] = w9 + w10
    Q[:, 2, 2] = w1 + w9 + w10
    Q[:, 3, 3] = w3
    D = np.zeros((K, 4))
    D[:, 0] = -2.0 * w9 * sp - 2.0 * w10 * sa
    D[:, 2] = w2 - 2.0 * w9 * lp - 2.0 * w10 * la
    D[:, 3] = w4
    F = np.zeros((K, 4, 2))
    F[:, 0, 1] = w7
    F[:, 2, 1] = w5
    F[:, 3, 1] = w6
    R = np.zeros((K, 2, 2))
    R[:, 0, 0] = ridge
    R[:, 1, 1] = w8 + ridge
    const = w9 * (sp * sp + lp * lp) + w10 * (sa * sa + la * la)

    # convexity of the decision-relevant (l, phi, delta) block per step
    blocks = np.zeros((K, 3, 3))
    blocks[:, 0, 0] = Q[:, 2, 2]
    blocks[:, 1, 1] = Q[:, 3, 3]
    blocks[:, 2, 2] = R[:, 1, 1]
    blocks[:, 0, 2] = blocks[:, 2, 0] = 0.5 * F[:, 2, 1]
    blocks[:, 1, 2] = blocks[:, 2, 1] = 0.5 * F[:, 3, 1]
    step_min_eig = np.linalg.eigvalsh(blocks)[:, 0]
    return CostMatrices(Q=Q, D=D, F=F, R=R, const=const,
                        report=ConvexityReport(step_min_eig=step_min_eig,
                                               ridge=ridge))


def _condense(cost: CostMatrices, Ml, ml, Mp, mp, v_bar, s_bar, a,
              p: PlanningProblem, pref_weight=None, pref_target=None):
    """Fold the per-step cost through the affine lateral maps into a dense
    quadratic in the steering vector: J = 1/2 d'Hd + g'd + c."""
    K = p.K
    q_l = cost.Q[:, 2, 2]
    q_phi = cost.Q[:, 3, 3]
    f_l = cost.F[:, 2, 1]
    f_phi = cost.F[:, 3, 1]
    f_s = cost.F[:, 0, 1]
    r_d = cost.R[:, 1, 1]
    Mlk, mlk = Ml[:K], ml[:K]
    Mpk, mpk = Mp[:K], mp[:K]

    A = (Mlk.T * q_l) @ Mlk + (Mpk.T * q_phi) @ Mpk + np.diag(r_d)
    B = Mlk.T * f_l + Mpk.T * f_phi          # column i couples delta_i
    A = A + 0.5 * (B + B.T)
    g = (2.0 * (Mlk.T * (q_l * mlk)) + Mlk.T * cost.D[:, 2]
         + 2.0 * (Mpk.T * (q_phi * mpk)) + Mpk.T * cost.D[:, 3]).sum(axis=1)
    g = g + f_l * mlk + f_phi * mpk + f_s * s_bar[:K]
    c = float(np.sum(cost.const)
              + np.sum(cost.Q[:, 0, 0] * s_bar[:K] ** 2)
              + np.sum(cost.D[:, 0] * s_bar[:K])
              + np.sum(q_l * mlk * mlk) + np.sum(cost.D[:, 2] * mlk)
              + np.sum(q_phi * mpk * mpk) + np.sum(cost.D[:, 3] * mpk)
              + np.sum(cost.R[:, 0, 0] * a * a))
    if pref_weight is not None:
        # lateral tracking preference sum_i q_i (l_i - target_i)^2, i = 1..K
        q = np.asarray(pref_weight, dtype=float)[1:]
        tgt = np.asarray(pref_target, dtype=float)[1:]
        Mlp, mlp = Ml[1:], ml[1:]
        A = A + (Mlp.T * q) @ Mlp
        g = g + 2.0 * ((Mlp.T * (q * (mlp - tgt))).sum(axis=1))
        c += float(np.sum(q * (mlp - tgt) ** 2))
    H = A + A.T                               # 1/2 d'Hd == d'Ad
    return H, g, c


def _feasibility_prepass(p: PlanningProblem, v_bar):
    """Interval propagation of (l, phi) boxes under the steering box: a
    superset of every bound-respecting trajectory, so an empty intersection
    proves infeasibility at that step."""
    l_lo = l_hi = p.start.l
    f_lo = f_hi = p.start.phi
    R = p.road.curvature
    for i in range(1, p.K + 1):
        v = v_bar[i - 1]
        l_lo, l_hi = l_lo + p.dt * v * f_lo, l_hi + p.dt * v * f_hi
        swing = p.dt * (v / p.l_fr) * p.steer_max
        drift = -p.dt * v * R
        f_lo, f_hi = f_lo - swing + drift, f_hi + swing + drift
        if l_hi < p.l_min[i] - 1e-12 or l_lo > p.l_max[i] + 1e-12:
            raise InfeasibleProblemError(
                f"lateral corridor unreachable at step {i}: "
                f"[{l_lo:.3f}, {l_hi:.3f}] vs "
                f"[{p.l_min[i]:.3f}, {p.l_max[i]:.3f}]", step=i)
        l_lo = max(l_lo, p.l_min[i])
        l_hi = min(l_hi, p.l_max[i])


def _solve(p: PlanningProblem, w_cols: np.ndarray, cfg: PlannerConfig,
           pref_weight=None, pref_target=None) -> Trajectory:
    K = p.K
    v_bar, s_bar, a = longitudinal_profile(
        p.start.v, p.terminal_v, K, p.dt, p.accel_max,
        s0=p.start.s, terminal_s=p.terminal_s)
    _feasibility_prepass(p, v_bar)
    Ml, ml, Mp, mp = _lateral_maps(v_bar, K, p.dt, p.l_fr,
                                   p.road.curvature, p.start.l, p.start.phi)
    cost = assemble_cost(w_cols, p, ridge=cfg.ridge)
    H, g, c = _condense(cost, Ml, ml, Mp, mp, v_bar, s_bar, a, p,
                        pref_weight=pref_weight, pref_target=pref_target)

    eigs = np.linalg.eigvalsh(0.5 * (H + H.T))
    shift = max(0.0, cfg.convexity_eps - float(eigs[0]))
    if shift > 0.0:
        H = H + shift * np.eye(K)
        log.debug("convexity shift %.3e applied (min eig %.3e)",
                  shift, eigs[0])

    A_eq = np.vstack([Ml[K], Mp[K]])
    b_eq = np.array([p.terminal_l - ml[K], -mp[K]])
    rows = Ml[1:]
    C = np.vstack([rows, -rows, np.eye(K), -np.eye(K)])
    d = np.concatenate([p.l_max[1:] - ml[1:], ml[1:] - p.l_min[1:],
                        np.full(K, p.steer_max), np.full(K, p.steer_max)])
    # normalize the objective so the argmin is unchanged but the solver and
    # its residual work at unit scale
    rho = max(1.0, float(np.abs(eigs).max()))
    res = solve_qp(H / rho, g / rho, A=A_eq, b=b_eq, C=C, d=d)

    delta = res.x
    states = np.zeros((K + 1, 4))
    controls = np.column_stack([a, delta])
    cur = p.start
    states[0] = cur.as_array()
    for i in range(K):
        cur = step_ego(cur, ControlInput(a=a[i], delta=delta[i]), p.dt,
                       l_fr=p.l_fr, curvature=p.road.curvature)
        states[i + 1] = cur.as_array()
    model_l = Ml @ delta + ml
    model_phi = Mp @ delta + mp
    defect = max(float(np.abs(states[:, 2] - model_l).max()),
                 float(np.abs(states[:, 3] - model_phi).max()),
                 float(np.abs(states[:, 1] - v_bar).max()),
                 float(np.abs(states[:, 0] - s_bar).max()))
    if defect > 1e-9:
        log.warning("QP model deviates from rollout by %.3e", defect)
    viol = max(float((p.l_min[1:] - states[1:, 2]).max()),
               float((states[1:, 2] - p.l_max[1:]).max()))
    if viol > 1e-6:
        log.warning("lateral bound violated by %.3e", viol)

    total = 0.5 * delta @ H @ delta + g @ delta + c
    return Trajectory(states=states, controls=controls, cost=float(total),
                      kkt_residual=res.kkt_residual, dt=p.dt,
                      convexity_shift=shift, active_count=len(res.active),
                      model_defect=defect)


def plan(p: PlanningProblem, w: WeightMatrix | np.ndarray,
         cfg: PlannerConfig | None = None) -> Trajectory:
    """Minimize the assembled cost inside the corridor; the returned
    trajectory replays exactly through the vehicle recursion."""
    cfg = cfg or PlannerConfig()
    w_cols = w.for_horizon(p.K) if isinstance(w, WeightMatrix) else w
    return _solve(p, w_cols, cfg)


def plan_with_preference(p: PlanningProblem, w: WeightMatrix | np.ndarray,
                         midline: np.ndarray, pref_weight: float,
                         cfg: PlannerConfig | None = None) -> Trajectory:
    """Same problem with an added lateral tracking term
    sum_{i=1..K} q (l_i - midline_i)^2 pulling toward the given trace."""
    cfg = cfg or PlannerConfig()
    w_cols = w.for_horizon(p.K) if isinstance(w, WeightMatrix) else w
    midline = np.asarray(midline, dtype=float)
    if midline.shape != (p.K + 1,):
        raise ValidationError("midline must have K+1 entries")
    q = np.full(p.K + 1, float(pref_weight))
    q[0] = 0.0
    return _solve(p, w_cols, cfg, pref_weight=q, pref_target=midline)


def choose_horizon(zone, target_l: float, v0: float, dt: float,
                   cfg: PlannerConfig | None = None) -> int:
    """Steps needed to close the lateral gap between the zone midline at its
    narrowest section and the target lane at a comfortable lateral rate."""
    cfg = cfg or PlannerConfig()
    cols = zone.columns()
    widths = cols[:, 2] - cols[:, 1]
    narrow = int(np.argmin(widths))
    l_mid = 0.5 * (cols[narrow, 1] + cols[narrow, 2])
    gap = abs(target_l - l_mid)
    K = int(np.ceil(gap / (cfg.lat_rate_max * dt)))
    return int(np.clip(K, cfg.k_min, cfg.k_max))
