"""Perceived-safe driving zone learned from labeled interaction samples.

A two-class Gaussian model with shared covariance scores relative-position
features; the zone is the connected region of grid cells classified safe,
its rim is an ordered polyline, and per-step lateral bounds are read off the
rim by nearest-longitudinal-neighbor projection.
"""
from __future__ import annotations

import csv
import json
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .config import RoadConfig, ZoneConfig
from .errors import InsufficientDataError, ValidationError
from .sim import BackgroundPrediction, VehicleState

log = logging.getLogger(__name__)

FEATURE_DIM = 6
SAMPLE_SOURCES = ("adas_accepted", "adas_rejected", "human")


def extract_features(ego_s, ego_l, p_s, p_l, a_s, a_l) -> np.ndarray:
    """Relative-position feature vector: neighbor minus ego, plus distances."""
    ds_p, dl_p = p_s - ego_s, p_l - ego_l
    ds_a, dl_a = a_s - ego_s, a_l - ego_l
    return np.array([ds_p, dl_p, np.hypot(ds_p, dl_p),
                     ds_a, dl_a, np.hypot(ds_a, dl_a)])


def features_batch(ego_s, ego_l, p_s, p_l, a_s, a_l) -> np.ndarray:
    """Vectorized extract_features; all args broadcastable arrays -> (N, 6)."""
    ds_p, dl_p = p_s - ego_s, p_l - ego_l
    ds_a, dl_a = a_s - ego_s, a_l - ego_l
    return np.stack([ds_p, dl_p, np.hypot(ds_p, dl_p),
                     ds_a, dl_a, np.hypot(ds_a, dl_a)], axis=-1)


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    y: int
    iteration: int
    source: str


class SampleStore:
    """Cumulative labeled samples with per-sample weights (recency scaling)."""

    def __init__(self):
        self._x: list[np.ndarray] = []
        self._y: list[int] = []
        self._iter: list[int] = []
        self._source: list[str] = []
        self._weight: list[float] = []

    def __len__(self):
        return len(self._y)

    def add(self, sample: LabeledSample, weight: float = 1.0) -> None:
        if sample.source not in SAMPLE_SOURCES:
            raise ValidationError(f"unknown sample source '{sample.source}'")
        if sample.x.shape != (FEATURE_DIM,):
            raise ValidationError(f"sample shape {sample.x.shape}, want ({FEATURE_DIM},)")
        self._x.append(np.asarray(sample.x, dtype=float))
        self._y.append(int(sample.y))
        self._iter.append(int(sample.iteration))
        self._source.append(sample.source)
        self._weight.append(float(weight))

    def extend(self, samples, weight: float = 1.0) -> None:
        for s in samples:
            self.add(s, weight)

    def arrays(self):
        X = np.array(self._x) if self._x else np.zeros((0, FEATURE_DIM))
        return X, np.array(self._y, dtype=int), np.array(self._weight)

    def scale_weights(self, factor: float) -> None:
        self._weight = [w * factor for w in self._weight]

    def rows(self):
        for i in range(len(self._y)):
            yield self._x[i], self._y[i], self._iter[i], self._source[i], self._weight[i]

    def merge(self, other: "SampleStore") -> None:
        """Absorb another store, keeping its per-sample weights."""
        self._x.extend(x.copy() for x in other._x)
        self._y.extend(other._y)
        self._iter.extend(other._iter)
        self._source.extend(other._source)
        self._weight.extend(other._weight)

    def copy(self) -> "SampleStore":
        out = SampleStore()
        out._x = [x.copy() for x in self._x]
        out._y = list(self._y)
        out._iter = list(self._iter)
        out._source = list(self._source)
        out._weight = list(self._weight)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([f"x{i}" for i in range(1, 7)] + ["y", "iteration", "source"])
            for x, y, it, src, _ in self.rows():
                w.writerow([repr(float(v)) for v in x] + [y, it, src])

    @classmethod
    def from_csv(cls, path) -> "SampleStore":
        out = cls()
        with open(path, newline="") as f:
            r = csv.reader(f)
            header = next(r)
            if header[:6] != [f"x{i}" for i in range(1, 7)]:
                raise ValidationError(f"bad sample csv header in {path}")
            for row in r:
                x = np.array([float(v) for v in row[:6]])
                out.add(LabeledSample(x=x, y=int(row[6]), iteration=int(row[7]),
                                      source=row[8]))
        return out


@dataclass
class GdaModel:
    """Two-class shared-covariance Gaussian classifier over the 6-dim features."""

    theta: float
    mu0: np.ndarray
    mu1: np.ndarray
    sigma: np.ndarray
    epsilon: float
    _chol: tuple = field(default=None, repr=False, compare=False)

    def _factor(self):
        if self._chol is None:
            self._chol = cho_factor(self.sigma, lower=True)
        return self._chol

    def log_margin(self, X: np.ndarray) -> np.ndarray:
        """log p(x,y=1) - log p(x,y=0); shared normalizer cancels. X: (N,6)."""
        X = np.atleast_2d(X)
        c = self._factor()
        d1 = X - self.mu1
        d0 = X - self.mu0
        q1 = np.einsum("ij,ij->i", d1, cho_solve(c, d1.T).T)
        q0 = np.einsum("ij,ij->i", d0, cho_solve(c, d0.T).T)
        return (np.log(self.theta) - 0.5 * q1) - (np.log1p(-self.theta) - 0.5 * q0)

    def classify(self, x: np.ndarray) -> int:
        """1 = safe, 0 = unsafe; ties resolve to unsafe."""
        return int(self.log_margin(x)[0] > 0.0)

    def classify_batch(self, X: np.ndarray) -> np.ndarray:
        return (self.log_margin(X) > 0.0).astype(int)

    def to_json(self) -> dict:
        return {"theta": self.theta, "mu0": list(self.mu0), "mu1": list(self.mu1),
                "sigma": [float(v) for v in self.sigma.reshape(-1)],
                "epsilon": self.epsilon}

    @classmethod
    def from_json(cls, d: dict) -> "GdaModel":
        return cls(theta=float(d["theta"]), mu0=np.array(d["mu0"]),
                   mu1=np.array(d["mu1"]),
                   sigma=np.array(d["sigma"]).reshape(FEATURE_DIM, FEATURE_DIM),
                   epsilon=float(d["epsilon"]))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, sort_keys=True)

    @classmethod
    def load(cls, path) -> "GdaModel":
        with open(path) as f:
            return cls.from_json(json.load(f))


def estimate_gda(X: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None,
                 cfg: ZoneConfig = ZoneConfig()) -> GdaModel:
    """Maximum-likelihood fit of the two-class shared-covariance Gaussian model.

    weights are per-sample multiplicities (recency scaling); the default pooled
    covariance is the within-class scatter over total weight plus a trace-scaled
    ridge. cfg.covariance = "paper-literal" selects the class-count weighted
    variant with the squared-count denominator.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or X.shape[1] != FEATURE_DIM or X.shape[0] != y.shape[0]:
        raise ValidationError(f"bad sample shapes {X.shape}, {y.shape}")
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    if len(y) < cfg.min_samples:
        raise InsufficientDataError(f"{len(y)} samples, need {cfg.min_samples}")
    n1 = float(w[y == 1].sum())
    n0 = float(w[y == 0].sum())
    if n1 <= 0.0 or n0 <= 0.0:
        raise InsufficientDataError("both classes must be present")
    n = n1 + n0
    theta = n1 / n
    mu1 = (w[:, None] * (y[:, None] * X)).sum(axis=0) / n1
    mu0 = (w[:, None] * ((1 - y)[:, None] * X)).sum(axis=0) / n0
    d1 = X - mu1
    d0 = X - mu0
    if cfg.covariance == "pooled":
        m1 = (y == 1)
        s = (d1[m1] * w[m1, None]).T @ d1[m1] + (d0[~m1] * w[~m1, None]).T @ d0[~m1]
        sigma = s / n
    else:
        s = n1 * (d1 * w[:, None]).T @ d1 + n0 * (d0 * w[:, None]).T @ d0
        sigma = s / n ** 2
    sigma = 0.5 * (sigma + sigma.T)
    eps = max(cfg.epsilon_scale * np.trace(sigma) / FEATURE_DIM, 1e-12)
    sigma = sigma + eps * np.eye(FEATURE_DIM)
    return GdaModel(theta=theta, mu0=mu0, mu1=mu1, sigma=sigma, epsilon=eps)


# clockwise 8-neighborhood: W NW N NE E SE S SW (axis 0 = longitudinal,
# axis 1 = lateral treated as "up")
_TRACE_DIRS = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


def _trace_rim(mask: np.ndarray) -> list[tuple[int, int]]:
    """Ordered rim cells of a 4-connected region (Moore-neighbor tracing).

    The walk from a (cell, backtrack) state is deterministic, so the closed rim
    is recovered exactly by cycle detection on that state.
    """
    cells = np.argwhere(mask)
    if len(cells) == 0:
        return []
    if len(cells) <= 2:
        return [tuple(map(int, c)) for c in cells]
    start = min((int(j), int(r)) for j, r in cells)

    def filled(c):
        j, r = c
        return 0 <= j < mask.shape[0] and 0 <= r < mask.shape[1] and mask[j, r]

    cur = start
    back = 0  # scan starts from the W neighbor, empty by minimality of start
    seen: dict[tuple, int] = {}
    trail: list[tuple[int, int]] = []
    for _ in range(8 * len(cells) + 16):
        state = (cur, back)
        if state in seen:
            return trail[seen[state]:]
        seen[state] = len(trail)
        trail.append(cur)
        hit = None
        for k in range(1, 9):
            d = (back + k) % 8
            cand = (cur[0] + _TRACE_DIRS[d][0], cur[1] + _TRACE_DIRS[d][1])
            if filled(cand):
                hit = (d, cand)
                break
        if hit is None:
            return [cur]
        d, nxt = hit
        last_empty = (cur[0] + _TRACE_DIRS[(d - 1) % 8][0],
                      cur[1] + _TRACE_DIRS[(d - 1) % 8][1])
        back = _TRACE_DIRS.index((last_empty[0] - nxt[0], last_empty[1] - nxt[1]))
        cur = nxt
    return trail


@dataclass
class DrivingZone:
    """Connected safe region: ordered rim polyline plus grid metadata."""

    boundary: np.ndarray          # (J, 2) columns (s, l), rim cell centers in order
    resolution: tuple[float, float]
    cell_count: int
    fallback: bool = False
    events: list = field(default_factory=list)
    _columns: np.ndarray | None = field(default=None, repr=False)  # (M, 3): s, l_lo, l_hi
    _bounds_cache: dict = field(default_factory=dict, repr=False)

    def columns(self) -> np.ndarray:
        """Per-longitudinal-column (s, l_lo, l_hi), from the grid or the rim."""
        if self._columns is not None:
            return self._columns
        ds = self.resolution[0]
        b = self.boundary
        order = np.argsort(b[:, 0], kind="stable")
        cols = []
        for s in np.unique(np.round(b[order, 0] / ds) * ds):
            sel = np.abs(b[:, 0] - s) < 0.5 * ds
            cols.append((s, b[sel, 1].min(), b[sel, 1].max()))
        self._columns = np.array(cols)
        return self._columns

    @classmethod
    def rectangle(cls, s_lo, s_hi, l_lo, l_hi, resolution, fallback=False,
                  events=None) -> "DrivingZone":
        """Rim polyline of an axis-aligned rectangle at grid resolution."""
        ds, dl = resolution
        ns = max(int(round((s_hi - s_lo) / ds)), 1)
        nl = max(int(round((l_hi - l_lo) / dl)), 1)
        ss = np.linspace(s_lo, s_hi, ns + 1)
        ls = np.linspace(l_lo, l_hi, nl + 1)
        pts = []
        pts += [(s, l_lo) for s in ss]                 # bottom, left to right
        pts += [(s_hi, l) for l in ls[1:]]             # right edge upward
        pts += [(s, l_hi) for s in ss[-2::-1]]         # top, right to left
        pts += [(s_lo, l) for l in ls[-2:0:-1]]        # left edge downward
        cols = np.array([(s, l_lo, l_hi) for s in ss])
        return cls(boundary=np.array(pts), resolution=resolution,
                   cell_count=ns * nl, fallback=fallback,
                   events=list(events or []), _columns=cols)


def full_zone(start: VehicleState, road: RoadConfig, K: int, dt: float,
              cfg: ZoneConfig, reason: str) -> DrivingZone:
    """Fallback: the whole kinematically reachable rectangle."""
    lat_lo = -0.5 * road.lane_width
    lat_hi = (road.lane_count - 0.5) * road.lane_width
    zone = DrivingZone.rectangle(start.s, start.s + start.v * K * dt,
                                 lat_lo, lat_hi, (cfg.grid_s, cfg.grid_l),
                                 fallback=True, events=[f"fallback:{reason}"])
    log.info("zone fallback to full feasible rectangle (%s)", reason)
    return zone


def extract_zone(model: GdaModel | None, start: VehicleState,
                 prediction: BackgroundPrediction, road: RoadConfig,
                 K: int, dt: float, cfg: ZoneConfig) -> DrivingZone:
    """Grid-scan the reachable window, classify each cell, keep the connected
    safe region around the ego, and trace its rim.

    Falls back to the full rectangle when no model is available, the safe set is
    empty, or the region degenerates below a traceable size.
    """
    if model is None:
        return full_zone(start, road, K, dt, cfg, "no-model")
    if start.v <= 0:
        raise ValidationError("zone extraction requires forward motion")
    ds, dl = cfg.grid_s, cfg.grid_l
    span = start.v * K * dt
    M = max(int(round(span / ds)), 1)
    lat_lo = -0.5 * road.lane_width
    lat_hi = (road.lane_count - 0.5) * road.lane_width
    R = max(int(round((lat_hi - lat_lo) / dl)), 1)
    s_centers = start.s + (np.arange(M) + 0.5) * ds
    l_centers = lat_lo + (np.arange(R) + 0.5) * dl
    steps = np.clip(np.round((s_centers - start.s) / (start.v * dt)).astype(int), 0, K)
    sp, lp = prediction.s_p[steps], prediction.l_p[steps]
    sa, la = prediction.s_a[steps], prediction.l_a[steps]
    S = np.repeat(s_centers, R)
    L = np.tile(l_centers, M)
    X = features_batch(S, L, np.repeat(sp, R), np.repeat(lp, R),
                       np.repeat(sa, R), np.repeat(la, R))
    mask = model.classify_batch(X).reshape(M, R).astype(bool)
    if not mask.any():
        return full_zone(start, road, K, dt, cfg, "empty-safe-set")

    j0 = int(np.clip((start.s - start.s) / ds, 0, M - 1))
    r0 = int(np.clip((start.l - lat_lo) / dl, 0, R - 1))
    events = []
    if not mask[j0, r0]:
        js, rs = np.nonzero(mask)
        d2 = ((js - j0) * ds) ** 2 + ((rs - r0) * dl) ** 2
        best = np.lexsort((rs, js, d2))[0]
        j0, r0 = int(js[best]), int(rs[best])
        events.append("ego-cell-unsafe")
        log.info("ego cell classified unsafe; starting from nearest safe region")

    comp = np.zeros_like(mask)
    queue = deque([(j0, r0)])
    comp[j0, r0] = True
    while queue:
        j, r = queue.popleft()
        for jj, rr in ((j - 1, r), (j + 1, r), (j, r - 1), (j, r + 1)):
            if 0 <= jj < M and 0 <= rr < R and mask[jj, rr] and not comp[jj, rr]:
                comp[jj, rr] = True
                queue.append((jj, rr))

    rim = _trace_rim(comp)
    if len(rim) < 3:
        return full_zone(start, road, K, dt, cfg, "degenerate-region")
    boundary = np.array([(s_centers[j], l_centers[r]) for j, r in rim])
    cols = []
    for j in range(M):
        rr = np.nonzero(comp[j])[0]
        if len(rr):
            cols.append((s_centers[j], l_centers[rr.min()], l_centers[rr.max()]))
    return DrivingZone(boundary=boundary, resolution=(ds, dl),
                       cell_count=int(comp.sum()), fallback=False,
                       events=events, _columns=np.array(cols))


def project_bounds(zone: DrivingZone, ref_s: np.ndarray, ref_l: np.ndarray,
                   road: RoadConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-step lateral bounds read off the rim along a reference trajectory.

    For each step the rim points strictly below / strictly above the reference
    lateral are partitioned; the nearest in longitudinal distance on each side
    supplies the bound. An empty side substitutes the road edge.
    Step 0 gets the road edges (the initial state is equality-pinned anyway).
    """
    key = (ref_s.tobytes(), ref_l.tobytes())
    if key in zone._bounds_cache:
        return zone._bounds_cache[key]
    K = len(ref_s) - 1
    lat_lo = -0.5 * road.lane_width
    lat_hi = (road.lane_count - 0.5) * road.lane_width
    b_s, b_l = zone.boundary[:, 0], zone.boundary[:, 1]
    l_min = np.full(K + 1, lat_lo)
    l_max = np.full(K + 1, lat_hi)
    edge_events = 0
    for i in range(1, K + 1):
        below = b_l < ref_l[i]
        above = b_l > ref_l[i]
        if below.any():
            l_min[i] = b_l[below][np.argmin(np.abs(b_s[below] - ref_s[i]))]
        else:
            edge_events += 1
        if above.any():
            l_max[i] = b_l[above][np.argmin(np.abs(b_s[above] - ref_s[i]))]
        else:
            edge_events += 1
        if l_min[i] >= l_max[i]:
            # reference outside the rim span; widen to the road edges
            l_min[i], l_max[i] = lat_lo, lat_hi
            edge_events += 1
    if edge_events:
        log.debug("project_bounds substituted road edges at %d steps", edge_events)
    zone._bounds_cache[key] = (l_min, l_max)
    return l_min, l_max


def label_lesson(ticks, plan_states: np.ndarray, prediction: BackgroundPrediction,
                 takeover_tick: int | None, iteration: int, mode: str = "lesson",
                 window_before: int = 10, window_after: int = 20) -> list[LabeledSample]:
    """Turn one maneuver into labeled samples.

    ticks: per-tick records of the executed maneuver, each with maneuver-relative
    index, ego position, actual neighbor positions, and the operator tag.
    plan_states: (K+1, 4) planned states (s, v, l, phi) aligned to maneuver ticks.
    In lesson mode the rejected plan continuation inside the window around the
    takeover is sampled against the planning-time prediction and labeled unsafe,
    while accepted and corrective executed states are safe. Literal mode labels
    purely by operator.
    """
    if mode not in ("lesson", "literal"):
        raise ValidationError(f"unknown labeling mode '{mode}'")
    samples: list[LabeledSample] = []

    def executed(t, y, source):
        x = extract_features(t.ego_s, t.ego_l, t.p_s, t.p_l, t.a_s, t.a_l)
        samples.append(LabeledSample(x=x, y=y, iteration=iteration, source=source))

    if takeover_tick is None:
        for t in ticks:
            executed(t, 1, "adas_accepted")
        return samples

    i_star = int(takeover_tick)
    if mode == "literal":
        for t in ticks:
            if t.tick < i_star:
                executed(t, 1, "adas_accepted")
            else:
                executed(t, 0, "human")
        return samples

    lo = max(0, i_star - window_before)
    hi = min(len(plan_states) - 1, i_star + window_after)
    for t in ticks:
        if t.operator == "adas" and t.tick < lo:
            executed(t, 1, "adas_accepted")
        elif t.operator == "human" and t.tick > i_star:
            executed(t, 1, "human")
    for i in range(lo, hi + 1):
        x = extract_features(plan_states[i, 0], plan_states[i, 2],
                             prediction.s_p[i], prediction.l_p[i],
                             prediction.s_a[i], prediction.l_a[i])
        samples.append(LabeledSample(x=x, y=0, iteration=iteration,
                                     source="adas_rejected"))
    return samples
