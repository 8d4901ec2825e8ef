"""Zone module: features, the Gaussian classifier, zone extraction, bounds,
lesson labeling. Estimation is checked against an independent density oracle."""
import math
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from lanelearn.config import RoadConfig, ZoneConfig
from lanelearn.errors import InsufficientDataError, ValidationError
from lanelearn.sim import BackgroundPrediction, VehicleState
from lanelearn.zone import (DrivingZone, GdaModel, LabeledSample, SampleStore,
                            estimate_gda, extract_features, extract_zone,
                            features_batch, full_zone, label_lesson,
                            project_bounds, _trace_rim)

ROAD = RoadConfig()
ZCFG = ZoneConfig()


def synthetic_model(seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(6, 6))
    sigma = a @ a.T / 6 + 0.5 * np.eye(6)
    mu1 = np.array([25.0, 0.5, 25.0, 10.0, 3.0, 11.0])
    mu0 = np.array([12.0, -0.5, 12.0, 3.0, 1.0, 4.0])
    return 0.6, mu0, mu1, sigma


def sample_from(theta, mu0, mu1, sigma, n, seed):
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < theta).astype(int)
    X = np.where(y[:, None] == 1,
                 rng.multivariate_normal(mu1, sigma, size=n),
                 rng.multivariate_normal(mu0, sigma, size=n))
    return X, y


def test_extract_features_example():
    x = extract_features(0.0, 0.0, 30.0, 0.0, 10.0, 3.5)
    assert np.allclose(x, [30.0, 0.0, 30.0, 10.0, 3.5, 10.594810050208546],
                       atol=1e-12)


def test_features_batch_matches_scalar():
    rng = np.random.default_rng(3)
    for _ in range(20):
        e_s, e_l, p_s, p_l, a_s, a_l = rng.uniform(-10, 40, 6)
        assert np.allclose(features_batch(e_s, e_l, p_s, p_l, a_s, a_l),
                           extract_features(e_s, e_l, p_s, p_l, a_s, a_l))


def test_estimate_recovers_synthetic_parameters():
    theta, mu0, mu1, sigma = synthetic_model()
    X, y = sample_from(theta, mu0, mu1, sigma, 10_000, seed=11)
    m = estimate_gda(X, y, cfg=ZCFG)
    assert abs(m.theta - theta) / theta < 0.05
    assert np.linalg.norm(m.mu1 - mu1) / np.linalg.norm(mu1) < 0.05
    assert np.linalg.norm(m.mu0 - mu0) / np.linalg.norm(mu0) < 0.05
    assert np.linalg.norm(m.sigma - sigma) / np.linalg.norm(sigma) < 0.05


def test_classify_matches_density_oracle():
    """Log-domain decisions equal direct density comparison on 1000 points."""
    theta, mu0, mu1, sigma = synthetic_model(seed=5)
    X, y = sample_from(theta, mu0, mu1, sigma, 4_000, seed=12)
    m = estimate_gda(X, y, cfg=ZCFG)
    pts = np.random.default_rng(13).uniform(-20, 40, size=(1000, 6))
    f1 = stats.multivariate_normal(mean=m.mu1, cov=m.sigma)
    f0 = stats.multivariate_normal(mean=m.mu0, cov=m.sigma)
    oracle = (np.log(m.theta) + f1.logpdf(pts)
              > np.log(1 - m.theta) + f0.logpdf(pts)).astype(int)
    assert (m.classify_batch(pts) == oracle).all()
    assert m.classify(m.mu1) == 1


def test_classify_tie_resolves_unsafe():
    m = GdaModel(theta=0.5, mu0=np.zeros(6), mu1=np.zeros(6),
                 sigma=np.eye(6), epsilon=0.0)
    assert m.classify(np.ones(6)) == 0


def test_estimate_requires_both_classes_and_enough_samples():
    X = np.random.default_rng(0).normal(size=(20, 6))
    with pytest.raises(InsufficientDataError):
        estimate_gda(X, np.ones(20, dtype=int), cfg=ZCFG)
    with pytest.raises(InsufficientDataError):
        estimate_gda(X[:4], np.array([0, 1, 0, 1]), cfg=ZCFG)


def test_estimate_duplication_invariance():
    theta, mu0, mu1, sigma = synthetic_model()
    X, y = sample_from(theta, mu0, mu1, sigma, 200, seed=2)
    a = estimate_gda(X, y, cfg=ZCFG)
    b = estimate_gda(np.vstack([X, X]), np.concatenate([y, y]), cfg=ZCFG)
    assert a.theta == pytest.approx(b.theta, abs=1e-12)
    assert np.allclose(a.mu0, b.mu0, atol=1e-10)
    assert np.allclose(a.mu1, b.mu1, atol=1e-10)
    assert np.allclose(a.sigma, b.sigma, atol=1e-10)


def test_estimate_weights_equal_replication():
    """Integer weights behave exactly like repeated rows."""
    theta, mu0, mu1, sigma = synthetic_model()
    X, y = sample_from(theta, mu0, mu1, sigma, 60, seed=9)
    w = np.ones(60)
    w[:10] = 3.0
    rep = np.vstack([X] + [X[:10]] * 2)
    yrep = np.concatenate([y] + [y[:10]] * 2)
    a = estimate_gda(X, y, weights=w, cfg=ZCFG)
    b = estimate_gda(rep, yrep, cfg=ZCFG)
    assert a.theta == pytest.approx(b.theta, abs=1e-12)
    assert np.allclose(a.sigma, b.sigma, atol=1e-10)


def test_estimate_covariance_regularization_floor():
    theta, mu0, mu1, sigma = synthetic_model()
    X, y = sample_from(theta, mu0, mu1, sigma, 500, seed=3)
    m = estimate_gda(X, y, cfg=ZCFG)
    assert np.linalg.eigvalsh(m.sigma).min() >= m.epsilon * (1 - 1e-9)


def test_paper_literal_covariance_differs_but_classifies():
    theta, mu0, mu1, sigma = synthetic_model()
    X, y = sample_from(theta, mu0, mu1, sigma, 800, seed=4)
    pooled = estimate_gda(X, y, cfg=ZCFG)
    lit = estimate_gda(X, y, cfg=ZoneConfig(covariance="paper-literal"))
    assert not np.allclose(pooled.sigma, lit.sigma)
    # class-count weighting shrinks the scale by roughly (n1^2+n0^2)/n^2, but
    # the induced decision boundary stays usable
    pts = np.vstack([mu1, mu0])
    assert lit.classify(pts[0]) == 1
    assert lit.classify(pts[1]) == 0


def test_trace_rim_rectangle():
    mask = np.zeros((8, 6), dtype=bool)
    mask[2:7, 1:5] = True
    rim = _trace_rim(mask)
    want = {(j, r) for j in range(2, 7) for r in range(1, 5)
            if j in (2, 6) or r in (1, 4)}
    assert set(rim) == want
    assert len(rim) == len(want)  # each rim cell visited once on a convex region
    # consecutive rim cells are 8-neighbors (ordered polyline)
    for a, b in zip(rim, rim[1:] + rim[:1]):
        assert max(abs(a[0] - b[0]), abs(a[1] - b[1])) == 1


def test_trace_rim_l_shape_is_closed_walk():
    mask = np.zeros((10, 10), dtype=bool)
    mask[1:8, 1:3] = True
    mask[5:8, 1:8] = True
    rim = _trace_rim(mask)
    assert len(rim) >= 3
    for a, b in zip(rim, rim[1:] + rim[:1]):
        assert max(abs(a[0] - b[0]), abs(a[1] - b[1])) == 1
    # every rim cell borders the outside in the 4-neighborhood sense
    for j, r in set(rim):
        neighbors = [(j - 1, r), (j + 1, r), (j, r - 1), (j, r + 1)]
        outside = any(not (0 <= jj < 10 and 0 <= rr < 10) or not mask[jj, rr]
                      for jj, rr in neighbors)
        assert outside


def _stripe_model():
    """Safe iff the lateral gap to the preceding lane center exceeds 1 m,
    i.e. cells with ego_l > l_p - 1 are unsafe."""
    mu1 = np.zeros(6)
    mu0 = np.zeros(6)
    mu1[1] = 2.0   # safe class: preceding is 2 m to the left of the ego
    mu0[1] = 0.0
    return GdaModel(theta=0.5, mu0=mu0, mu1=mu1, sigma=np.eye(6), epsilon=0.0)


def test_extract_zone_excludes_unsafe_stripe():
    m = _stripe_model()
    start = VehicleState(s=0.0, v=20.0, l=-1.6)
    K = 40
    pred = BackgroundPrediction(s_p=np.linspace(30, 70, K + 1),
                                l_p=np.zeros(K + 1),
                                s_a=np.linspace(15, 55, K + 1),
                                l_a=np.full(K + 1, 3.5))
    zone = extract_zone(m, start, pred, ROAD, K, 0.05, ZCFG)
    assert not zone.fallback
    # unsafe stripe: every cell with l > l_p - 1 = -1.0 must be excluded
    assert zone.boundary[:, 1].max() < -1.0 + ZCFG.grid_l
    # cross-check cell-by-cell: all cells the zone spans classify safe
    cols = zone.columns()
    for s, lo, hi in cols:
        for l in np.arange(lo, hi + 1e-9, ZCFG.grid_l):
            i = int(np.clip(round((s - start.s) / (start.v * 0.05)), 0, K))
            x = extract_features(s, l, pred.s_p[i], pred.l_p[i],
                                 pred.s_a[i], pred.l_a[i])
            assert m.classify(x) == 1


def test_extract_zone_consistency_with_classifier():
    """Cells inside the zone classify 1; 4-neighbors outside classify 0 or
    fall outside the scanned window."""
    theta, mu0, mu1, sigma = synthetic_model(seed=8)
    X, y = sample_from(theta, mu0, mu1, sigma, 2000, seed=21)
    m = estimate_gda(X, y, cfg=ZCFG)
    start = VehicleState(s=0.0, v=20.0, l=0.0)
    K = 40
    pred = BackgroundPrediction(s_p=30 + 18 * np.arange(K + 1) * 0.05,
                                l_p=np.zeros(K + 1),
                                s_a=10 + 18 * np.arange(K + 1) * 0.05,
                                l_a=np.full(K + 1, 3.5))
    zone = extract_zone(m, start, pred, ROAD, K, 0.05, ZCFG)
    if zone.fallback:
        pytest.skip("synthetic model produced no safe region for this window")
    ds, dl = zone.resolution
    lat_lo = -0.5 * ROAD.lane_width
    span = start.v * K * 0.05
    M = max(int(round(span / ds)), 1)

    def classify_cell(j, r):
        s = start.s + (j + 0.5) * ds
        l = lat_lo + (r + 0.5) * dl
        i = int(np.clip(round((s - start.s) / (start.v * 0.05)), 0, K))
        return m.classify(extract_features(s, l, pred.s_p[i], pred.l_p[i],
                                           pred.s_a[i], pred.l_a[i]))

    R = int(round((ROAD.lane_count - 0.5) * ROAD.lane_width * 2 / dl / 2))
    inside = set()
    for s, lo, hi in zone.columns():
        j = int(round((s - start.s) / ds - 0.5))
        for l in np.arange(lo, hi + 1e-9, dl):
            r = int(round((l - lat_lo) / dl - 0.5))
            inside.add((j, r))
    # rim cells belong to the region and must classify safe
    for srow in zone.boundary:
        j = int(round((srow[0] - start.s) / ds - 0.5))
        r = int(round((srow[1] - lat_lo) / dl - 0.5))
        assert classify_cell(j, r) == 1


def test_extract_zone_fallbacks():
    start = VehicleState(s=0.0, v=20.0, l=0.0)
    K = 30
    pred = BackgroundPrediction(s_p=np.full(K + 1, 40.0), l_p=np.zeros(K + 1),
                                s_a=np.full(K + 1, 20.0), l_a=np.full(K + 1, 3.5))
    z = extract_zone(None, start, pred, ROAD, K, 0.05, ZCFG)
    assert z.fallback and z.cell_count > 0
    # a model that rejects everything also falls back
    allbad = GdaModel(theta=0.01, mu0=np.zeros(6),
                      mu1=np.full(6, 1e6), sigma=np.eye(6), epsilon=0.0)
    z2 = extract_zone(allbad, start, pred, ROAD, K, 0.05, ZCFG)
    assert z2.fallback


def test_zone_boundary_polyline_size():
    start = VehicleState(s=0.0, v=20.0, l=0.0)
    z = full_zone(start, ROAD, 40, 0.05, ZCFG, reason="test")
    assert len(z.boundary) >= 3
    assert z.cell_count == int(round(start.v * 40 * 0.05 / 1.0)) * int(round(7.0 / 0.1))


def test_project_bounds_rectangle():
    zone = DrivingZone.rectangle(0.0, 100.0, -1.0, 4.0, (1.0, 0.1))
    K = 30
    ref_s = np.linspace(5, 95, K + 1)
    ref_l = np.linspace(0.2, 3.2, K + 1)
    l_min, l_max = project_bounds(zone, ref_s, ref_l, ROAD)
    assert np.allclose(l_min[1:], -1.0)
    assert np.allclose(l_max[1:], 4.0)
    assert (l_min < l_max).all()


def test_project_bounds_funnel_tracks_narrowing():
    """A linearly narrowing corridor is recovered within one grid cell."""
    ds, dl = 1.0, 0.1
    s_pts = np.arange(0.0, 101.0, ds)
    lo = -1.0 + 0.02 * s_pts          # rises from -1 to 1
    hi = 4.0 - 0.02 * s_pts           # falls from 4 to 2
    boundary = np.concatenate([np.stack([s_pts, lo], axis=1),
                               np.stack([s_pts[::-1], hi[::-1]], axis=1)])
    zone = DrivingZone(boundary=boundary, resolution=(ds, dl),
                       cell_count=1000)
    K = 50
    ref_s = np.linspace(0, 100, K + 1)
    ref_l = np.full(K + 1, 1.5)
    l_min, l_max = project_bounds(zone, ref_s, ref_l, ROAD)
    for i in range(1, K + 1):
        assert abs(l_min[i] - (-1.0 + 0.02 * ref_s[i])) <= 0.02 * ds + 1e-9
        assert abs(l_max[i] - (4.0 - 0.02 * ref_s[i])) <= 0.02 * ds + 1e-9


def test_project_bounds_empty_side_substitutes_road_edge():
    # all rim points above the reference: lower bound comes from the road edge
    boundary = np.stack([np.arange(0, 50.0), np.full(50, 3.0)], axis=1)
    zone = DrivingZone(boundary=boundary, resolution=(1.0, 0.1), cell_count=10)
    ref_s = np.linspace(0, 40, 21)
    ref_l = np.full(21, 1.0)
    l_min, l_max = project_bounds(zone, ref_s, ref_l, ROAD)
    assert np.allclose(l_min[1:], -0.5 * ROAD.lane_width)
    assert np.allclose(l_max[1:], 3.0)


@dataclass(frozen=True)
class Tick:
    tick: int
    ego_s: float
    ego_l: float
    p_s: float
    p_l: float
    a_s: float
    a_l: float
    operator: str


def _maneuver(n, takeover=None):
    ticks = []
    for t in range(n):
        op = "adas" if takeover is None or t <= takeover else "human"
        ticks.append(Tick(tick=t, ego_s=t * 1.0, ego_l=0.02 * t, p_s=30 + t,
                          p_l=0.0, a_s=10 + t, a_l=3.5, operator=op))
    return ticks


def _plan_states(K):
    out = np.zeros((K + 1, 4))
    out[:, 0] = np.arange(K + 1) * 1.0
    out[:, 1] = 20.0
    out[:, 2] = 0.02 * np.arange(K + 1)
    return out


def _pred(K):
    t = np.arange(K + 1)
    return BackgroundPrediction(s_p=30.0 + t, l_p=np.zeros(K + 1),
                                s_a=10.0 + t, l_a=np.full(K + 1, 3.5))


def test_label_lesson_no_takeover_all_safe():
    ticks = _maneuver(80)
    out = label_lesson(ticks, _plan_states(80), _pred(80), None, iteration=0)
    assert len(out) == 80
    assert all(s.y == 1 and s.source == "adas_accepted" for s in out)


def test_label_lesson_windows():
    K = 90
    ticks = _maneuver(K, takeover=40)
    out = label_lesson(ticks, _plan_states(K), _pred(K), 40, iteration=2,
                       mode="lesson", window_before=10, window_after=20)
    rejected = [s for s in out if s.source == "adas_rejected"]
    accepted = [s for s in out if s.source == "adas_accepted"]
    human = [s for s in out if s.source == "human"]
    assert len(rejected) == 31          # plan steps 30..60 inclusive
    assert all(s.y == 0 for s in rejected)
    assert len(accepted) == 30          # executed ticks 0..29
    assert all(s.y == 1 for s in accepted)
    assert len(human) == K - 41         # executed ticks 41..89
    assert all(s.y == 1 for s in human)
    assert all(s.iteration == 2 for s in out)


def test_label_lesson_literal_mode():
    K = 80
    ticks = _maneuver(K, takeover=40)
    out = label_lesson(ticks, _plan_states(K), _pred(K), 40, iteration=0,
                       mode="literal")
    assert len(out) == K
    before = [s for s in out if s.y == 1]
    after = [s for s in out if s.y == 0]
    assert len(before) == 40 and len(after) == K - 40
    assert all(s.source == "human" for s in after)


def test_label_lesson_early_takeover_clips_window():
    K = 60
    ticks = _maneuver(K, takeover=4)
    out = label_lesson(ticks, _plan_states(K), _pred(K), 4, iteration=0)
    rejected = [s for s in out if s.source == "adas_rejected"]
    assert len(rejected) == 25   # steps 0..24
    assert not [s for s in out if s.source == "adas_accepted"]


def test_sample_store_roundtrip(tmp_path):
    store = SampleStore()
    rng = np.random.default_rng(0)
    for i in range(25):
        store.add(LabeledSample(x=rng.normal(size=6), y=int(i % 2), iteration=i // 10,
                                source="human" if i % 2 else "adas_rejected"))
    p = tmp_path / "samples.csv"
    store.to_csv(p)
    back = SampleStore.from_csv(p)
    X0, y0, w0 = store.arrays()
    X1, y1, w1 = back.arrays()
    assert np.array_equal(X0, X1)
    assert np.array_equal(y0, y1)
    assert np.array_equal(w1, np.ones(25))


def test_gda_model_json_roundtrip(tmp_path):
    theta, mu0, mu1, sigma = synthetic_model()
    X, y = sample_from(theta, mu0, mu1, sigma, 300, seed=6)
    m = estimate_gda(X, y, cfg=ZCFG)
    p = tmp_path / "gda.json"
    m.save(p)
    back = GdaModel.load(p)
    assert back.theta == m.theta
    assert np.array_equal(back.sigma, m.sigma)
    pts = np.random.default_rng(1).normal(size=(50, 6)) * 10
    assert np.array_equal(back.classify_batch(pts), m.classify_batch(pts))


@settings(max_examples=30, deadline=None)
@given(shift=st.floats(-5, 5))
def test_classify_invariant_to_shared_shift(shift):
    """Adding the same offset to both means and the query preserves decisions."""
    theta, mu0, mu1, sigma = synthetic_model()
    m = GdaModel(theta=theta, mu0=mu0, mu1=mu1, sigma=sigma, epsilon=0.0)
    m2 = GdaModel(theta=theta, mu0=mu0 + shift, mu1=mu1 + shift, sigma=sigma,
                  epsilon=0.0)
    pts = np.random.default_rng(2).normal(size=(50, 6)) * 8
    assert np.array_equal(m.classify_batch(pts), m2.classify_batch(pts + shift))
