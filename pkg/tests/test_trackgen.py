import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from racer.errors import ClosureError, EmptyInputError, GeometryError, InfeasibleError, ParseError
from racer.sensing import SensorConfig, raycast_scan
from racer.trackgen import (
    PRESETS,
    RacingLine,
    discrete_curvature,
    curvature_jacobian,
    generate_track,
    lateral_deviation,
    load_track,
    min_curvature_raceline,
    preset_track,
    save_track,
    track_to_dict,
)
from racer.vehicle import VehicleState


@pytest.fixture(scope="module")
def oval():
    return preset_track("oval")


@pytest.fixture(scope="module")
def annulus():
    return preset_track("annulus")


def test_oval_length(oval):
    assert oval.length == pytest.approx(40 + 2 * math.pi * 3, abs=2e-3)


def test_annulus_radii(annulus):
    centre = np.array([0.0, 4.0])
    outer, inner = annulus.outer_inner
    r_out = np.hypot(*(outer - centre).T)
    r_in = np.hypot(*(inner - centre).T)
    assert np.allclose(r_out, 5.0, atol=1e-9)
    assert np.allclose(r_in, 3.0, atol=1e-9)


def test_closure_error():
    spec = PRESETS["oval"]["spec"][:-1] + [{"type": "arc", "radius": 3.0, "angle": 90, "direction": "left"}]
    spec = [dict(s) for s in spec]
    spec[0]["length"] = 11.0
    with pytest.raises(ClosureError):
        generate_track(spec, 2.0)


def test_self_intersecting_corridor():
    # width larger than twice the corner radius folds the inner wall
    with pytest.raises(GeometryError):
        generate_track(PRESETS["oval"]["spec"], 7.0)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_valid_and_deterministic(name):
    a = preset_track(name, seed=3)
    b = preset_track(name, seed=3)
    assert np.array_equal(a.centerline, b.centerline)
    assert np.all(a.contains(a.centerline[:, 0], a.centerline[:, 1]))
    assert np.array_equal(a.left_boundary[0], a.left_boundary[-1])


def test_jitter_seed_controls_geometry():
    spec = PRESETS["oval"]["spec"]
    a = generate_track(spec, 2.0, seed=1, jitter=0.3)
    b = generate_track(spec, 2.0, seed=1, jitter=0.3)
    c = generate_track(spec, 2.0, seed=2, jitter=0.3)
    assert np.array_equal(a.left_boundary, b.left_boundary)
    assert not np.allclose(a.left_boundary, c.left_boundary)


def test_round_trip(tmp_path, oval):
    path = save_track(oval, tmp_path / "oval.json")
    back = load_track(path)
    for f in ("centerline", "left_boundary", "right_boundary"):
        assert np.max(np.abs(getattr(back, f) - getattr(oval, f))) <= 1e-9
    assert back.start_pose == oval.start_pose and back.width == oval.width


def test_missing_width(tmp_path, oval):
    data = track_to_dict(oval)
    del data["width"]
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(data))
    with pytest.raises(ParseError) as exc:
        load_track(p)
    assert exc.value.field == "width"


def test_malformed_json_has_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n "name": "x",\n "width": ,\n}')
    with pytest.raises(ParseError) as exc:
        load_track(p)
    assert exc.value.line == 3


def test_self_intersecting_boundary_on_load(tmp_path, oval):
    data = track_to_dict(oval)
    data["left_boundary"] = [[0, 0], [1, 1], [1, 0], [0, 1], [0, 0]]
    p = tmp_path / "bow.json"
    p.write_text(json.dumps(data))
    with pytest.raises(GeometryError):
        load_track(p)


# ---------------------------------------------------------------------------
# racing line


def test_annulus_raceline_radius(annulus):
    line = min_curvature_raceline(annulus, margin=0.2)
    r = np.hypot(line.points[:, 0], line.points[:, 1] - 4.0)
    assert np.mean(r) == pytest.approx(4.8, rel=0.02)
    assert np.all(np.abs(r - 4.8) <= 0.02 * 4.8)


def test_objective_monotone(oval):
    line = min_curvature_raceline(oval, n_samples=120)
    h = np.array(line.objective_history)
    assert np.all(np.diff(h) <= 1e-12)
    assert h[-1] < h[0]


def test_raceline_inside_inflated_corridor(oval):
    line = min_curvature_raceline(oval)
    assert np.all(np.isfinite(line.curvature))
    assert np.all(np.abs(line.offsets) <= oval.width / 2 - 0.135 + 1e-6)


def test_curvature_jacobian_matches_finite_differences(oval):
    rng = np.random.default_rng(0)
    pts = oval.centerline[::8][:40] + rng.normal(scale=0.05, size=(40, 2))
    normals = rng.normal(size=(40, 2))
    normals /= np.hypot(*normals.T)[:, None]
    J = curvature_jacobian(pts, normals)
    eps = 1e-6
    num = np.empty_like(J)
    for j in range(40):
        d = np.zeros((40, 1))
        d[j] = eps
        num[:, j] = (discrete_curvature(pts + d * normals) - discrete_curvature(pts - d * normals)) / (2 * eps)
    assert np.max(np.abs(J - num)) <= 1e-5 * max(1.0, np.max(np.abs(num)))


def test_raceline_beats_coordinate_descent_grid(oval):
    """Coarse 32-sample instance against a brute-force offset-grid search."""
    n = 32
    line = min_curvature_raceline(oval, n_samples=n, iterations=200)
    from racer.trackgen import corridor_halfwidths, resample_closed

    center = resample_closed(oval.centerline, n)
    t = np.roll(center, -1, axis=0) - np.roll(center, 1, axis=0)
    t /= np.hypot(*t.T)[:, None]
    normal = np.column_stack([-t[:, 1], t[:, 0]])
    dl, dr = corridor_halfwidths(oval, center, normal)
    hi = dl - 0.185
    lo = -(dr - 0.185)
    grid = [np.linspace(lo[i], hi[i], 41) for i in range(n)]

    def obj(a):
        return float(np.sum(discrete_curvature(center + a[:, None] * normal) ** 2))

    a = np.zeros(n)
    best = obj(a)
    for _ in range(60):
        improved = False
        for i in range(n):
            for v in grid[i]:
                trial = a.copy()
                trial[i] = v
                val = obj(trial)
                if val < best - 1e-15:
                    best, a, improved = val, trial, True
        if not improved:
            break
    assert line.objective_history[-1] <= best * (1 + 1e-3)
    # the optimised line cuts the corners: lower peak curvature than the centerline
    assert np.max(np.abs(line.curvature)) < np.max(np.abs(discrete_curvature(center)))


def test_zero_lateral_freedom():
    margin = 0.2
    track = generate_track(PRESETS["oval"]["spec"], 2 * margin)
    line = min_curvature_raceline(track, margin=margin)
    assert np.max(np.abs(line.offsets)) <= 1e-9


def test_infeasible_margin(oval):
    with pytest.raises(InfeasibleError):
        min_curvature_raceline(oval, margin=1.2)


# ---------------------------------------------------------------------------
# deviation


def _circle_line(r, n=720):
    th = np.linspace(0, 2 * np.pi, n, endpoint=False)
    pts = np.column_stack([r * np.cos(th), r * np.sin(th)])
    return RacingLine(pts, np.full(n, 1 / r), np.zeros(n), 2.0), th


def test_deviation_identity():
    line, _ = _circle_line(4.8)
    stats = lateral_deviation(line.points, line)
    assert stats.d_max == pytest.approx(0.0, abs=1e-12)


def test_deviation_concentric():
    line, th = _circle_line(4.8)
    traj = np.column_stack([4.3 * np.cos(th), 4.3 * np.sin(th)])
    s = lateral_deviation(traj, line)
    # perpendicular from a point on a vertex ray to the adjacent chord
    exact = (4.8 - 4.3) * math.cos(math.pi / 720)
    for v in (s.d_min, s.d_mean, s.d_max):
        assert v == pytest.approx(exact, abs=1e-12)
        assert v == pytest.approx(0.5, abs=1e-5)
    assert s.pct_of_track_width == pytest.approx(25.0, abs=1e-3)


def test_deviation_empty():
    line, _ = _circle_line(4.8)
    with pytest.raises(EmptyInputError):
        lateral_deviation(np.zeros((1, 2)), line)


@settings(max_examples=25, deadline=None)
@given(st.floats(-np.pi, np.pi), st.floats(-50, 50), st.floats(-50, 50))
def test_deviation_rigid_invariance(theta, tx, ty):
    rng = np.random.default_rng(1)
    line, _ = _circle_line(4.8, 90)
    traj = rng.uniform(-6, 6, size=(50, 2))
    R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    moved = RacingLine(line.points @ R.T + (tx, ty), line.curvature, line.offsets, line.width)
    a = lateral_deviation(traj, line)
    b = lateral_deviation(traj @ R.T + (tx, ty), moved)
    for f in ("d_min", "d_max", "d_mean", "d_std"):
        assert getattr(a, f) == pytest.approx(getattr(b, f), abs=1e-9)
    assert 0 <= a.d_min <= a.d_mean <= a.d_max


def test_every_ray_hits_a_wall():
    track = preset_track("straight")
    rng = np.random.default_rng(0)
    cfg = SensorConfig(d_max=1e6)
    for _ in range(50):
        s = rng.uniform(0, track.length)
        x, y, yaw = track.point_at(s)
        obs = raycast_scan(VehicleState(x=x, y=y, yaw=yaw + rng.uniform(-np.pi, np.pi)), track, (), cfg)
        assert np.all(obs < 1e6)
