import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import raycast_oracle
from racer.errors import DegenerateScanError, OutsideTrackError, ParseError
from racer.sensing import (
    SensorConfig,
    _sensor_origin,
    downsample,
    fill_missing,
    format_observation,
    fov_slice,
    process_raw_scan,
    raycast_scan,
    read_raw_scans,
    write_raw_scans,
)
from racer.trackgen import Track, preset_track
from racer.vehicle import VehicleState

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="module")
def annulus():
    return preset_track("annulus")


def test_annulus_center_ray(annulus):
    # on the radius-4 centerline below the centre, looking radially outward
    cfg = SensorConfig(n_rays=171, mount_x=0.0)
    obs = raycast_scan(VehicleState(x=0.0, y=0.0, yaw=-math.pi / 2), annulus, (), cfg)
    assert obs[85] == pytest.approx(1.0, abs=1e-12)


def test_miss_gives_d_max():
    track = preset_track("straight")
    x, y, yaw = track.point_at(30.0)
    obs = raycast_scan(VehicleState(x=x, y=y, yaw=yaw), track, (), SensorConfig(n_rays=5, fov=1e-3, d_max=3.0))
    assert np.all(obs == 3.0)


def test_outside_track_raises(annulus):
    with pytest.raises(OutsideTrackError):
        raycast_scan(VehicleState(x=0.0, y=4.0), annulus)


def test_ray_ordering_right_to_left():
    # a wall only on the left side of a straight: high indices see it closer
    track = preset_track("straight")
    x, y, yaw = track.point_at(30.0)
    obs = raycast_scan(VehicleState(x=x, y=y + 0.5, yaw=yaw), track, (), SensorConfig(n_rays=3, fov=math.pi))
    assert obs[2] < obs[0]


def test_agent_footprint_blocks_rays(annulus):
    state = VehicleState(x=0.0, y=0.0, yaw=0.0)
    cfg = SensorConfig(n_rays=5, mount_x=0.0)
    box = np.array([[1.0, -0.2], [1.4, -0.2], [1.4, 0.2], [1.0, 0.2]])
    obs = raycast_scan(state, annulus, [box], cfg)
    assert obs[2] == pytest.approx(1.0, abs=1e-12)


def _mirror_track(track: Track) -> Track:
    flip = np.array([1.0, -1.0])
    return Track(track.name, track.width, (0, 0, 0), track.centerline * flip, track.right_boundary * flip,
                 track.left_boundary * flip)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 58.8), st.floats(-0.6, 0.6), st.floats(-0.8, 0.8))
def test_mirror_consistency(s, lateral, dyaw):
    track = preset_track("oval")
    x, y, yaw = track.point_at(s)
    x -= lateral * math.sin(yaw)
    y += lateral * math.cos(yaw)
    yaw += dyaw
    cfg = SensorConfig(mount_x=0.1)
    a = raycast_scan(VehicleState(x=x, y=y, yaw=yaw), track, (), cfg)
    b = raycast_scan(VehicleState(x=x, y=-y, yaw=-yaw), _mirror_track(track), (), cfg)
    assert np.max(np.abs(a - b[::-1])) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 25), st.floats(-0.7, 0.7), st.floats(-math.pi, math.pi), st.floats(0.2, 10.0))
def test_d_max_monotone(s, lateral, dyaw, d_small):
    track = preset_track("annulus")
    x, y, yaw = track.point_at(s)
    state = VehicleState(x=x - lateral * math.sin(yaw), y=y + lateral * math.cos(yaw), yaw=yaw + dyaw)
    big = raycast_scan(state, track, (), SensorConfig(d_max=10.0))
    small = raycast_scan(state, track, (), SensorConfig(d_max=d_small))
    assert np.all(small <= big)
    assert np.all((small > 0) & (small <= d_small))


def test_matches_brute_force_oracle():
    track = preset_track("ood2")
    rng = np.random.default_rng(7)
    cfg = SensorConfig()
    checked = 0
    while checked < 200:
        s = rng.uniform(0, track.length)
        x, y, yaw = track.point_at(s)
        off = rng.uniform(-0.9, 0.9)
        x, y = x - off * math.sin(yaw), y + off * math.cos(yaw)
        if not track.contains(x, y):
            continue
        yaw += rng.uniform(-math.pi, math.pi)
        obs = raycast_scan(VehicleState(x=x, y=y, yaw=yaw), track, (), cfg)
        ox, oy = _sensor_origin(x, y, yaw, cfg.mount_x, cfg.mount_y)
        ref = raycast_oracle(ox, oy, yaw, cfg.n_rays, cfg.fov, cfg.d_max, track.segments)
        assert np.max(np.abs(obs - ref)) <= 1e-6
        checked += 1


def test_sensor_config_validation():
    for bad in ({"n_rays": 1}, {"fov": 0.0}, {"fov": 2 * math.pi}, {"d_max": 0.0}):
        with pytest.raises(ValueError):
            SensorConfig(**bad)


# ---------------------------------------------------------------------------
# raw scan preprocessing


def test_interpolation_example():
    scan = fill_missing([2.0, 0.0, 4.0] + [1.0] * 9)
    assert scan[1] == 3.0


def test_interpolation_is_circular_and_sequential():
    # index 0 wraps to the tail; consecutive zeros use the freshly filled value
    scan = fill_missing([0.0, 2.0, 0.0, 0.0, 6.0, 8.0])
    assert scan.tolist() == [5.0, 2.0, 4.0, 5.0, 6.0, 8.0]


def test_missing_values_are_zeroed_then_filled():
    scan = fill_missing([None, "x", float("nan"), float("inf"), -1.0, 4.0])
    assert np.all(scan == 4.0)


def test_all_zero_scan():
    with pytest.raises(DegenerateScanError):
        process_raw_scan([0.0, None, float("nan")] * 4)


def test_short_slice():
    with pytest.raises(DegenerateScanError):
        process_raw_scan([1.0, 2.0, 3.0], SensorConfig(fov=math.radians(60)))


def test_fov_slice_ccw_from_right():
    scan = np.arange(1.0, 37.0)
    assert fov_slice(scan, math.radians(120)).tolist() == [31, 32, 33, 34, 35, 36, 1, 2, 3, 4, 5, 6]


def test_resample_identity():
    rng = np.random.default_rng(0)
    sl = rng.uniform(0.5, 9.0, size=170)
    assert np.array_equal(downsample(sl, 170), sl)


def test_1080_point_index_arithmetic():
    rng = np.random.default_rng(1)
    raw = rng.uniform(0.5, 9.0, size=1080)
    out = process_raw_scan(raw)
    sl = np.concatenate([raw[-180:], raw[:180]])
    expected = [sl[int(math.floor(i * 360 / 170 + 0.5)) - 1] for i in range(1, 171)]
    assert np.array_equal(out, expected)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.one_of(st.none(), st.floats(0, 20)), min_size=12, max_size=400), st.integers(2, 40))
def test_output_length_and_no_zeros(raw, n_rays):
    if not any(v for v in raw):
        return
    out = process_raw_scan(raw, SensorConfig(n_rays=n_rays))
    assert len(out) == n_rays
    assert np.all(out > 0)


@pytest.mark.parametrize(
    "raw_name, n_rays, golden",
    [
        ("alg1_small_raw.txt", 3, "alg1_small_n3.txt"),
        ("alg1_small_raw.txt", 6, "alg1_small_n6.txt"),
        ("alg1_ramp_raw.txt", 4, "alg1_ramp_n4.txt"),
        ("alg1_ramp_raw.txt", 5, "alg1_ramp_n5.txt"),
        ("alg1_ramp_raw.txt", 8, "alg1_ramp_n8.txt"),
    ],
)
def test_golden_files(raw_name, n_rays, golden):
    _, scans = read_raw_scans(GOLDEN / raw_name)
    cfg = SensorConfig(n_rays=n_rays, fov=math.radians(120))
    text = "".join(format_observation(process_raw_scan(s, cfg)) + "\n" for s in scans)
    assert text == (GOLDEN / golden).read_text()


def test_raw_scan_round_trip(tmp_path):
    scans = [[1.0, None, 2.5, 3.0], [0.5, 0.25, None, 4.0]]
    path = write_raw_scans(tmp_path / "raw.txt", scans, 90.0)
    res, back = read_raw_scans(path)
    assert res == 90.0
    assert [[None if v is None else float(v) for v in s] for s in back] == scans


def test_raw_scan_parse_errors(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("1.0,2.0\n")
    with pytest.raises(ParseError) as exc:
        read_raw_scans(p)
    assert exc.value.line == 1
    p.write_text("# zero=forward\n1.0\n")
    with pytest.raises(ParseError) as exc:
        read_raw_scans(p)
    assert exc.value.field == "resolution_deg"
    p.write_text("# resolution_deg=90 zero=forward direction=ccw\n1,2,3,4\n1,2,3\n")
    with pytest.raises(ParseError) as exc:
        read_raw_scans(p)
    assert exc.value.line == 3
