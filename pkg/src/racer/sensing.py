"""Depth observations: simulated ray casting and preprocessing of raw 360-degree scans."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .errors import DegenerateScanError, OutsideTrackError, ParseError

# An observation is a float64 vector of n_rays depths in metres. Index 0 is the
# ray at relative angle -fov/2 (clockwise-most, the vehicle's right), index
# n_rays-1 the ray at +fov/2.
Observation = np.ndarray


@dataclass
class SensorConfig:
    n_rays: int = 170
    fov: float = 2 * math.pi / 3
    d_max: float = 10.0
    mount_x: float = 0.1
    mount_y: float = 0.0
    mount_z: float = 0.1

    def __post_init__(self):
        if self.n_rays < 2:
            raise ValueError("n_rays must be >= 2")
        if not 0 < self.fov < 2 * math.pi:
            raise ValueError("fov must lie in (0, 2*pi)")
        if not self.d_max > 0:
            raise ValueError("d_max must be positive")


@numba.njit(cache=True)
def _cast_rays(ox, oy, heading, n_rays, fov, d_max, segs, out):
    n_seg = segs.shape[0]
    for i in range(n_rays):
        ang = heading + fov * (i / (n_rays - 1) - 0.5)
        dx = math.cos(ang)
        dy = math.sin(ang)
        best = d_max
        for k in range(n_seg):
            x0 = segs[k, 0]
            y0 = segs[k, 1]
            ex = segs[k, 2] - x0
            ey = segs[k, 3] - y0
            denom = dx * ey - dy * ex
            if abs(denom) < 1e-15:
                continue
            wx = x0 - ox
            wy = y0 - oy
            t = (wx * ey - wy * ex) / denom
            if t <= 0.0 or t >= best:
                continue
            u = (wx * dy - wy * dx) / denom
            if u < 0.0 or u > 1.0:
                continue
            best = t
        if best < d_max:
            # Euclidean distance from the sensor origin to the hit point
            hx = ox + best * dx
            hy = oy + best * dy
            best = math.sqrt((hx - ox) ** 2 + (hy - oy) ** 2)
            if best > d_max:
                best = d_max
        out[i] = best


@numba.njit(cache=True)
def _sensor_origin(x, y, yaw, mount_x, mount_y):
    c = math.cos(yaw)
    s = math.sin(yaw)
    return x + mount_x * c - mount_y * s, y + mount_x * s + mount_y * c


def footprint_segments(footprints) -> np.ndarray:
    """Closed rectangles (each (4, 2) corners) -> wall segment rows."""
    rows = []
    for fp in footprints:
        fp = np.asarray(fp, dtype=float)
        rows.append(np.hstack([fp, np.roll(fp, -1, axis=0)]))
    if not rows:
        return np.empty((0, 4))
    return np.vstack(rows)


def raycast_scan(state, track, other_agent_footprints=(), config: SensorConfig | None = None) -> Observation:
    """Depths seen from ``state`` against the track walls and any agent footprints."""
    config = config or SensorConfig()
    if not track.contains(state.x, state.y):
        raise OutsideTrackError(f"pose ({state.x:.3f}, {state.y:.3f}) is outside the corridor of {track.name!r}")
    segs = track.segments
    if len(other_agent_footprints):
        segs = np.vstack([segs, footprint_segments(other_agent_footprints)])
    ox, oy = _sensor_origin(state.x, state.y, state.yaw, config.mount_x, config.mount_y)
    out = np.empty(config.n_rays)
    _cast_rays(ox, oy, state.yaw, config.n_rays, config.fov, config.d_max, np.ascontiguousarray(segs), out)
    return out


# ---------------------------------------------------------------------------
# raw scan preprocessing


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def fill_missing(raw) -> np.ndarray:
    """Outlier handling and interpolation of zero returns, in scan order.

    Missing, non-finite and negative ranges become 0. Each zero is then
    replaced, in place and in index order, by the mean of the nearest non-zero
    value before and after it, searching circularly around the scan.
    """
    scan = np.array([_as_range(v) for v in raw], dtype=float)
    if not np.any(scan != 0.0):
        raise DegenerateScanError("scan has no non-zero returns")
    n = len(scan)
    for i in range(n):
        if scan[i] != 0.0:
            continue
        j = (i - 1) % n
        while scan[j] == 0.0:
            j = (j - 1) % n
        prev = scan[j]
        j = (i + 1) % n
        while scan[j] == 0.0:
            j = (j + 1) % n
        scan[i] = (prev + scan[j]) / 2
    return scan


def _as_range(v) -> float:
    if v is None:
        return 0.0
    try:
        f = float(v)
    except (TypeError, ValueError):
        return 0.0
    if not math.isfinite(f) or f < 0.0:
        return 0.0
    return f


def fov_slice(scan: np.ndarray, fov: float) -> np.ndarray:
    """Symmetric slice [-fov/2, +fov/2) around index 0 (vehicle forward)."""
    n = len(scan)
    resolution = 2 * math.pi / n
    half = _round_half_up(fov / 2 / resolution)
    idx = np.arange(-half, half) % n
    return scan[idx]


def downsample(fov_scan: np.ndarray, n_rays: int) -> np.ndarray:
    """Index-rounded downsampling with 1-based indices, clamped to the slice."""
    length = len(fov_scan)
    step = length / n_rays
    out = np.empty(n_rays)
    for i in range(1, n_rays + 1):
        idx = min(max(_round_half_up(i * step), 1), length)
        out[i - 1] = fov_scan[idx - 1]
    return out


def process_raw_scan(raw, config: SensorConfig | None = None) -> Observation:
    """Turn a uniformly spaced 360-degree scan into an ``n_rays`` observation.

    ``raw[0]`` points straight ahead and angles grow counter-clockwise.
    """
    config = config or SensorConfig()
    scan = fill_missing(raw)
    sliced = fov_slice(scan, config.fov)
    if len(sliced) < 2:
        raise DegenerateScanError(f"field-of-view slice has {len(sliced)} samples; need at least 2")
    return downsample(sliced, config.n_rays)


def read_raw_scans(path) -> tuple[float, list[list]]:
    """Read a raw-scan file. Returns (angular resolution in degrees, scans)."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ParseError(f"{path}: first line must be a '#' header", line=1)
    header = {}
    for token in lines[0][1:].split():
        if "=" in token:
            key, value = token.split("=", 1)
            header[key.strip()] = value.strip()
    if "resolution_deg" not in header:
        raise ParseError(f"{path}: header lacks resolution_deg", line=1, field="resolution_deg")
    if header.get("zero", "forward") != "forward" or header.get("direction", "ccw") != "ccw":
        raise ParseError(f"{path}: only zero=forward direction=ccw scans are supported", line=1)
    try:
        resolution = float(header["resolution_deg"])
    except ValueError:
        raise ParseError(f"{path}: bad resolution_deg", line=1, field="resolution_deg") from None
    scans = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        values = [v.strip() for v in line.split(",")]
        expected = 360.0 / resolution
        if abs(len(values) - expected) > 1e-6:
            raise ParseError(f"{path}: scan has {len(values)} ranges, header implies {expected:g}", line=lineno)
        scans.append([None if v == "" else v for v in values])
    return resolution, scans


def write_raw_scans(path, scans, resolution_deg: float) -> Path:
    path = Path(path)
    out = [f"# resolution_deg={resolution_deg!r} zero=forward direction=ccw"]
    for scan in scans:
        out.append(",".join("" if v is None else repr(float(v)) for v in scan))
    path.write_text("\n".join(out) + "\n")
    return path


def format_observation(obs) -> str:
    return ",".join(repr(float(v)) for v in obs)


def write_observations(path, observations) -> Path:
    path = Path(path)
    path.write_text("".join(format_observation(o) + "\n" for o in observations))
    return path
