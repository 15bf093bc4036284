"""Track geometry: generation from segment lists, JSON I/O, min-curvature racing line."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import lsq_linear
from shapely.geometry import LinearRing, Point, Polygon

from .errors import (
    ClosureError,
    EmptyInputError,
    GeometryError,
    InfeasibleError,
    ParseError,
)
from .vehicle import VEHICLE_WIDTH

CLOSURE_TOL = 1e-6
DEFAULT_MARGIN = 0.5 * VEHICLE_WIDTH + 0.05


@dataclass
class Track:
    name: str
    width: float
    start_pose: tuple
    centerline: np.ndarray  # (n, 2), open: last point != first
    left_boundary: np.ndarray  # (m, 2), closed
    right_boundary: np.ndarray  # (k, 2), closed

    def __post_init__(self):
        self.centerline = np.asarray(self.centerline, dtype=float)
        self.left_boundary = np.asarray(self.left_boundary, dtype=float)
        self.right_boundary = np.asarray(self.right_boundary, dtype=float)
        self.start_pose = tuple(float(v) for v in self.start_pose)
        self.width = float(self.width)

    @cached_property
    def segments(self) -> np.ndarray:
        """All boundary wall segments as rows (x0, y0, x1, y1)."""
        parts = []
        for b in (self.left_boundary, self.right_boundary):
            parts.append(np.hstack([b[:-1], b[1:]]))
        return np.ascontiguousarray(np.vstack(parts))

    @cached_property
    def outer_inner(self) -> tuple[np.ndarray, np.ndarray]:
        if abs(_shoelace(self.left_boundary)) >= abs(_shoelace(self.right_boundary)):
            return self.left_boundary, self.right_boundary
        return self.right_boundary, self.left_boundary

    @cached_property
    def length(self) -> float:
        closed = np.vstack([self.centerline, self.centerline[:1]])
        return float(np.sum(np.hypot(*np.diff(closed, axis=0).T)))

    @cached_property
    def arclength(self) -> np.ndarray:
        """Cumulative arc length at each centerline vertex (starts at 0)."""
        steps = np.hypot(*np.diff(self.centerline, axis=0).T)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def contains(self, x, y) -> np.ndarray | bool:
        outer, inner = self.outer_inner
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        inside = _point_in_polygon(x, y, outer) & ~_point_in_polygon(x, y, inner)
        return inside if inside.ndim else bool(inside)

    def point_at(self, s: float) -> tuple[float, float, float]:
        """Pose (x, y, heading) on the centerline at arc length ``s`` (wraps)."""
        closed = np.vstack([self.centerline, self.centerline[:1]])
        cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(closed, axis=0).T))])
        s = s % cum[-1]
        i = int(np.searchsorted(cum, s, side="right") - 1)
        i = min(i, len(closed) - 2)
        seg = closed[i + 1] - closed[i]
        seg_len = cum[i + 1] - cum[i]
        u = (s - cum[i]) / seg_len if seg_len > 0 else 0.0
        p = closed[i] + u * seg
        return float(p[0]), float(p[1]), math.atan2(seg[1], seg[0])


@dataclass
class RacingLine:
    points: np.ndarray
    curvature: np.ndarray
    offsets: np.ndarray
    width: float
    objective_history: list = field(default_factory=list)


@dataclass
class DeviationStats:
    d_min: float
    d_max: float
    d_mean: float
    d_std: float
    pct_of_track_width: float

    def as_dict(self) -> dict:
        return {
            "d_min": self.d_min,
            "d_max": self.d_max,
            "d_mean": self.d_mean,
            "d_std": self.d_std,
            "pct_of_track_width": self.pct_of_track_width,
        }


# ---------------------------------------------------------------------------
# generation


def _shoelace(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


def _point_in_polygon(x, y, poly):
    """Even-odd crossing test, vectorized over query points."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xs = x[..., None]
    ys = y[..., None]
    x0, y0 = poly[:-1, 0], poly[:-1, 1]
    x1, y1 = poly[1:, 0], poly[1:, 1]
    straddle = (y0 > ys) != (y1 > ys)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = x0 + (ys - y0) * (x1 - x0) / (y1 - y0)
    hits = straddle & (xs < x_cross)
    return (np.count_nonzero(hits, axis=-1) % 2) == 1


def _parse_segment(seg) -> tuple[str, float, float, float]:
    kind = seg.get("type")
    if kind == "straight":
        length = float(seg["length"])
        if length <= 0:
            raise GeometryError(f"straight length must be positive, got {length}")
        return "straight", length, 0.0, 0.0
    if kind == "arc":
        radius = float(seg["radius"])
        angle = math.radians(float(seg["angle"]))
        direction = seg.get("direction", "left")
        if direction not in ("left", "right"):
            raise GeometryError(f"arc direction must be left/right, got {direction!r}")
        if radius <= 0 or angle <= 0:
            raise GeometryError("arc radius and angle must be positive")
        sign = 1.0 if direction == "left" else -1.0
        return "arc", radius * angle, radius, sign * angle
    raise GeometryError(f"unknown segment type {kind!r}")


def trace_segments(spec, arc_step_deg: float = 5.0, ds: float | None = None):
    """Walk a segment list from the origin heading +x.

    Returns vertex positions, headings, and the end pose. ``ds`` forces a
    maximum spacing on straights and arcs; otherwise straights are a single
    piece and arcs are split every ``arc_step_deg``.
    """
    pts = [(0.0, 0.0)]
    heads = [0.0]
    x, y, th = 0.0, 0.0, 0.0
    max_dth = math.radians(arc_step_deg)
    for raw in spec:
        kind, length, radius, turn = _parse_segment(raw)
        if kind == "straight":
            n = 1 if ds is None else max(1, math.ceil(length / ds))
            for k in range(1, n + 1):
                u = length * k / n
                pts.append((x + u * math.cos(th), y + u * math.sin(th)))
                heads.append(th)
            x, y = pts[-1]
        else:
            n = max(1, math.ceil(abs(turn) / max_dth))
            if ds is not None:
                n = max(n, math.ceil(length / ds))
            sign = math.copysign(1.0, turn)
            cx = x - sign * radius * math.sin(th)
            cy = y + sign * radius * math.cos(th)
            for k in range(1, n + 1):
                phi = th + turn * k / n
                pts.append((cx + sign * radius * math.sin(phi), cy - sign * radius * math.cos(phi)))
                heads.append(phi)
            x, y = pts[-1]
            th = th + turn
    return np.array(pts), np.array(heads), (x, y, th)


def generate_track(
    spec,
    width: float,
    seed: int = 0,
    name: str = "track",
    jitter: float = 0.0,
    arc_step_deg: float = 5.0,
    ds: float = 0.25,
) -> Track:
    """Build a closed corridor of constant ``width`` around a segment path.

    ``jitter`` > 0 adds a smooth random lateral displacement (amplitude in m,
    drawn from ``seed``) to the whole corridor, for randomized test tracks.
    """
    if width <= 2 * (VEHICLE_WIDTH / 2):
        raise GeometryError(f"width {width} must exceed the vehicle width {VEHICLE_WIDTH}")
    pts, heads, (xe, ye, the) = trace_segments(spec, arc_step_deg=arc_step_deg)
    gap = math.hypot(xe, ye)
    heading_err = abs(math.remainder(the, 2 * math.pi))
    if gap > CLOSURE_TOL or heading_err > CLOSURE_TOL:
        raise ClosureError(
            f"segments do not close: end point {gap:.6g} m from start, heading error {heading_err:.3g} rad"
        )
    # walls use the coarse vertex set (fewer ray tests); the centerline is dense
    dense, dense_heads, _ = trace_segments(spec, arc_step_deg=1.0, ds=ds)
    rng = np.random.default_rng(seed)
    modes = [(rng.uniform(-1.0, 1.0) / k, rng.uniform(0, 2 * math.pi), k) for k in (2, 3, 4, 5)]

    def build(points, headings):
        points, headings = points[:-1].copy(), headings[:-1].copy()
        if the < 0:
            # clockwise loop: reverse into the canonical counter-clockwise order
            points = np.vstack([points[:1], points[:0:-1]])
            headings = np.concatenate([headings[:1], headings[:0:-1]]) + math.pi
        normals = np.column_stack([-np.sin(headings), np.cos(headings)])
        closed = np.vstack([points, points[:1]])
        s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(closed, axis=0).T))])
        offset = np.zeros(len(points))
        for amp, phase, k in modes:
            offset += amp * np.sin(2 * math.pi * k * s[:-1] / s[-1] + phase)
        return points, headings, normals, offset

    pts, heads, normals, offset = build(pts, heads)
    dense, dense_heads, dense_normals, dense_offset = build(dense, dense_heads)
    if jitter > 0:
        scale = jitter / max(np.max(np.abs(dense_offset)), 1e-12)
        offset *= scale
        dense_offset *= scale
    else:
        offset[:] = 0.0
        dense_offset[:] = 0.0

    center = dense + dense_offset[:, None] * dense_normals
    left = pts + (offset + width / 2)[:, None] * normals
    right = pts + (offset - width / 2)[:, None] * normals
    left = np.vstack([left, left[:1]])
    right = np.vstack([right, right[:1]])
    nxt = center[1] - center[0]
    yaw0 = heads[0] if jitter == 0 else math.atan2(nxt[1], nxt[0])
    track = Track(
        name=name,
        width=width,
        start_pose=(center[0, 0], center[0, 1], _wrap(yaw0)),
        centerline=center,
        left_boundary=left,
        right_boundary=right,
    )
    validate_track(track)
    return track


def _wrap(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    w = math.remainder(a, 2 * math.pi)
    return math.pi if w == -math.pi else w


def validate_track(track: Track) -> None:
    for label, b in (("left_boundary", track.left_boundary), ("right_boundary", track.right_boundary)):
        if len(b) < 4:
            raise GeometryError(f"{label} needs at least 3 distinct points")
        if not np.allclose(b[0], b[-1], atol=1e-12, rtol=0):
            raise GeometryError(f"{label} is not closed (first point != last point)")
        if not np.all(np.isfinite(b)):
            raise GeometryError(f"{label} has non-finite coordinates")
        if not LinearRing(b).is_simple:
            raise GeometryError(f"{label} is self-intersecting")
    if LinearRing(track.left_boundary).intersects(LinearRing(track.right_boundary)):
        raise GeometryError("left and right boundaries intersect")
    if track.width <= VEHICLE_WIDTH:
        raise GeometryError("track width must exceed the vehicle width")
    outer, inner = track.outer_inner
    corridor = Polygon(outer, holes=[inner])
    for i, p in enumerate(track.centerline):
        if not corridor.contains(Point(p)):
            raise GeometryError(f"centerline point {i} lies outside the corridor")
    closed = np.vstack([track.centerline, track.centerline[:1]])
    if _shoelace(closed) <= 0:
        raise GeometryError("centerline must wind counter-clockwise")


# ---------------------------------------------------------------------------
# file I/O

_FIELDS = ("name", "width", "start_pose", "centerline", "left_boundary", "right_boundary")


def track_to_dict(track: Track) -> dict:
    return {
        "name": track.name,
        "width": track.width,
        "start_pose": list(track.start_pose),
        "centerline": track.centerline.tolist(),
        "left_boundary": track.left_boundary.tolist(),
        "right_boundary": track.right_boundary.tolist(),
    }


def save_track(track: Track, path) -> Path:
    path = Path(path)
    # repr-based float output is the shortest exact round-trip form
    path.write_text(json.dumps(track_to_dict(track), indent=1) + "\n")
    return path


def track_from_dict(data: dict, source: str = "<dict>") -> Track:
    if not isinstance(data, dict):
        raise ParseError(f"{source}: top level must be an object")
    for f in _FIELDS:
        if f not in data:
            raise ParseError(f"{source}: missing required field", field=f)
    try:
        width = float(data["width"])
    except (TypeError, ValueError):
        raise ParseError(f"{source}: width must be a number", field="width") from None
    arrays = {}
    for f in ("centerline", "left_boundary", "right_boundary"):
        try:
            arr = np.asarray(data[f], dtype=float)
        except (TypeError, ValueError):
            raise ParseError(f"{source}: coordinates must be numbers", field=f) from None
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ParseError(f"{source}: expected a list of [x, y] pairs", field=f)
        arrays[f] = arr
    pose = data["start_pose"]
    if not isinstance(pose, list) or len(pose) != 3:
        raise ParseError(f"{source}: start_pose must be [x, y, yaw]", field="start_pose")
    track = Track(name=str(data["name"]), width=width, start_pose=tuple(pose), **arrays)
    validate_track(track)
    return track


def load_track(path) -> Track:
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc.msg}", line=exc.lineno) from None
    return track_from_dict(data, source=str(path))


# ---------------------------------------------------------------------------
# racing line


def resample_closed(points: np.ndarray, n: int) -> np.ndarray:
    """Resample a closed polyline (open storage) at ``n`` equal steps of a periodic spline."""
    closed = np.vstack([points, points[:1]])
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(closed, axis=0).T))])
    spline = CubicSpline(cum, closed, bc_type="periodic")
    return spline(np.linspace(0.0, cum[-1], n, endpoint=False))


def discrete_curvature(points: np.ndarray) -> np.ndarray:
    """Three-point finite-difference curvature of a closed polyline."""
    prev = np.roll(points, 1, axis=0)
    nxt = np.roll(points, -1, axis=0)
    d1 = 0.5 * (nxt - prev)
    d2 = nxt - 2 * points + prev
    speed = np.hypot(d1[:, 0], d1[:, 1])
    return (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) / speed**3


def curvature_jacobian(points: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """d(kappa_i)/d(alpha_j) for points p_j = c_j + alpha_j * n_j (tridiagonal, periodic)."""
    n = len(points)
    prev = np.roll(points, 1, axis=0)
    nxt = np.roll(points, -1, axis=0)
    d1 = 0.5 * (nxt - prev)
    d2 = nxt - 2 * points + prev
    S = np.hypot(d1[:, 0], d1[:, 1])
    cross = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    g1 = np.column_stack([d2[:, 1], -d2[:, 0]]) / S[:, None] ** 3 - 3 * cross[:, None] * d1 / S[:, None] ** 5
    g2 = np.column_stack([-d1[:, 1], d1[:, 0]]) / S[:, None] ** 3
    idx = np.arange(n)
    J = np.zeros((n, n))
    np.add.at(J, (idx, (idx + 1) % n), np.einsum("ij,ij->i", 0.5 * g1 + g2, np.roll(normals, -1, axis=0)))
    np.add.at(J, (idx, (idx - 1) % n), np.einsum("ij,ij->i", -0.5 * g1 + g2, np.roll(normals, 1, axis=0)))
    np.add.at(J, (idx, idx), np.einsum("ij,ij->i", -2 * g2, normals))
    return J


def _ray_segment_distance(origins, dirs, segs):
    """Smallest positive ray parameter hitting any segment (inf on a miss)."""
    p = segs[None, :, :2]
    e = segs[None, :, 2:] - p
    o = origins[:, None, :]
    d = dirs[:, None, :]
    denom = d[..., 0] * e[..., 1] - d[..., 1] * e[..., 0]
    w = p - o
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[..., 0] * e[..., 1] - w[..., 1] * e[..., 0]) / denom
        u = (w[..., 0] * d[..., 1] - w[..., 1] * d[..., 0]) / denom
    ok = (np.abs(denom) > 1e-15) & (t > 0) & (u >= -1e-12) & (u <= 1 + 1e-12)
    return np.where(ok, t, np.inf).min(axis=1)


def corridor_halfwidths(track: Track, centers: np.ndarray, normals: np.ndarray):
    """Distance along +normal to the left wall and along -normal to the right wall."""
    left_segs = np.hstack([track.left_boundary[:-1], track.left_boundary[1:]])
    right_segs = np.hstack([track.right_boundary[:-1], track.right_boundary[1:]])
    return (
        _ray_segment_distance(centers, normals, left_segs),
        _ray_segment_distance(centers, -normals, right_segs),
    )


def min_curvature_raceline(
    track: Track,
    n_samples: int = 200,
    margin: float = DEFAULT_MARGIN,
    iterations: int = 50,
    half_width: float = VEHICLE_WIDTH / 2,
    tol: float = 1e-4,
    wall_tol: float = 5e-3,
) -> RacingLine:
    """Racing line minimizing summed squared curvature inside the corridor.

    Each iteration linearizes the three-point curvature in the lateral offsets
    (Gauss-Newton), solves the box-constrained least-squares subproblem, and
    backtracks along the step so the true objective never increases.
    Samples whose free width is within ``wall_tol`` of zero (polygonal walls
    shave a little off arcs) are pinned to the centerline.
    """
    if n_samples < 32:
        raise ValueError("n_samples must be >= 32")
    if margin < half_width:
        raise ValueError(f"margin {margin} is below the vehicle half-width {half_width}")
    center = resample_closed(track.centerline, n_samples)
    tangent = np.roll(center, -1, axis=0) - np.roll(center, 1, axis=0)
    tangent /= np.hypot(tangent[:, 0], tangent[:, 1])[:, None]
    normal = np.column_stack([-tangent[:, 1], tangent[:, 0]])
    d_left, d_right = corridor_halfwidths(track, center, normal)
    if not (np.all(np.isfinite(d_left)) and np.all(np.isfinite(d_right))):
        raise InfeasibleError("could not measure the corridor width at every sample")
    upper = d_left - margin
    lower = -(d_right - margin)
    slack = upper - lower
    if np.any(slack < -wall_tol):
        i = int(np.argmin(slack))
        raise InfeasibleError(
            f"corridor narrower than 2*margin at sample {i}: {d_left[i] + d_right[i]:.4f} m < {2 * margin:.4f} m"
        )
    pinned = slack <= wall_tol
    upper = np.where(pinned, 0.0, upper)
    lower = np.where(pinned, 0.0, lower)

    def line(a):
        return center + a[:, None] * normal

    def objective(a):
        return float(np.sum(discrete_curvature(line(a)) ** 2))

    alpha = np.zeros(n_samples)
    history = [objective(alpha)]
    free = ~pinned
    for _ in range(iterations):
        if not np.any(free):
            break
        p = line(alpha)
        kappa = discrete_curvature(p)
        J = curvature_jacobian(p, normal)[:, free]
        # Gauss-Newton subproblem on the step, box-bounded so alpha stays feasible
        sol = lsq_linear(J, -kappa, bounds=(lower[free] - alpha[free], upper[free] - alpha[free]))
        target = alpha.copy()
        target[free] = np.clip(alpha[free] + sol.x, lower[free], upper[free])
        step = target - alpha
        current = history[-1]
        scale = 1.0
        accepted = False
        while scale > 1e-6:
            trial = alpha + scale * step
            val = objective(trial)
            if val <= current:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
        change = float(np.max(np.abs(trial - alpha)))
        alpha = trial
        history.append(val)
        if change < tol:
            break
    pts = line(alpha)
    return RacingLine(
        points=pts,
        curvature=discrete_curvature(pts),
        offsets=alpha,
        width=track.width,
        objective_history=history,
    )


# ---------------------------------------------------------------------------
# deviation


def point_segment_distances(points: np.ndarray, polyline_closed: np.ndarray, chunk: int = 2048):
    """Distance from each point to the nearest segment of a closed polyline."""
    a = polyline_closed[:-1]
    e = polyline_closed[1:] - a
    ee = np.einsum("ij,ij->i", e, e)
    ee = np.where(ee > 0, ee, 1.0)
    out = np.empty(len(points))
    for start in range(0, len(points), chunk):
        q = points[start : start + chunk, None, :]
        w = q - a[None]
        u = np.clip(np.einsum("kij,ij->ki", w, e) / ee, 0.0, 1.0)
        diff = w - u[..., None] * e[None]
        out[start : start + chunk] = np.sqrt(np.min(np.einsum("kij,kij->ki", diff, diff), axis=1))
    return out


def lateral_deviation(trajectory, raceline: RacingLine) -> DeviationStats:
    traj = np.asarray(trajectory, dtype=float).reshape(-1, 2)
    if len(traj) < 2:
        raise EmptyInputError("trajectory needs at least 2 points")
    closed = np.vstack([raceline.points, raceline.points[:1]])
    d = point_segment_distances(traj, closed)
    mean = float(np.mean(d))
    return DeviationStats(
        d_min=float(np.min(d)),
        d_max=float(np.max(d)),
        d_mean=mean,
        d_std=float(np.std(d)),
        pct_of_track_width=mean / raceline.width * 100.0,
    )


# ---------------------------------------------------------------------------
# presets

def _rounded_rectangle(straight: float, radius: float) -> list:
    return [{"type": "straight", "length": straight}, {"type": "arc", "radius": radius, "angle": 90, "direction": "left"}] * 4


def close_loop(spec) -> list:
    """Adjust straight lengths and arc radii minimally so the loop closes.

    With all turn angles fixed, the end point is linear in the lengths and
    radii, so closure is a minimum-norm correction of the nominal values.
    """
    cols = []
    nominal = []
    th = 0.0
    for raw in spec:
        kind, length, radius, turn = _parse_segment(raw)
        if kind == "straight":
            cols.append((math.cos(th), math.sin(th)))
            nominal.append(length)
        else:
            sign = math.copysign(1.0, turn)
            phi = th + turn
            cols.append((sign * (math.sin(phi) - math.sin(th)), sign * (math.cos(th) - math.cos(phi))))
            nominal.append(radius)
            th = phi
    A = np.array(cols).T
    r0 = np.array(nominal)
    vals = r0 - A.T @ np.linalg.solve(A @ A.T, A @ r0)
    out = []
    for raw, v in zip(spec, vals):
        seg = dict(raw)
        seg["length" if seg["type"] == "straight" else "radius"] = float(v)
        out.append(seg)
    return out


def _arcs(*angles, radius=3.0):
    return [
        {"type": "arc", "radius": radius, "angle": abs(a), "direction": "left" if a > 0 else "right"}
        for a in angles
    ]


PRESETS = {
    # rounded rectangle: 4 straights, 4 left corners
    "oval": dict(spec=_rounded_rectangle(10.0, 3.0), width=2.0),
    "annulus": dict(spec=[{"type": "arc", "radius": 4.0, "angle": 360, "direction": "left"}], width=2.0),
    # long straights so short episodes never reach a corner
    "straight": dict(
        spec=[
            {"type": "straight", "length": 60.0},
            {"type": "arc", "radius": 4.0, "angle": 180, "direction": "left"},
            {"type": "straight", "length": 60.0},
            {"type": "arc", "radius": 4.0, "angle": 180, "direction": "left"},
        ],
        width=2.0,
    ),
    # 2 straights, 5 left and 3 right corners
    "ood1": dict(
        spec=close_loop(
            _arcs(-45, 90, -45, 90)
            + [{"type": "straight", "length": 8.0}]
            + _arcs(135)
            + [{"type": "straight", "length": 8.0}]
            + _arcs(-45, 90, 90)
        ),
        width=2.0,
    ),
    # no straights, 4 corners in each direction
    "ood2": dict(spec=_arcs(180, -45, 135, -90, 180, -45, 135, -90), width=2.0),
}


def preset_track(name: str, seed: int = 0) -> Track:
    if name not in PRESETS:
        raise KeyError(f"unknown track preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    return generate_track(p["spec"], p["width"], seed=seed, name=name)
