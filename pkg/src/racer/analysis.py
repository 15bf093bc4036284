"""Interpretability and system identification on driving telemetry.

Pearson correlations between network channels, activation saturation by
driving stage, tire proxies derived from the scan, adhesion envelopes, and
linear / Pacejka fits of that envelope.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateSeriesError, DomainError, FitError, InsufficientDataError, ShapeError

STAGES = ("straight", "entry", "apex", "exit")
DEFAULT_BRACKETS = (0.0, 0.25, 0.5, 0.75, 1.0)


# ---------------------------------------------------------------------------
# correlations


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"series must be 1-D and equal length, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise InsufficientDataError("need at least two samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateSeriesError("series has zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


@dataclass
class CorrelationReport:
    labels: list
    matrix: np.ndarray

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", *self.labels])
            for label, row in zip(self.labels, self.matrix):
                w.writerow([label, *(repr(float(v)) for v in row)])
        return path

    def strongest(self, k: int = 10) -> list[tuple[str, str, float]]:
        """Top-|r| off-diagonal pairs."""
        n = len(self.labels)
        pairs = [(self.labels[i], self.labels[j], float(self.matrix[i, j]))
                 for i in range(n) for j in range(i + 1, n) if np.isfinite(self.matrix[i, j])]
        return sorted(pairs, key=lambda p: -abs(p[2]))[:k]


def correlation_matrix(channels: dict) -> CorrelationReport:
    """Pairwise Pearson r; pairs involving a constant channel are NaN."""
    labels = list(channels)
    n = len(labels)
    mat = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(i, n):
            try:
                r = pearson(channels[labels[i]], channels[labels[j]])
            except DegenerateSeriesError:
                continue
            if i == j:
                r = 1.0
            mat[i, j] = mat[j, i] = r
    return CorrelationReport(labels, mat)


def trace_channels(traces, outputs: np.ndarray | None = None, neurons1=None, neurons2=None) -> dict:
    """Named channels from an activation trace (L1-n<i>, L2-n<i>) and actions."""
    ch = {}
    l1, l2 = np.asarray(traces.layer1), np.asarray(traces.layer2)
    for i in (range(l1.shape[1]) if neurons1 is None else neurons1):
        ch[f"L1-n{i}"] = l1[:, i]
    for i in (range(l2.shape[1]) if neurons2 is None else neurons2):
        ch[f"L2-n{i}"] = l2[:, i]
    if outputs is not None:
        outputs = np.asarray(outputs)
        ch["a_T"] = outputs[:, 0]
        ch["a_delta"] = outputs[:, 1]
    return ch


# ---------------------------------------------------------------------------
# driving stages and saturation


def raceline_stages(curvature, straight_frac: float = 0.05, apex_frac: float = 0.9) -> np.ndarray:
    """Stage label for every point of a closed line from its curvature profile.

    |kappa| below ``straight_frac`` * max|kappa| is straight; the rest form
    corner runs. Inside a run, each stretch within ``apex_frac`` of the run's
    peak is an apex. Points before the first apex are entry, points after the
    last are exit, and the gap between two apexes is split at its curvature
    minimum into the exit of one corner and the entry of the next. A line with
    no straight at all is one closed run starting at its deepest valley.
    """
    k = np.abs(np.asarray(curvature, dtype=float))
    n = len(k)
    labels = np.array(["straight"] * n, dtype=object)
    kmax = k.max() if n else 0.0
    if kmax == 0.0:
        return labels
    corner = k >= straight_frac * kmax
    if corner.all():
        runs = [(np.arange(n) + int(np.argmin(k))) % n]
    else:
        # rotate so that index 0 is a straight point, then split corner runs
        start = int(np.argmin(corner))
        order = (np.arange(n) + start) % n
        runs, cur = [], []
        for idx in order:
            if corner[idx]:
                cur.append(idx)
            elif cur:
                runs.append(np.array(cur))
                cur = []
        if cur:
            runs.append(np.array(cur))
    for run in runs:
        kr = k[run]
        hi = kr >= apex_frac * kr.max()
        stage = np.where(hi, "apex", "").astype(object)
        # apex islands as (first, last) positions inside the run
        starts = np.flatnonzero(hi & ~np.r_[False, hi[:-1]])
        ends = np.flatnonzero(hi & ~np.r_[hi[1:], False])
        stage[: starts[0]] = "entry"
        stage[ends[-1] + 1:] = "exit"
        for a, b in zip(ends[:-1], starts[1:]):
            split = a + 1 + int(np.argmin(kr[a + 1:b]))
            stage[a + 1:split] = "exit"
            stage[split:b] = "entry"
        labels[run] = stage
    return labels


@dataclass
class StageLabels:
    labels: np.ndarray
    off_track: int
    warning: bool


def stage_classify(positions, raceline, straight_frac: float = 0.05, apex_frac: float = 0.9) -> StageLabels:
    """Label each telemetry position by the stage of its nearest raceline point."""
    pos = _positions(positions)
    line_labels = raceline_stages(raceline.curvature, straight_frac, apex_frac)
    pts = np.asarray(raceline.points, dtype=float)
    labels = np.empty(len(pos), dtype=object)
    off = 0
    for start in range(0, len(pos), 4096):
        chunk = pos[start:start + 4096]
        d2 = ((chunk[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
        nearest = np.argmin(d2, axis=1)
        labels[start:start + len(chunk)] = line_labels[nearest]
        off += int(np.sum(np.sqrt(d2[np.arange(len(chunk)), nearest]) > raceline.width))
    if off:
        warnings.warn(f"{off} telemetry samples lie off the track; labels may be unreliable", stacklevel=2)
    return StageLabels(labels, off, off > 0)


def _positions(positions) -> np.ndarray:
    if isinstance(positions, (list, tuple)) and positions and isinstance(positions[0], dict):
        return np.array([(r["x"], r["y"]) for r in positions], dtype=float)
    return np.asarray(positions, dtype=float).reshape(-1, 2)


@dataclass
class SaturationTable:
    brackets: tuple
    rows: dict  # (layer, stage) -> percentages per bracket
    omitted: list = field(default_factory=list)

    def write_csv(self, path) -> Path:
        path = Path(path)
        edges = self.brackets
        names = [f"{int(round(a * 100))}-{int(round(b * 100))}%" for a, b in zip(edges[:-1], edges[1:])]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "stage", *names])
            for (layer, stage), pct in self.rows.items():
                w.writerow([layer, stage, *(f"{v:.2f}" for v in pct)])
        return path


def saturation_table(traces, labels, brackets=DEFAULT_BRACKETS) -> SaturationTable:
    """Share of neuron-steps per |activation| bracket, by layer and stage."""
    layers = {"layer1": np.asarray(traces.layer1), "layer2": np.asarray(traces.layer2)}
    labels = np.asarray(labels, dtype=object)
    edges = np.asarray(brackets, dtype=float)
    rows = {}
    omitted = []
    for lname, act in layers.items():
        if act.shape[0] != len(labels):
            raise ShapeError(f"{lname} has {act.shape[0]} steps but {len(labels)} labels")
        mag = np.abs(act)
        for stage in STAGES:
            sel = labels == stage
            if not sel.any():
                if stage not in omitted:
                    omitted.append(stage)
                continue
            vals = mag[sel].ravel()
            idx = np.clip(np.searchsorted(edges, vals, side="right") - 1, 0, len(edges) - 2)
            counts = np.bincount(idx, minlength=len(edges) - 1)
            rows[(lname, stage)] = 100.0 * counts / vals.size
    return SaturationTable(tuple(brackets), rows, omitted)


# ---------------------------------------------------------------------------
# tire proxies and fits


@dataclass
class TireSamples:
    alpha_p: np.ndarray
    a_lat_p: np.ndarray
    kappa: np.ndarray
    skipped: int


def _column(telemetry, key) -> np.ndarray:
    if isinstance(telemetry, dict):
        return np.asarray(telemetry[key], dtype=float)
    return np.array([r[key] for r in telemetry], dtype=float)


def tire_proxies(telemetry, l_wb: float = 0.3, delta_o: float = 0.0) -> TireSamples:
    """Scan-derived curvature, lateral-acceleration and slip proxies.

    kappa = sgn(a_delta) / d_ctr, a_lat = kappa * a_T, delta_k = l_wb * kappa
    + delta_o and alpha = delta - delta_k. Samples with d_ctr <= 0 are skipped.
    """
    d_ctr = _column(telemetry, "d_ctr")
    a_T = _column(telemetry, "a_T")
    a_delta = _column(telemetry, "a_delta")
    delta = _column(telemetry, "delta")
    ok = d_ctr > 0
    kappa = np.sign(a_delta[ok]) / d_ctr[ok]
    a_lat = kappa * a_T[ok]
    delta_k = l_wb * kappa + delta_o
    alpha = delta[ok] - delta_k
    return TireSamples(alpha, a_lat, kappa, int(np.count_nonzero(~ok)))


def estimate_delta_o(telemetry, v_threshold: float, l_wb: float = 0.3, min_samples: int = 10) -> float:
    """Intercept of the OLS fit delta ~ l_wb * kappa over slow samples."""
    if isinstance(telemetry, dict):
        v = np.asarray(telemetry["v"], dtype=float) if "v" in telemetry else np.hypot(
            _column(telemetry, "v_x"), _column(telemetry, "v_y"))
    else:
        v = np.array([r["v"] if "v" in r else math.hypot(r["v_x"], r["v_y"]) for r in telemetry])
    d_ctr = _column(telemetry, "d_ctr")
    a_delta = _column(telemetry, "a_delta")
    delta = _column(telemetry, "delta")
    sel = (v < v_threshold) & (d_ctr > 0)
    if np.count_nonzero(sel) < min_samples:
        raise InsufficientDataError(f"{np.count_nonzero(sel)} samples below {v_threshold} m/s; need {min_samples}")
    x = l_wb * np.sign(a_delta[sel]) / d_ctr[sel]
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, delta[sel], rcond=None)
    return float(coef[0])


@dataclass
class Envelope:
    alpha: np.ndarray  # bin centres
    a_lat: np.ndarray  # percentile per bin
    counts: np.ndarray


def adhesion_envelope(alpha, a_lat, n_bins: int = 20, q: float = 95.0, min_bins: int = 5) -> Envelope:
    """Upper percentile of a_lat within uniform alpha bins (empty bins dropped)."""
    alpha = np.asarray(alpha, dtype=float)
    a_lat = np.asarray(a_lat, dtype=float)
    if alpha.shape != a_lat.shape:
        raise ShapeError("alpha and a_lat must have the same shape")
    if len(alpha) < n_bins * 5:
        raise InsufficientDataError(f"{len(alpha)} samples for {n_bins} bins; need {n_bins * 5}")
    lo, hi = float(alpha.min()), float(alpha.max())
    if hi == lo:
        raise InsufficientDataError("alpha has zero range")
    edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, alpha, side="right") - 1, 0, n_bins - 1)
    centres, values, counts = [], [], []
    for b in range(n_bins):
        sel = idx == b
        if not sel.any():
            continue
        centres.append(0.5 * (edges[b] + edges[b + 1]))
        values.append(np.percentile(a_lat[sel], q))
        counts.append(int(sel.sum()))
    if len(centres) < min_bins:
        raise InsufficientDataError(f"only {len(centres)} populated bins; need {min_bins}")
    return Envelope(np.array(centres), np.array(values), np.array(counts))


def r_squared(y, y_hat) -> float:
    y = np.asarray(y, dtype=float)
    ss_res = float(np.sum((y - y_hat) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else -math.inf
    return 1.0 - ss_res / ss_tot


def _xy(envelope_or_alpha, a_lat=None):
    if a_lat is None:
        return np.asarray(envelope_or_alpha.alpha, dtype=float), np.asarray(envelope_or_alpha.a_lat, dtype=float)
    return np.asarray(envelope_or_alpha, dtype=float), np.asarray(a_lat, dtype=float)


def fit_linear(envelope, a_lat=None) -> tuple[float, float]:
    """Stiffness C_alpha of a_lat = C_alpha * alpha (through the origin) and R^2."""
    x, y = _xy(envelope, a_lat)
    if len(x) < 5:
        raise InsufficientDataError("need at least 5 envelope points")
    sxx = float(x @ x)
    if sxx == 0.0:
        raise DegenerateSeriesError("alpha is identically zero")
    c = float(x @ y) / sxx
    return c, r_squared(y, c * x)


def pacejka(alpha, B, C, D):
    return D * np.sin(C * np.arctan(B * np.asarray(alpha, dtype=float)))


def _pacejka_jac(x, p):
    B, C, D = p
    u = np.arctan(B * x)
    s = np.sin(C * u)
    c = np.cos(C * u)
    return np.column_stack([D * c * C * x / (1.0 + (B * x) ** 2), D * c * u, s])


@dataclass
class PacejkaFit:
    B: float
    C: float
    D: float
    r2: float
    residual_ss: float
    converged: bool
    iterations: int

    def as_dict(self) -> dict:
        return {"B": self.B, "C": self.C, "D": self.D, "r2": self.r2, "residual_ss": self.residual_ss}


PACEJKA_BOUNDS = (np.array([1e-4, 1e-3, 1e-6]), np.array([1e3, 10.0, 1e6]))


def _lm(x, y, p0, lower, upper, max_iter=500, tol=1e-15):
    """Levenberg-Marquardt with projection onto box bounds."""
    p = np.clip(np.asarray(p0, dtype=float), lower, upper)
    r = pacejka(x, *p) - y
    cost = float(r @ r)
    lam = 1e-3
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        J = _pacejka_jac(x, p)
        g = J.T @ r
        H = J.T @ J
        improved = False
        for _ in range(30):
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                step = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            p_new = np.clip(p + step, lower, upper)
            r_new = pacejka(x, *p_new) - y
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                rel = (cost - cost_new) / max(cost, 1e-300)
                dp = np.max(np.abs(p_new - p) / np.maximum(np.abs(p), 1e-12))
                p, r, cost = p_new, r_new, cost_new
                lam = max(lam / 3, 1e-12)
                improved = True
                if rel < tol or dp < 1e-12:
                    converged = True
                break
            lam *= 4
        if not improved or converged or cost == 0.0:
            converged = True
            break
    return p, cost, converged, it


def fit_pacejka(envelope, a_lat=None, B_starts=(2.0, 5.0, 10.0, 20.0), C_starts=(1.2, 1.8, 3.0),
                bounds=PACEJKA_BOUNDS) -> PacejkaFit:
    """Multi-start bounded fit of a_lat = D sin(C atan(B alpha))."""
    x, y = _xy(envelope, a_lat)
    if len(x) < 5:
        raise InsufficientDataError("need at least 5 envelope points")
    lower, upper = (np.asarray(b, dtype=float) for b in bounds)
    d0 = max(float(np.max(np.abs(y))), 1e-6)
    starts = [(B, C, d0) for B in B_starts for C in C_starts]
    # near-linear start: small B with D chosen to match the linear stiffness
    span = max(float(np.max(np.abs(x))), 1e-9)
    if float(x @ x) > 0:
        c_lin = abs(float(x @ y) / float(x @ x))
        b_small = 0.05 / span
        if c_lin > 0:
            starts.append((b_small, 1.0, c_lin / b_small))
    best = None
    for p0 in starts:
        p, cost, conv, it = _lm(x, y, p0, lower, upper)
        if not np.isfinite(cost):
            continue
        if best is None or cost < best[1]:
            best = (p, cost, conv, it)
    if best is None:
        raise FitError("Pacejka fit failed from every start (non-finite residuals)")
    p, cost, conv, it = best
    return PacejkaFit(float(p[0]), float(p[1]), float(p[2]), r_squared(y, pacejka(x, *p)), cost, conv, it)


@dataclass
class TireIdentification:
    samples: TireSamples
    envelope: Envelope
    delta_o: float
    linear_C_alpha: float
    linear_r2: float
    pacejka: PacejkaFit

    def report(self) -> dict:
        return {
            "delta_o": self.delta_o,
            "n_samples": int(len(self.samples.alpha_p)),
            "skipped_samples": self.samples.skipped,
            "envelope": {"alpha": self.envelope.alpha.tolist(), "a_lat": self.envelope.a_lat.tolist()},
            "linear": {"C_alpha": self.linear_C_alpha, "r2": self.linear_r2},
            "pacejka": self.pacejka.as_dict(),
        }


def identify_tires(telemetry, l_wb: float = 0.3, v_threshold: float = 0.5, n_bins: int = 20,
                   delta_o: float | None = None) -> TireIdentification:
    if delta_o is None:
        delta_o = estimate_delta_o(telemetry, v_threshold, l_wb)
    samples = tire_proxies(telemetry, l_wb, delta_o)
    env = adhesion_envelope(samples.alpha_p, samples.a_lat_p, n_bins)
    c_alpha, r2_lin = fit_linear(env)
    pac = fit_pacejka(env)
    return TireIdentification(samples, env, delta_o, c_alpha, r2_lin, pac)


# ---------------------------------------------------------------------------
# misc


def corner_speed_limit(radius: float, mu: float, g: float = 9.81) -> float:
    """Friction-limited cornering speed sqrt(mu g R)."""
    if not radius > 0:
        raise DomainError(f"radius must be positive, got {radius}")
    if not mu >= 0 or not g > 0:
        raise DomainError(f"mu must be >= 0 and g > 0, got mu={mu}, g={g}")
    return math.sqrt(mu * g * radius)


def apex_boundary_distance(positions, track, raceline, apex_frac: float = 0.9) -> float:
    """Mean wall clearance of the samples labelled apex (NaN if there are none)."""
    from .trackgen import point_segment_distances

    pos = _positions(positions)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        labels = stage_classify(pos, raceline, apex_frac=apex_frac).labels
    sel = labels == "apex"
    if not sel.any():
        return math.nan
    d_left = point_segment_distances(pos[sel], track.left_boundary)
    d_right = point_segment_distances(pos[sel], track.right_boundary)
    return float(np.mean(np.minimum(d_left, d_right)))
