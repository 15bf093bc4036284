"""Planar vehicle model: action mapping, motor/friction model, dynamic bicycle.

The state is integrated with semi-implicit Euler sub-steps. Lateral tire
forces follow a Pacejka law on each axle, and the combined force per axle is
clipped to the friction circle mu * F_z. Below ``v_blend_high`` the velocity
state is blended toward the kinematic bicycle so the model stays well posed
at standstill.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numba
import numpy as np

from .errors import InvalidActionError, NumericalError

DELTA_MIN = -0.36
DELTA_MAX = 0.36
VEHICLE_LENGTH = 0.5
VEHICLE_WIDTH = 0.27

# x, y, yaw, v_x, v_y, yaw_rate, v_m_prev, a_delta_prev
STATE_SIZE = 8


@dataclass(frozen=True)
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    v_x: float = 0.0
    v_y: float = 0.0
    yaw_rate: float = 0.0
    v_m_prev: float = 0.0
    a_delta_prev: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.x, self.y, self.yaw, self.v_x, self.v_y, self.yaw_rate, self.v_m_prev, self.a_delta_prev],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, arr) -> "VehicleState":
        return cls(*(float(v) for v in arr))

    @property
    def speed(self) -> float:
        return math.hypot(self.v_x, self.v_y)


@dataclass(frozen=True)
class ActionCommand:
    a_T: float
    a_delta: float
    T: float
    delta: float


@dataclass
class DynamicsParams:
    """Vehicle and motor constants.

    C_T, C_d, C_r, motor_force and l_wb are the fixed model constants; every other
    default is an artifact calibration (see README, "Parameter provenance").
    """

    C_T: float = 20.0
    C_d: float = 0.01
    C_r: float = 0.2
    t_s: float = 0.01
    motor_force: float = 1.2
    # 1.89 m/s top speed at C_T = 20
    motor_to_body_gain: float = 0.05275
    m: float = 3.5
    l_wb: float = 0.3
    l_f: float = 0.15
    l_r: float = 0.15
    I_z: float = 0.05
    mu: float = 1.0
    g: float = 9.81
    B: float = 5.0
    C: float = 1.8
    D: float | None = None
    n_substeps: int = 5
    v_blend_low: float = 0.2
    v_blend_high: float = 0.5

    def __post_init__(self):
        if self.D is None:
            self.D = self.mu * self.g
        if not self.C_T > 0:
            raise ValueError("C_T must be positive")
        if not 0 < self.t_s <= 0.05:
            raise ValueError("t_s must lie in (0, 0.05]")
        if abs(self.l_f + self.l_r - self.l_wb) > 1e-9:
            raise ValueError("l_f + l_r must equal l_wb")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.D > self.mu * self.g + 1e-9:
            raise ValueError("Pacejka peak D cannot exceed mu * g")
        if self.n_substeps < 1:
            raise ValueError("n_substeps must be >= 1")

    def to_array(self) -> np.ndarray:
        return np.array([float(getattr(self, f.name)) for f in fields(self)], dtype=np.float64)

    def replace(self, **changes) -> "DynamicsParams":
        data = asdict(self)
        data.update(changes)
        if ("mu" in changes or "g" in changes) and "D" not in changes:
            data["D"] = None
        return DynamicsParams(**data)


# index of each field inside DynamicsParams.to_array()
_P = {f.name: i for i, f in enumerate(fields(DynamicsParams))}
P_CT, P_CD, P_CR, P_TS = _P["C_T"], _P["C_d"], _P["C_r"], _P["t_s"]
P_FMOT, P_GAIN, P_M, P_LWB = _P["motor_force"], _P["motor_to_body_gain"], _P["m"], _P["l_wb"]
P_LF, P_LR, P_IZ, P_MU, P_G = _P["l_f"], _P["l_r"], _P["I_z"], _P["mu"], _P["g"]
P_B, P_C, P_D = _P["B"], _P["C"], _P["D"]
P_NSUB, P_VLO, P_VHI = _P["n_substeps"], _P["v_blend_low"], _P["v_blend_high"]


@numba.njit(cache=True)
def _clip(v, lo, hi):
    return lo if v < lo else (hi if v > hi else v)


@numba.njit(cache=True)
def _motor_update(v_m_prev, T, C_T, C_d, C_r, t_s):
    resist = v_m_prev * (v_m_prev * C_d + C_r)
    v_m = v_m_prev + t_s * (C_T * T - resist)
    return v_m if v_m > 0.0 else 0.0


@numba.njit(cache=True)
def _wrap_angle(a):
    w = a - 2.0 * math.pi * math.floor((a + math.pi) / (2.0 * math.pi))
    return math.pi if w <= -math.pi else w


@numba.njit(cache=True)
def _vehicle_step(state, a_T, a_delta, p, dt):
    """Advance one control period. Returns (new_state, T, delta, lateral accel)."""
    T = _clip(a_T, 0.0, 1.0)
    delta = _clip(a_delta, DELTA_MIN, DELTA_MAX)
    v_m = _motor_update(state[6], T, p[P_CT], p[P_CD], p[P_CR], p[P_TS])
    v_cmd = p[P_GAIN] * v_m

    m = p[P_M]
    l_f = p[P_LF]
    l_r = p[P_LR]
    L = p[P_LWB]
    g = p[P_G]
    mu = p[P_MU]
    fz_f = m * g * l_r / L
    fz_r = m * g * l_f / L
    cap_f = mu * fz_f
    cap_r = mu * fz_r
    Bt = p[P_B]
    Ct = p[P_C]
    Dt = p[P_D]
    v_lo = p[P_VLO]
    v_hi = p[P_VHI]
    n_sub = int(p[P_NSUB])
    h = dt / n_sub
    cos_d = math.cos(delta)
    sin_d = math.sin(delta)
    tan_d = math.tan(delta)

    x, y, yaw = state[0], state[1], state[2]
    vx, vy, r = state[3], state[4], state[5]
    a_lat = 0.0
    for _ in range(n_sub):
        fx = _clip(m * (v_cmd - vx) / h, -p[P_FMOT], p[P_FMOT])
        fx_f = 0.5 * fx
        fx_r = 0.5 * fx
        vxs = vx if vx > v_lo else v_lo
        alpha_f = delta - math.atan2(vy + l_f * r, vxs)
        alpha_r = -math.atan2(vy - l_r * r, vxs)
        fy_f = fz_f / g * Dt * math.sin(Ct * math.atan(Bt * alpha_f))
        fy_r = fz_r / g * Dt * math.sin(Ct * math.atan(Bt * alpha_r))
        mag = math.hypot(fx_f, fy_f)
        if mag > cap_f:
            fx_f *= cap_f / mag
            fy_f *= cap_f / mag
        mag = math.hypot(fx_r, fy_r)
        if mag > cap_r:
            fx_r *= cap_r / mag
            fy_r *= cap_r / mag
        f_long = fx_f * cos_d - fy_f * sin_d + fx_r
        f_lat = fx_f * sin_d + fy_f * cos_d + fy_r
        moment = l_f * (fx_f * sin_d + fy_f * cos_d) - l_r * fy_r
        # slip angles are meaningless near standstill: below v_hi the whole
        # state, including the longitudinal channel, blends to the kinematic model
        w = _clip((vx - v_lo) / (v_hi - v_lo), 0.0, 1.0)
        vx_n = vx + h * (w * (f_long / m + vy * r) + (1.0 - w) * fx / m)
        vy_n = vy + h * (f_lat / m - vx * r)
        r_n = r + h * moment / p[P_IZ]
        r_kin = vx_n * tan_d / L
        vy_n = w * vy_n + (1.0 - w) * l_r * r_kin
        r_n = w * r_n + (1.0 - w) * r_kin
        a_lat = w * f_lat / m + (1.0 - w) * vx_n * r_kin
        vx, vy, r = vx_n, vy_n, r_n
        yaw = yaw + h * r
        c = math.cos(yaw)
        s = math.sin(yaw)
        x = x + h * (vx * c - vy * s)
        y = y + h * (vx * s + vy * c)

    out = np.empty(8)
    out[0] = x
    out[1] = y
    out[2] = _wrap_angle(yaw)
    out[3] = vx
    out[4] = vy
    out[5] = r
    out[6] = v_m
    out[7] = _clip(a_delta, -1.0, 1.0)
    return out, T, delta, a_lat


def map_action(a_T: float, a_delta: float) -> tuple[float, float]:
    """Normalized policy action -> (throttle in [0, 1], steering angle in rad)."""
    if math.isnan(a_T) or math.isnan(a_delta):
        raise InvalidActionError("action contains NaN")
    return min(max(a_T, 0.0), 1.0), max(min(a_delta, DELTA_MAX), DELTA_MIN)


def make_command(a_T: float, a_delta: float) -> ActionCommand:
    T, delta = map_action(a_T, a_delta)
    return ActionCommand(a_T=float(a_T), a_delta=float(a_delta), T=T, delta=delta)


def motor_update(v_m_prev: float, T: float, params: DynamicsParams) -> float:
    v_m = _motor_update(float(v_m_prev), float(T), params.C_T, params.C_d, params.C_r, params.t_s)
    if not math.isfinite(v_m):
        raise NumericalError(f"motor velocity became non-finite (v_m_prev={v_m_prev}, T={T})")
    return v_m


def steady_state_throttle(v_m: float, params: DynamicsParams | None = None) -> float:
    p = params or DynamicsParams()
    return (p.C_d * v_m**2 + p.C_r * v_m) / p.C_T


def steady_state_motor_velocity(params: DynamicsParams | None = None, T: float = 1.0) -> float:
    """Positive root of C_d v^2 + C_r v = C_T T."""
    p = params or DynamicsParams()
    return (-p.C_r + math.sqrt(p.C_r**2 + 4 * p.C_d * p.C_T * T)) / (2 * p.C_d)


def step_dynamics(
    state: VehicleState,
    command: ActionCommand,
    params: DynamicsParams,
    dt: float | None = None,
    return_lateral: bool = False,
):
    """Advance ``state`` by one control period under ``command``.

    With ``return_lateral`` the realized body-frame lateral acceleration of the
    last sub-step is returned alongside the new state.
    """
    arr = state.as_array()
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite vehicle state: {state}")
    dt = params.t_s if dt is None else dt
    out, _, _, a_lat = _vehicle_step(arr, float(command.a_T), float(command.a_delta), params.to_array(), float(dt))
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"vehicle state became non-finite after step from {state}")
    new = VehicleState.from_array(out)
    return (new, float(a_lat)) if return_lateral else new


def footprint(x: float, y: float, yaw: float, length: float = VEHICLE_LENGTH, width: float = VEHICLE_WIDTH):
    """Corners of the body rectangle, counter-clockwise from front-left."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = length / 2, width / 2
    local = ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    return np.array([(x + c * lx - s * ly, y + s * lx + c * ly) for lx, ly in local])
