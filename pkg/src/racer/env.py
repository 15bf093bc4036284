"""Racing environment: reset/step loop, collisions, rewards, laps and obstacle agents."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .errors import ConfigError, InvalidActionError, ProtocolError
from .sensing import SensorConfig, _cast_rays, _sensor_origin
from .trackgen import Track
from .vehicle import VEHICLE_LENGTH, VEHICLE_WIDTH, DynamicsParams, VehicleState, _vehicle_step

VARIANTS = ("R", "R_ab1", "R_ab2")
OSCILLATION_TOL = 1e-12


@dataclass
class RewardConfig:
    variant: str = "R"
    throttle_scale: float = 5.0
    oscillation_penalty: float = -2.0
    collision_penalty: float = -1.0
    d_coll: float = 0.15

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown reward variant {self.variant!r}; choose from {VARIANTS}")
        if not self.throttle_scale > 0:
            raise ConfigError("throttle_scale must be positive")
        if not self.oscillation_penalty < 0:
            raise ConfigError("oscillation_penalty must be negative")


@dataclass
class EnvConfig:
    track: Track
    dynamics: DynamicsParams = field(default_factory=DynamicsParams)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    max_episode_steps: int = 5000
    n_obstacle_agents: int = 0
    obstacle_policy_checkpoint: str | None = None
    ego_ct_multiplier: float = 1.0
    start_jitter: float = 0.1

    def __post_init__(self):
        if self.max_episode_steps <= 0:
            raise ConfigError("max_episode_steps must be positive")
        if self.n_obstacle_agents < 0:
            raise ConfigError("n_obstacle_agents must be >= 0")
        if not self.ego_ct_multiplier > 0:
            raise ConfigError("ego_ct_multiplier must be positive")


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminated: bool
    truncated: bool
    info: dict


def compute_reward(T: float, a_delta_t: float, a_delta_prev: float, collided: bool, config: RewardConfig):
    """Scalar reward and its components for one transition."""
    if config.variant == "R_ab1":
        throttle = config.throttle_scale * T
    else:
        throttle = config.throttle_scale * T * T
    a_t = min(max(a_delta_t, -1.0), 1.0)
    a_p = min(max(a_delta_prev, -1.0), 1.0)
    oscillation = config.oscillation_penalty if abs(a_t * a_p + 1.0) <= OSCILLATION_TOL else 0.0
    collision = config.collision_penalty if (config.variant == "R_ab2" and collided) else 0.0
    components = {"throttle": throttle, "oscillation": oscillation, "collision": collision}
    return throttle + oscillation + collision, components


# ---------------------------------------------------------------------------
# geometry kernels


@numba.njit(cache=True)
def _orient(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


@numba.njit(cache=True)
def _segments_cross(ax, ay, bx, by, cx, cy, dx, dy):
    d1 = _orient(cx, cy, dx, dy, ax, ay)
    d2 = _orient(cx, cy, dx, dy, bx, by)
    d3 = _orient(ax, ay, bx, by, cx, cy)
    d4 = _orient(ax, ay, bx, by, dx, dy)
    return (d1 * d2 <= 0.0) and (d3 * d4 <= 0.0) and not (d1 == 0.0 and d2 == 0.0 and d3 == 0.0 and d4 == 0.0)


@numba.njit(cache=True)
def _corners(x, y, yaw, length, width, out):
    c = math.cos(yaw)
    s = math.sin(yaw)
    hl = 0.5 * length
    hw = 0.5 * width
    lx = (hl, -hl, -hl, hl)
    ly = (hw, hw, -hw, -hw)
    for k in range(4):
        out[k, 0] = x + c * lx[k] - s * ly[k]
        out[k, 1] = y + s * lx[k] + c * ly[k]


@numba.njit(cache=True)
def _footprint_hits(corners, segs):
    for e in range(4):
        ax = corners[e, 0]
        ay = corners[e, 1]
        bx = corners[(e + 1) % 4, 0]
        by = corners[(e + 1) % 4, 1]
        for k in range(segs.shape[0]):
            if _segments_cross(ax, ay, bx, by, segs[k, 0], segs[k, 1], segs[k, 2], segs[k, 3]):
                return True
    return False


@numba.njit(cache=True)
def _project_progress(x, y, closed, cum):
    """Arc length of the closest point on the closed centerline polyline."""
    best = 1e300
    s_best = 0.0
    for i in range(closed.shape[0] - 1):
        ax = closed[i, 0]
        ay = closed[i, 1]
        ex = closed[i + 1, 0] - ax
        ey = closed[i + 1, 1] - ay
        ll = ex * ex + ey * ey
        u = ((x - ax) * ex + (y - ay) * ey) / ll if ll > 0 else 0.0
        if u < 0.0:
            u = 0.0
        elif u > 1.0:
            u = 1.0
        px = ax + u * ex - x
        py = ay + u * ey - y
        d = px * px + py * py
        if d < best:
            best = d
            s_best = cum[i] + u * (cum[i + 1] - cum[i])
    return s_best


def _rect_segments(corners: np.ndarray) -> np.ndarray:
    return np.hstack([corners, np.roll(corners, -1, axis=0)])


def center_ray_depth(obs: np.ndarray) -> float:
    """Depth straight ahead; mean of the two middle rays when the count is even."""
    n = len(obs)
    return float(0.5 * (obs[(n - 1) // 2] + obs[n // 2]))


# ---------------------------------------------------------------------------


class RacingEnv:
    """Single-vehicle (optionally multi-agent) racing environment.

    The ego is agent 0. Obstacle agents drive with the frozen policy's mean
    action and the unmodified dynamics parameters.
    """

    def __init__(self, config: EnvConfig, seed: int | None = None, obstacle_policy=None):
        self.config = config
        self.track = config.track
        self.params = config.dynamics
        self.ego_params = config.dynamics.replace(C_T=config.dynamics.C_T * config.ego_ct_multiplier)
        self._p_obs = self.params.to_array()
        self._p_ego = self.ego_params.to_array()
        self._walls = np.ascontiguousarray(self.track.segments)
        closed = np.vstack([self.track.centerline, self.track.centerline[:1]])
        self._closed = np.ascontiguousarray(closed)
        self._cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(closed, axis=0).T))])
        self.track_length = float(self._cum[-1])
        self.rng = np.random.default_rng(seed)
        self.obstacle_policy = obstacle_policy
        n_obs = config.n_obstacle_agents
        if n_obs > 0:
            spacing = self.track_length / (n_obs + 1)
            if spacing < 3 * VEHICLE_LENGTH:
                raise ConfigError(
                    f"{n_obs} obstacle agents need {3 * VEHICLE_LENGTH * (n_obs + 1):.1f} m of track; "
                    f"track is {self.track_length:.1f} m"
                )
            if self.obstacle_policy is None:
                if config.obstacle_policy_checkpoint is None:
                    raise ConfigError("obstacle agents need obstacle_policy_checkpoint")
                from .neural import load_checkpoint

                self.obstacle_policy = load_checkpoint(config.obstacle_policy_checkpoint).policy
        self._needs_reset = True
        self._corner_buf = np.empty((4, 2))

    # -- helpers ---------------------------------------------------------

    def _scan(self, state, segs) -> np.ndarray:
        cfg = self.config.sensor
        ox, oy = _sensor_origin(state[0], state[1], state[2], cfg.mount_x, cfg.mount_y)
        out = np.empty(cfg.n_rays)
        _cast_rays(ox, oy, state[2], cfg.n_rays, cfg.fov, cfg.d_max, segs, out)
        return out

    def _agent_segments(self, exclude: int) -> np.ndarray:
        """Walls plus footprints of every agent except ``exclude`` (0 = ego)."""
        if not self.n_agents_total > 1:
            return self._walls
        parts = [self._walls]
        for k in range(self.n_agents_total):
            if k != exclude:
                parts.append(_rect_segments(self._footprints[k]))
        return np.ascontiguousarray(np.vstack(parts))

    def _update_footprint(self, k: int):
        st = self._states[k]
        _corners(st[0], st[1], st[2], VEHICLE_LENGTH, VEHICLE_WIDTH, self._footprints[k])

    def _progress(self, state) -> float:
        return _project_progress(state[0], state[1], self._closed, self._cum)

    @staticmethod
    def _delta_s(s_new, s_old, length):
        d = s_new - s_old
        if d < -0.5 * length:
            d += length
        elif d > 0.5 * length:
            d -= length
        return d

    @property
    def state(self) -> VehicleState:
        return VehicleState.from_array(self._states[0])

    @property
    def obstacle_states(self) -> list[VehicleState]:
        return [VehicleState.from_array(s) for s in self._states[1:]]

    # -- API -------------------------------------------------------------

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        cfg = self.config
        n_obs = cfg.n_obstacle_agents
        self.n_agents_total = n_obs + 1
        self._states = np.zeros((self.n_agents_total, 8))
        x0, y0, yaw0 = self.track.start_pose
        lat = self.rng.uniform(-cfg.start_jitter, cfg.start_jitter) if cfg.start_jitter > 0 else 0.0
        self._states[0, 0] = x0 - lat * math.sin(yaw0)
        self._states[0, 1] = y0 + lat * math.cos(yaw0)
        self._states[0, 2] = yaw0
        spacing = self.track_length / self.n_agents_total
        for k in range(1, self.n_agents_total):
            x, y, yaw = self.track.point_at(k * spacing)
            self._states[k, :3] = (x, y, yaw)
        self._footprints = np.zeros((self.n_agents_total, 4, 2))
        for k in range(self.n_agents_total):
            self._update_footprint(k)
        self._frozen = np.zeros(self.n_agents_total, dtype=bool)
        self._step_count = 0
        self._t = 0.0
        s0 = self._progress(self._states[0])
        self._s_last = np.array([self._progress(st) for st in self._states])
        self._progress_total = np.zeros(self.n_agents_total)
        # obstacles start ahead of the ego by their arc-length offset
        for k in range(1, self.n_agents_total):
            self._progress_total[k] = (self._s_last[k] - s0) % self.track_length
        self._laps = 0
        self._lap_start_t = 0.0
        self._overtake_rank = np.floor((self._progress_total[0] - self._progress_total) / self.track_length)
        self.overtakes = 0
        self._needs_reset = False
        self._obs = self._scan(self._states[0], self._agent_segments(0))
        self._obstacle_obs = [self._scan(self._states[k], self._agent_segments(k)) for k in range(1, self.n_agents_total)]
        return self._obs.copy()

    def _step_obstacles(self):
        n_obs = self.n_agents_total - 1
        if n_obs == 0:
            return
        obs = np.stack(self._obstacle_obs)
        actions = self.obstacle_policy.mean_action(obs)
        for k in range(1, self.n_agents_total):
            if self._frozen[k]:
                continue
            a = actions[k - 1]
            new, _, _, _ = _vehicle_step(self._states[k], float(a[0]), float(a[1]), self._p_obs, self.params.t_s)
            self._states[k] = new
            self._update_footprint(k)
        for k in range(1, self.n_agents_total):
            if self._frozen[k]:
                continue
            segs = self._agent_segments(k)
            if _footprint_hits(self._footprints[k], segs):
                self._frozen[k] = True
                self._states[k, 3:6] = 0.0
                self._states[k, 6] = 0.0
        for k in range(1, self.n_agents_total):
            s = self._progress(self._states[k])
            self._progress_total[k] += self._delta_s(s, self._s_last[k], self.track_length)
            self._s_last[k] = s

    def step(self, raw_action) -> StepResult:
        if self._needs_reset:
            raise ProtocolError("step() called before reset() or after the episode ended")
        a_T = float(raw_action[0])
        a_delta = float(raw_action[1])
        if math.isnan(a_T) or math.isnan(a_delta):
            raise InvalidActionError("action contains NaN")
        prev_a_delta = self._states[0, 7]
        new, T, delta, a_lat = _vehicle_step(self._states[0], a_T, a_delta, self._p_ego, self.params.t_s)
        self._states[0] = new
        self._update_footprint(0)
        self._step_obstacles()
        self._step_count += 1
        self._t = self._step_count * self.params.t_s

        segs = self._agent_segments(0)
        obs = self._scan(new, segs)
        self._obs = obs
        if self.n_agents_total > 1:
            self._obstacle_obs = [self._scan(self._states[k], self._agent_segments(k)) for k in range(1, self.n_agents_total)]
        footprint_hit = _footprint_hits(self._footprints[0], segs)
        collided = bool(footprint_hit or obs.min() < self.config.reward.d_coll)
        reward, components = compute_reward(T, a_delta, prev_a_delta, collided, self.config.reward)

        # lap and overtake bookkeeping from unwrapped centerline progress
        s = self._progress(new)
        self._progress_total[0] += self._delta_s(s, self._s_last[0], self.track_length)
        self._s_last[0] = s
        lap_time = None
        if self._progress_total[0] >= (self._laps + 1) * self.track_length:
            self._laps += 1
            lap_time = self._t - self._lap_start_t
            self._lap_start_t = self._t
        overtaken = 0
        if self.n_agents_total > 1:
            rank = np.floor((self._progress_total[0] - self._progress_total) / self.track_length)
            gained = rank[1:] - self._overtake_rank[1:]
            overtaken = int(np.sum(gained[gained > 0]))
            self._overtake_rank = np.maximum(self._overtake_rank, rank)
            self.overtakes += overtaken

        terminated = collided
        truncated = (not terminated) and self._step_count >= self.config.max_episode_steps
        if terminated or truncated:
            self._needs_reset = True
        info = {
            "t": self._t,
            "T": T,
            "delta": delta,
            "a_T": a_T,
            "a_delta": a_delta,
            "v": math.hypot(new[3], new[4]),
            "a_lat": a_lat,
            "components": components,
            "collided": collided,
            "oscillation": components["oscillation"] != 0.0,
            "lap": self._laps,
            "lap_time": lap_time,
            "progress": float(self._progress_total[0]),
            "overtakes": overtaken,
        }
        return StepResult(obs.copy(), float(reward), terminated, truncated, info)

    def telemetry_record(self, result: StepResult) -> dict:
        st = self._states[0]
        info = result.info
        return {
            "t": info["t"],
            "x": float(st[0]),
            "y": float(st[1]),
            "yaw": float(st[2]),
            "v_x": float(st[3]),
            "v_y": float(st[4]),
            "yaw_rate": float(st[5]),
            "a_T": info["a_T"],
            "a_delta": info["a_delta"],
            "T": info["T"],
            "delta": info["delta"],
            "reward": result.reward,
            "r_throttle": info["components"]["throttle"],
            "r_oscillation": info["components"]["oscillation"],
            "r_collision": info["components"]["collision"],
            "d_ctr": center_ray_depth(result.observation),
            "terminated": result.terminated,
            "truncated": result.truncated,
            "lap": info["lap"],
            "lap_time": info["lap_time"],
        }


class TelemetryWriter:
    """JSON-lines sink, one record per step."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = self.path.open("w")

    def write(self, record: dict):
        self._fh.write(json.dumps(record) + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_telemetry(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


class VecEnv:
    """N independent environments stepped in lockstep with automatic reset.

    When an episode ends the returned observation is the first one of the next
    episode; the final observation is kept in ``info["final_observation"]``.
    """

    def __init__(self, config: EnvConfig, n_envs: int, seed: int = 0, obstacle_policy=None):
        self.envs = [RacingEnv(config, seed=None, obstacle_policy=obstacle_policy) for _ in range(n_envs)]
        self.n_envs = n_envs
        self.seed = seed
        for i, env in enumerate(self.envs):
            env.rng = np.random.default_rng([seed, i])

    def reset(self) -> np.ndarray:
        return np.stack([env.reset() for env in self.envs])

    def step(self, actions: np.ndarray):
        n = self.n_envs
        obs = np.empty((n, self.envs[0].config.sensor.n_rays))
        rewards = np.empty(n)
        terminated = np.zeros(n, dtype=bool)
        truncated = np.zeros(n, dtype=bool)
        infos = []
        for i, env in enumerate(self.envs):
            res = env.step(actions[i])
            rewards[i] = res.reward
            terminated[i] = res.terminated
            truncated[i] = res.truncated
            info = res.info
            if res.terminated or res.truncated:
                info["final_observation"] = res.observation
                obs[i] = env.reset()
            else:
                obs[i] = res.observation
            infos.append(info)
        return obs, rewards, terminated, truncated, infos

    def get_state(self) -> list:
        return [_env_snapshot(env) for env in self.envs]

    def set_state(self, snapshots: list):
        for env, snap in zip(self.envs, snapshots):
            _env_restore(env, snap)


_SNAPSHOT_FIELDS = (
    "n_agents_total", "_states", "_footprints", "_frozen", "_step_count", "_t", "_s_last",
    "_progress_total", "_laps", "_lap_start_t", "_overtake_rank", "overtakes", "_needs_reset",
    "_obs", "_obstacle_obs",
)


def _env_snapshot(env: RacingEnv) -> dict:
    snap = {"rng": env.rng.bit_generator.state}
    for name in _SNAPSHOT_FIELDS:
        value = getattr(env, name)
        if isinstance(value, np.ndarray):
            value = value.copy()
        elif isinstance(value, list):
            value = [v.copy() for v in value]
        snap[name] = value
    return snap


def _env_restore(env: RacingEnv, snap: dict):
    env.rng.bit_generator.state = snap["rng"]
    for name in _SNAPSHOT_FIELDS:
        value = snap[name]
        if isinstance(value, np.ndarray):
            value = value.copy()
        elif isinstance(value, list):
            value = [np.asarray(v).copy() for v in value]
        setattr(env, name, value)
