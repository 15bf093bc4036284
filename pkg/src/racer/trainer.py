"""PPO training loop, advantage estimation and policy evaluation."""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import EnvConfig, RacingEnv, TelemetryWriter, VecEnv
from .errors import NumericalError, ShapeError
from .neural import (
    AdamState,
    MlpPolicy,
    adam_step,
    gaussian_entropy,
    load_checkpoint,
    logprob_of,
    save_checkpoint,
)


@dataclass
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    n_epochs: int = 10
    minibatch_size: int = 64
    lr: float = 3e-4
    n_steps: int = 2048  # rollout length per environment
    n_envs: int = 8
    total_steps: int = 2_000_000
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    # rewards are multiplied by this before value/advantage estimation; with
    # per-minibatch advantage normalization it only rescales the value loss
    reward_scale: float = 0.01
    seed: int = 0
    checkpoint_interval: int = 0  # environment steps; 0 = final checkpoint only
    init_log_std: float = math.log(0.5)

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if not self.clip_eps > 0:
            raise ValueError("clip_eps must be positive")
        if not self.reward_scale > 0:
            raise ValueError("reward_scale must be positive")
        if self.n_envs < 1 or self.n_steps < 1 or self.minibatch_size < 1:
            raise ValueError("n_envs, n_steps and minibatch_size must be >= 1")


@dataclass
class TrainReport:
    steps: list = field(default_factory=list)
    mean_reward: list = field(default_factory=list)
    collisions: list = field(default_factory=list)
    oscillation_events: list = field(default_factory=list)
    episode_returns: list = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoints: list = field(default_factory=list)
    total_collisions: int = 0
    total_episodes: int = 0
    stopped_early: bool = False

    def moving_average(self, order: int = 10) -> np.ndarray:
        r = np.asarray(self.mean_reward, dtype=float)
        if len(r) == 0:
            return r
        order = max(1, min(order, len(r)))
        c = np.cumsum(np.concatenate([[0.0], r]))
        out = np.empty(len(r))
        for i in range(len(r)):
            lo = max(0, i + 1 - order)
            out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
        return out

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "mean_reward", "collisions", "oscillation_events"])
            for row in zip(self.steps, self.mean_reward, self.collisions, self.oscillation_events):
                w.writerow([row[0], repr(float(row[1])), row[2], row[3]])
        return path


# ---------------------------------------------------------------------------
# advantage estimation and loss


def compute_gae(rewards, values, terminated, truncated, bootstrap_values, gamma: float = 0.99, lam: float = 0.95):
    """Generalized advantage estimates over a time-major rollout.

    At terminated steps the successor value is 0. At truncated steps, and at
    the last step of the rollout, it is ``bootstrap_values[t]``. Arrays may be
    (T,) or (T, N).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    terminated = np.asarray(terminated, dtype=bool)
    truncated = np.asarray(truncated, dtype=bool)
    bootstrap_values = np.asarray(bootstrap_values, dtype=float)
    shape = rewards.shape
    for name, arr in (("values", values), ("terminated", terminated), ("truncated", truncated),
                      ("bootstrap_values", bootstrap_values)):
        if arr.shape != shape:
            raise ShapeError(f"{name} has shape {arr.shape}, rewards has {shape}")
    n = shape[0]
    adv = np.zeros(shape)
    last = np.zeros(shape[1:])
    for t in range(n - 1, -1, -1):
        if t == n - 1:
            next_v = bootstrap_values[t]
        else:
            next_v = np.where(truncated[t], bootstrap_values[t], values[t + 1])
        next_v = np.where(terminated[t], 0.0, next_v)
        done = terminated[t] | truncated[t]
        delta = rewards[t] + gamma * next_v - values[t]
        carry = 0.0 if t == n - 1 else last
        last = delta + gamma * lam * np.where(done, 0.0, carry)
        adv[t] = last
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / max(adv.std(), 1e-8)


def ppo_loss(logprob_new, logprob_old, advantage, value_pred, return_target, clip_eps: float = 0.2,
             entropy: float = 0.0, value_coef: float = 0.5, entropy_coef: float = 0.0):
    """Clipped-surrogate PPO loss averaged over the batch.

    Returns (loss, diagnostics). The diagnostics include the partials of the
    loss w.r.t. ``logprob_new`` and ``value_pred`` for the backward pass.
    """
    logprob_new = np.asarray(logprob_new, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    value_pred = np.asarray(value_pred, dtype=float)
    b = len(advantage)
    ratio = np.exp(logprob_new - np.asarray(logprob_old, dtype=float))
    unclipped = ratio * advantage
    clipped = np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * advantage
    surrogate = np.minimum(unclipped, clipped)
    policy_loss = -surrogate.mean()
    err = value_pred - np.asarray(return_target, dtype=float)
    value_loss = np.mean(err * err)
    loss = policy_loss + value_coef * value_loss - entropy_coef * entropy
    use_unclipped = unclipped <= clipped
    d_logprob = np.where(use_unclipped, -unclipped / b, 0.0)
    d_value = value_coef * 2.0 * err / b
    diag = {
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy),
        "ratio": ratio,
        "surrogate": surrogate,
        "clip_fraction": float(np.mean(np.abs(ratio - 1) > clip_eps)),
        "d_logprob": d_logprob,
        "d_value": d_value,
    }
    return float(loss), diag


def loss_and_grad(policy: MlpPolicy, obs, actions, logprob_old, advantage, returns, cfg: TrainConfig):
    """Total PPO loss on a minibatch and its gradient w.r.t. the flat parameters."""
    mean, value, cache = policy._forward_batch(obs)
    std = np.exp(policy.log_std)
    lp = logprob_of(mean, std, actions)
    ent = gaussian_entropy(policy.log_std)
    loss, diag = ppo_loss(lp, logprob_old, advantage, value, returns, cfg.clip_eps, ent,
                          cfg.value_coef, cfg.entropy_coef)
    z = (actions - mean) / std
    dlp = diag["d_logprob"][:, None]
    d_mean = dlp * z / std
    d_log_std = np.sum(dlp * (z * z - 1.0), axis=0) - cfg.entropy_coef
    grad = policy.backward(cache, d_mean, d_log_std, diag["d_value"])
    return loss, grad, diag


# ---------------------------------------------------------------------------
# training


def _env_state_to_extra(vec: VecEnv) -> list:
    return vec.get_state()


def train(env_config: EnvConfig, cfg: TrainConfig, out_dir=None, callback=None, resume_from=None,
          obstacle_policy=None, init_policy: MlpPolicy | None = None, log=None) -> tuple[TrainReport, MlpPolicy]:
    """Run PPO. Deterministic for fixed seed and n_envs.

    ``callback(iteration, policy, report)`` may return True to stop early.
    ``resume_from`` continues a run from a checkpoint written by this function.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    obs_dim = env_config.sensor.n_rays
    vec = VecEnv(env_config, cfg.n_envs, seed=cfg.seed, obstacle_policy=obstacle_policy)
    report = TrainReport()
    t0 = time.perf_counter()

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        policy = ck.policy
        adam = ck.adam or AdamState.zeros(policy.size)
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.rng_state
        extra = ck.extra
        vec.reset()
        vec.set_state(extra["env_state"])
        obs = np.asarray(extra["obs"], dtype=float)
        for name in ("steps", "mean_reward", "collisions", "oscillation_events", "episode_returns"):
            setattr(report, name, list(extra["report"][name]))
        report.total_collisions = int(extra["report"]["total_collisions"])
        report.total_episodes = int(extra["report"]["total_episodes"])
        ep_return = np.asarray(extra["ep_return"], dtype=float)
        step = ck.step
        iteration = int(extra["iteration"])
    else:
        if init_policy is not None:
            policy = init_policy.copy()
        else:
            policy = MlpPolicy(obs_dim, seed=cfg.seed, init_log_std=cfg.init_log_std,
                               obs_scale=1.0 / env_config.sensor.d_max)
        adam = AdamState.zeros(policy.size)
        rng = np.random.default_rng(cfg.seed + 1_000_003)
        obs = vec.reset()
        ep_return = np.zeros(cfg.n_envs)
        step = 0
        iteration = 0

    n, N = cfg.n_steps, cfg.n_envs
    next_ckpt = cfg.checkpoint_interval * (step // cfg.checkpoint_interval + 1) if cfg.checkpoint_interval else None

    while step < cfg.total_steps:
        buf_obs = np.empty((n, N, obs_dim))
        buf_act = np.empty((n, N, 2))
        buf_lp = np.empty((n, N))
        buf_val = np.empty((n, N))
        buf_rew = np.empty((n, N))
        buf_term = np.zeros((n, N), dtype=bool)
        buf_trunc = np.zeros((n, N), dtype=bool)
        buf_boot = np.zeros((n, N))
        oscillations = 0
        for t in range(n):
            mean, std, value, _ = policy.forward(obs)
            action = mean + std * rng.standard_normal(mean.shape)
            buf_obs[t] = obs
            buf_act[t] = action
            buf_lp[t] = logprob_of(mean, std, action)
            buf_val[t] = value
            obs, rewards, term, trunc, infos = vec.step(action)
            buf_rew[t] = rewards
            buf_term[t] = term
            buf_trunc[t] = trunc
            ep_return += rewards
            for i in range(N):
                info = infos[i]
                if info["oscillation"]:
                    oscillations += 1
                if trunc[i]:
                    buf_boot[t, i] = policy.value(info["final_observation"])
                if term[i] or trunc[i]:
                    report.episode_returns.append(float(ep_return[i]))
                    ep_return[i] = 0.0
                    report.total_episodes += 1
                    if term[i]:
                        report.total_collisions += 1
        last_v = policy.value(obs)
        buf_boot[n - 1] = np.where(buf_trunc[n - 1], buf_boot[n - 1], last_v)
        adv, ret = compute_gae(buf_rew * cfg.reward_scale, buf_val, buf_term, buf_trunc, buf_boot, cfg.gamma, cfg.gae_lambda)
        step += n * N
        iteration += 1

        flat_obs = buf_obs.reshape(n * N, obs_dim)
        flat_act = buf_act.reshape(n * N, 2)
        flat_lp = buf_lp.reshape(-1)
        flat_adv = adv.reshape(-1)
        flat_ret = ret.reshape(-1)
        total = n * N
        for _epoch in range(cfg.n_epochs):
            perm = rng.permutation(total)
            for start in range(0, total, cfg.minibatch_size):
                idx = perm[start:start + cfg.minibatch_size]
                mb_adv = flat_adv[idx]
                if len(idx) > 1:
                    mb_adv = normalize_advantages(mb_adv)
                loss, grad, diag = loss_and_grad(policy, flat_obs[idx], flat_act[idx], flat_lp[idx], mb_adv,
                                                 flat_ret[idx], cfg)
                if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                    dump = _dump_minibatch(out_dir, policy, flat_obs[idx], flat_act[idx], flat_lp[idx], mb_adv,
                                           flat_ret[idx])
                    raise NumericalError(f"non-finite PPO loss at step {step}; minibatch dumped to {dump}")
                gnorm = float(np.sqrt(grad @ grad))
                if cfg.max_grad_norm and gnorm > cfg.max_grad_norm:
                    grad *= cfg.max_grad_norm / gnorm
                adam_step(policy.params, grad, adam, cfg.lr)

        report.steps.append(step)
        report.mean_reward.append(float(buf_rew.mean()))
        report.collisions.append(report.total_collisions)
        report.oscillation_events.append(oscillations)
        if log is not None:
            log(f"iter {iteration} step {step} reward {buf_rew.mean():.4f} collisions {report.total_collisions} "
                f"osc {oscillations} std {np.exp(policy.log_std).round(3).tolist()}")

        stop = bool(callback(iteration, policy, report)) if callback is not None else False
        state = dict(policy=policy, adam=adam, rng=rng, vec=vec, obs=obs, ep_return=ep_return, report=report,
                     step=step, iteration=iteration)
        if out_dir is not None and next_ckpt is not None and step >= next_ckpt:
            path = out_dir / f"checkpoint_{step:09d}.npz"
            _save_training_checkpoint(path, **state)
            report.checkpoints.append(str(path))
            while next_ckpt <= step:
                next_ckpt += cfg.checkpoint_interval
        if stop:
            report.stopped_early = True
            break

    report.wall_clock = time.perf_counter() - t0
    if out_dir is not None:
        final = out_dir / "final.npz"
        _save_training_checkpoint(final, policy=policy, adam=adam, rng=rng, vec=vec, obs=obs, ep_return=ep_return,
                                  report=report, step=step, iteration=iteration)
        report.checkpoints.append(str(final))
        report.write_csv(out_dir / "learning_curve.csv")
    return report, policy


def _save_training_checkpoint(path, policy, adam, rng, vec, obs, ep_return, report, step, iteration):
    extra = {
        "env_state": vec.get_state(),
        "obs": obs,
        "ep_return": ep_return,
        "iteration": iteration,
        "report": {
            "steps": report.steps,
            "mean_reward": report.mean_reward,
            "collisions": report.collisions,
            "oscillation_events": report.oscillation_events,
            "episode_returns": report.episode_returns,
            "total_collisions": report.total_collisions,
            "total_episodes": report.total_episodes,
        },
    }
    save_checkpoint(path, policy, adam, step, rng.bit_generator.state, extra)


def _dump_minibatch(out_dir, policy, obs, act, lp, adv, ret) -> Path:
    target = (out_dir or Path(".")) / "nan_dump.npz"
    np.savez(target, params=policy.params, obs=obs, actions=act, logprob_old=lp, advantages=adv, returns=ret)
    return target


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    n_laps_requested: int
    laps: int
    lap_times: list
    t_min: float | None
    t_max: float | None
    t_mean: float | None
    t_std: float | None
    v_min: float
    v_max: float
    v_mean: float
    steps: int
    terminated: bool
    truncated: bool
    oscillation_events: int
    telemetry: list = field(repr=False, default_factory=list)
    traces: object = field(repr=False, default=None)

    @property
    def completed(self) -> bool:
        return self.laps >= self.n_laps_requested

    @property
    def laps_label(self) -> str:
        """Completed-lap count, daggered when the run ended early."""
        return str(self.laps) if self.completed else f"{self.laps}†"

    def summary(self) -> dict:
        return {
            "laps": self.laps_label,
            "t_min": self.t_min,
            "t_max": self.t_max,
            "t_mean": self.t_mean,
            "t_std": self.t_std,
            "v_min": self.v_min,
            "v_max": self.v_max,
            "v_mean": self.v_mean,
            "steps": self.steps,
            "terminated": self.terminated,
            "oscillation_events": self.oscillation_events,
        }


def _as_policy(policy_or_path) -> MlpPolicy:
    if isinstance(policy_or_path, MlpPolicy):
        return policy_or_path
    return load_checkpoint(policy_or_path).policy


def evaluate(checkpoint, env_config: EnvConfig, n_laps: int = 10, deterministic: bool = True, seed: int = 0,
             max_steps: int | None = None, telemetry_path=None, capture: bool = False,
             keep_telemetry: bool = True, obstacle_policy=None) -> EvalReport:
    """Drive until ``n_laps`` laps are completed, a collision, or the step cap."""
    policy = _as_policy(checkpoint)
    if max_steps is None:
        track_len = env_config.track.length
        max_steps = int(math.ceil(n_laps * track_len / 0.5 / env_config.dynamics.t_s))
    cfg = dataclasses.replace(env_config, max_episode_steps=max_steps)
    env = RacingEnv(cfg, seed=seed, obstacle_policy=obstacle_policy)
    rng = np.random.default_rng(seed)
    obs = env.reset(seed=seed)
    telemetry = []
    l1, l2 = [], []
    speeds = []
    lap_times = []
    osc = 0
    writer = TelemetryWriter(telemetry_path) if telemetry_path is not None else None
    res = None
    try:
        while True:
            if capture:
                mean, std, _, trace = policy.forward(obs, capture=True)
                l1.append(trace.layer1[0])
                l2.append(trace.layer2[0])
            else:
                mean = policy.mean_action(obs)
                std = np.exp(policy.log_std)
            action = mean if deterministic else mean + std * rng.standard_normal(mean.shape)
            res = env.step(action)
            speeds.append(res.info["v"])
            osc += int(res.info["oscillation"])
            if res.info["lap_time"] is not None:
                lap_times.append(res.info["lap_time"])
            if keep_telemetry or writer is not None:
                rec = env.telemetry_record(res)
                if keep_telemetry:
                    telemetry.append(rec)
                if writer is not None:
                    writer.write(rec)
            obs = res.observation
            if res.terminated or res.truncated or len(lap_times) >= n_laps:
                break
    finally:
        if writer is not None:
            writer.close()
    laps = len(lap_times)
    lt = np.asarray(lap_times)
    sp = np.asarray(speeds)
    traces = None
    if capture:
        from .neural import ActivationTrace

        traces = ActivationTrace(np.array(l1), np.array(l2))
    return EvalReport(
        n_laps_requested=n_laps,
        laps=laps,
        lap_times=lap_times,
        t_min=float(lt.min()) if laps else None,
        t_max=float(lt.max()) if laps else None,
        t_mean=float(lt.mean()) if laps else None,
        t_std=float(lt.std()) if laps else None,
        v_min=float(sp.min()),
        v_max=float(sp.max()),
        v_mean=float(sp.mean()),
        steps=len(sp),
        terminated=bool(res.terminated),
        truncated=bool(res.truncated),
        oscillation_events=osc,
        telemetry=telemetry,
        traces=traces,
    )
