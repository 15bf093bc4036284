import csv
import dataclasses

import numpy as np
import pytest

import racer.trainer as trainer_mod
from oracles import central_difference, discounted_advantages, relative_error
from racer.env import EnvConfig, RacingEnv, VecEnv
from racer.errors import NumericalError, ShapeError
from racer.neural import MlpPolicy, load_checkpoint, logprob_of
from racer.trackgen import preset_track
from racer.trainer import TrainConfig, TrainReport, compute_gae, evaluate, loss_and_grad, ppo_loss, train

TINY = dict(n_steps=64, n_envs=2, minibatch_size=32, n_epochs=2)


@pytest.fixture(scope="module")
def oval():
    return preset_track("oval")


# ---------------------------------------------------------------------------
# GAE


def test_single_terminal_step():
    adv, ret = compute_gae([1.0], [0.5], [True], [False], [7.0], gamma=0.99, lam=0.95)
    assert adv[0] == 0.5 and ret[0] == 1.0


@pytest.mark.parametrize(
    "term, trunc, expected",
    [
        (False, False, [1.03125, 1.125, 1.5]),
        (False, True, [1.03125, 1.125, 1.5]),
        (True, False, [0.96875, 0.875, 0.5]),
        (True, True, [0.96875, 0.875, 0.5]),
    ],
)
def test_bootstrap_hand_tables(term, trunc, expected):
    # gamma = lam = 0.5, rewards 1, values 0.5, successor value 2 at the last step
    adv, ret = compute_gae([1.0, 1.0, 1.0], [0.5] * 3, [False, False, term], [False, False, trunc],
                           [0.0, 0.0, 2.0], gamma=0.5, lam=0.5)
    assert adv.tolist() == expected
    assert ret.tolist() == [a + 0.5 for a in expected]


def test_lambda_one_matches_discounted_sums():
    rng = np.random.default_rng(0)
    for _ in range(200):
        T = int(rng.integers(1, 17))
        r = rng.normal(size=T)
        v = rng.normal(size=T)
        term = rng.random(T) < 0.2
        trunc = (rng.random(T) < 0.2) & ~term
        boot = rng.normal(size=T)
        adv, _ = compute_gae(r, v, term, trunc, boot, gamma=0.97, lam=1.0)
        ref = discounted_advantages(r, v, term, trunc, boot, 0.97)
        assert np.max(np.abs(adv - ref)) <= 1e-9


def test_gamma_zero_collapses():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=10), rng.normal(size=10)
    adv, _ = compute_gae(r, v, np.zeros(10, bool), np.zeros(10, bool), rng.normal(size=10), gamma=0.0, lam=0.95)
    assert np.array_equal(adv, r - v)


def test_gae_batched_columns_are_independent():
    rng = np.random.default_rng(2)
    r, v, b = rng.normal(size=(3, 8, 4))
    term = rng.random((8, 4)) < 0.2
    trunc = (rng.random((8, 4)) < 0.2) & ~term
    adv, _ = compute_gae(r, v, term, trunc, b)
    for j in range(4):
        col, _ = compute_gae(r[:, j], v[:, j], term[:, j], trunc[:, j], b[:, j])
        assert np.array_equal(adv[:, j], col)


def test_gae_shape_error():
    with pytest.raises(ShapeError):
        compute_gae([1.0, 2.0], [0.0], [False, False], [False, False], [0.0, 0.0])


# ---------------------------------------------------------------------------
# PPO loss


def test_ppo_loss_examples():
    _, d = ppo_loss([0.0], [0.0], [0.7], [0.0], [0.0])
    assert d["policy_loss"] == pytest.approx(-0.7)
    _, d = ppo_loss([np.log(1.5)], [0.0], [1.0], [0.0], [0.0], clip_eps=0.2)
    assert d["surrogate"][0] == pytest.approx(1.2, abs=1e-15)
    _, d = ppo_loss([np.log(0.5)], [0.0], [-1.0], [0.0], [0.0], clip_eps=0.2)
    assert d["surrogate"][0] == pytest.approx(-0.8, abs=1e-15)


def test_ppo_loss_composition():
    loss, d = ppo_loss([0.0, 0.0], [0.0, 0.0], [1.0, -1.0], [1.0, 3.0], [0.0, 0.0], value_coef=0.5,
                       entropy=2.0, entropy_coef=0.1)
    assert loss == pytest.approx(0.0 + 0.5 * 5.0 - 0.2)


def _small_policy(seed):
    rng = np.random.default_rng(seed)
    pol = MlpPolicy(obs_dim=6, hidden=(5, 4), act_dim=2, seed=seed, obs_scale=0.5)
    pol.params[:] += rng.normal(scale=0.3, size=pol.size)
    return pol, rng


@pytest.mark.parametrize("seed", range(5))
def test_total_loss_gradient(seed):
    pol, rng = _small_policy(seed)
    obs = rng.uniform(0, 4, size=(4, 6))
    act = rng.normal(size=(4, 2))
    # old log-probs near the current ones so some samples sit on each side of the clip
    mean, _, _ = pol._forward_batch(obs)
    lp_old = logprob_of(mean, np.exp(pol.log_std), act) + rng.normal(scale=0.3, size=4)
    adv = rng.normal(size=4)
    ret = rng.normal(size=4)
    cfg = TrainConfig(entropy_coef=0.01)

    def f():
        return loss_and_grad(pol, obs, act, lp_old, adv, ret, cfg)[0]

    _, grad, _ = loss_and_grad(pol, obs, act, lp_old, adv, ret, cfg)
    assert relative_error(grad, central_difference(f, pol.params)) < 1e-4


def test_ratio_is_one_after_collection(oval):
    pol = MlpPolicy(seed=0)
    vec = VecEnv(EnvConfig(oval), n_envs=2, seed=0)
    obs = vec.reset()
    rng = np.random.default_rng(0)
    all_obs, all_act, all_lp = [], [], []
    for _ in range(20):
        mean, std, _, _ = pol.forward(obs)
        a = mean + std * rng.standard_normal(mean.shape)
        all_obs.append(obs)
        all_act.append(a)
        all_lp.append(logprob_of(mean, std, a))
        obs = vec.step(a)[0]
    o, a, lp = np.concatenate(all_obs), np.concatenate(all_act), np.concatenate(all_lp)
    _, _, d = loss_and_grad(pol, o, a, lp, np.ones(len(lp)), np.zeros(len(lp)), TrainConfig())
    assert np.max(np.abs(d["ratio"] - 1.0)) <= 1e-9


# ---------------------------------------------------------------------------
# training loop


def test_resume_is_bit_identical(tmp_path, oval):
    env_cfg = EnvConfig(oval)
    full_cfg = TrainConfig(total_steps=3 * 128, checkpoint_interval=128, seed=3, **TINY)
    _, full = train(env_cfg, full_cfg, out_dir=tmp_path / "full")
    ck = tmp_path / "full" / "checkpoint_000000128.npz"
    assert ck.exists()
    _, resumed = train(env_cfg, full_cfg, out_dir=tmp_path / "resumed", resume_from=ck)
    assert np.array_equal(full.params, resumed.params)


def test_deterministic_for_fixed_seed(oval):
    cfg = TrainConfig(total_steps=128, seed=5, **TINY)
    _, a = train(EnvConfig(oval), cfg)
    _, b = train(EnvConfig(oval), cfg)
    assert np.array_equal(a.params, b.params)


def test_collision_counter_matches_terminations(monkeypatch, oval):
    count = {"terminated": 0}
    original = RacingEnv.step

    def counting_step(self, action):
        res = original(self, action)
        count["terminated"] += int(res.terminated)
        return res

    monkeypatch.setattr(RacingEnv, "step", counting_step)
    # long enough episodes for an untrained policy to reach the first corner and crash
    report, _ = train(EnvConfig(oval, max_episode_steps=1500), TrainConfig(total_steps=4096, seed=0, **TINY))
    assert count["terminated"] > 0
    assert report.total_collisions == count["terminated"]
    assert report.collisions == sorted(report.collisions)


def test_learning_curve_csv(tmp_path, oval):
    report, _ = train(EnvConfig(oval), TrainConfig(total_steps=256, seed=0, **TINY), out_dir=tmp_path)
    with open(tmp_path / "learning_curve.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "mean_reward", "collisions", "oscillation_events"]
    assert len(rows) == 1 + len(report.steps) == 3
    assert (tmp_path / "final.npz").exists()
    assert load_checkpoint(tmp_path / "final.npz").step == 256


def test_nan_loss_aborts_with_dump(monkeypatch, tmp_path, oval):
    def bad(*args, **kwargs):
        loss, grad, diag = real(*args, **kwargs)
        return float("nan"), grad, diag

    real = trainer_mod.loss_and_grad
    monkeypatch.setattr(trainer_mod, "loss_and_grad", bad)
    with pytest.raises(NumericalError) as exc:
        train(EnvConfig(oval), TrainConfig(total_steps=128, seed=0, **TINY), out_dir=tmp_path)
    assert "nan_dump" in str(exc.value)
    assert any(p.name.startswith("nan_dump") for p in tmp_path.iterdir())


def test_moving_average():
    rep = TrainReport(mean_reward=[1.0, 2.0, 3.0, 4.0])
    assert rep.moving_average(2).tolist() == [1.0, 1.5, 2.5, 3.5]


def test_smoke_training_improves():
    """Straight corridor: mean reward rises from the first to the last quartile."""
    track = preset_track("straight")
    env_cfg = EnvConfig(track, max_episode_steps=500)
    wins = 0
    for seed in range(3):
        report, _ = train(env_cfg, TrainConfig(total_steps=50_000, n_steps=256, n_envs=4, seed=seed))
        r = np.asarray(report.mean_reward)
        q = max(1, len(r) // 4)
        wins += r[-q:].mean() > r[:q].mean()
    assert wins >= 2


# ---------------------------------------------------------------------------
# evaluation


def _wall_policy():
    pol = MlpPolicy(seed=None)
    pol.bm[:] = [1.0, 0.0]
    return pol


def test_evaluate_straight_into_wall(oval):
    rep = evaluate(_wall_policy(), EnvConfig(oval), n_laps=10)
    assert rep.laps == 0 and rep.terminated
    assert rep.t_mean is None and rep.t_min is None and rep.t_std is None
    assert rep.laps_label == "0†"
    assert rep.telemetry[-1]["terminated"]


def test_evaluate_deterministic_repeat(oval):
    a = evaluate(MlpPolicy(seed=2), EnvConfig(oval), n_laps=2)
    b = evaluate(MlpPolicy(seed=2), EnvConfig(oval), n_laps=2)
    assert a.summary() == b.summary()


def test_evaluate_at_higher_motor_constant(oval):
    env_cfg = EnvConfig(oval)
    fast = dataclasses.replace(env_cfg, dynamics=env_cfg.dynamics.replace(C_T=120.0))
    slow_rep = evaluate(_wall_policy(), env_cfg, n_laps=1)
    fast_rep = evaluate(_wall_policy(), fast, n_laps=1)
    assert fast_rep.v_max > slow_rep.v_max
