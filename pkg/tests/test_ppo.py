import numpy as np
import pytest

from endonav.net import MINIATURE_SPEC, PolicyValueNet, load_checkpoint
from endonav.ppo import (Adam, PPOConfig, RolloutBuffer, TrainPhase,
                         UpdateAborted, VectorRollout, compute_gae, ppo_update,
                         train)
from endonav.toys import BanditEnv, CorridorEnv

from oracles import discounted_returns


def toy_config(**kw):
    defaults = dict(n_envs=4, horizon=64, batch=16, seed=0)
    defaults.update(kw)
    return PPOConfig(**defaults)


def filled_buffer(net, cfg, env_cls=BanditEnv, seed=0):
    envs = [env_cls() for _ in range(cfg.n_envs)]
    roller = VectorRollout(envs, net, cfg, phase_seed=seed)
    roller.start()
    buf = RolloutBuffer(cfg.n_envs, cfg.horizon, roller.obs.shape[1:],
                        net.spec.lstm_units)
    rng = np.random.default_rng(seed)
    roller.collect(buf, rng)
    return buf, rng


# --- GAE --------------------------------------------------------------------

def test_gae_lambda_zero_is_one_step_td():
    rng = np.random.default_rng(0)
    r = rng.standard_normal((2, 10))
    v = rng.standard_normal((2, 10))
    done = np.zeros((2, 10), dtype=bool)
    done[0, 4] = True
    boot = rng.standard_normal(2)
    adv, ret = compute_gae(r, v, done, boot, gamma=0.9, lam=0.0)
    v_next = np.concatenate([v[:, 1:], boot[:, None]], axis=1)
    v_next[0, 4] = 0.0
    expected = r + 0.9 * v_next * (1 - done) - v
    assert np.allclose(adv, expected, atol=1e-12)
    assert np.allclose(ret, adv + v, atol=1e-12)


def test_gae_lambda_one_is_discounted_return_minus_value():
    rng = np.random.default_rng(1)
    r = rng.standard_normal((1, 12))
    v = rng.standard_normal((1, 12))
    done = np.zeros((1, 12), dtype=bool)
    done[0, -1] = True   # single full episode
    adv, _ = compute_gae(r, v, done, np.zeros(1), gamma=0.95, lam=1.0)
    expected = discounted_returns(r[0], 0.95) - v[0]
    assert np.allclose(adv[0], expected, atol=1e-10)


def test_gae_zero_rewards_zero_values():
    r = np.zeros((3, 8))
    v = np.zeros((3, 8))
    done = np.zeros((3, 8), dtype=bool)
    adv, ret = compute_gae(r, v, done, np.zeros(3), gamma=0.99, lam=0.95)
    assert np.all(adv == 0.0)
    assert np.all(ret == 0.0)


# --- update mechanics --------------------------------------------------------

def test_clip_arithmetic():
    # ratio 1.5, clip 0.2, positive advantage -> clipped surrogate 1.2*A wins
    ratio, clip_eps, adv = 1.5, 0.2, 2.0
    s1 = ratio * adv
    s2 = np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * adv
    assert min(s1, s2) == pytest.approx(1.2 * adv)


def test_identical_policies_give_unit_ratio_and_zero_kl():
    net = PolicyValueNet(MINIATURE_SPEC, seed=0)
    cfg = toy_config(epochs_per_iter=1, minibatches_per_epoch=1, lr=0.0)
    buf, rng = filled_buffer(net, cfg)
    stats = ppo_update(net, Adam(net.params, 0.0), buf, cfg, rng)
    assert stats["kl"] == pytest.approx(0.0, abs=1e-9)


def test_advantage_normalization_invariant():
    net = PolicyValueNet(MINIATURE_SPEC, seed=1)
    cfg = toy_config(seed=2)
    buf, _ = filled_buffer(net, cfg, env_cls=CorridorEnv, seed=2)
    adv = buf.advantage
    norm = (adv - adv.mean()) / (adv.std() + 1e-8)
    assert abs(norm.mean()) < 1e-6
    assert norm.var() == pytest.approx(1.0, abs=1e-3)


def test_nonfinite_loss_restores_snapshot():
    net = PolicyValueNet(MINIATURE_SPEC, seed=3)
    cfg = toy_config(seed=3)
    buf, rng = filled_buffer(net, cfg, seed=3)
    buf.advantage[0, 0] = np.nan
    before = {k: p.data.copy() for k, p in net.params.items()}
    with pytest.raises(UpdateAborted):
        ppo_update(net, Adam(net.params, cfg.lr), buf, cfg, rng)
    for k, p in net.params.items():
        assert np.array_equal(p.data, before[k])


def test_update_changes_parameters_and_reports_losses():
    net = PolicyValueNet(MINIATURE_SPEC, seed=4)
    cfg = toy_config(seed=4)
    buf, rng = filled_buffer(net, cfg, env_cls=CorridorEnv, seed=4)
    before = {k: p.data.copy() for k, p in net.params.items()}
    stats = ppo_update(net, Adam(net.params, cfg.lr), buf, cfg, rng)
    assert any(not np.array_equal(p.data, before[k])
               for k, p in net.params.items())
    for key in ("policy_loss", "value_loss", "entropy", "kl"):
        assert np.isfinite(stats[key])
    assert stats["entropy"] > 0


def test_large_entropy_coefficient_keeps_policy_uniform():
    net = PolicyValueNet(MINIATURE_SPEC, seed=5)
    cfg = toy_config(entropy_coef=10.0, seed=5)
    res = train(net, cfg, [TrainPhase("bandit", lambda i: BanditEnv(),
                                      steps=50 * cfg.n_envs * cfg.horizon)])
    assert res.curve[-1]["entropy"] >= 0.95 * 3 * np.log(3.0)


def test_kl_stays_small_on_bandit():
    net = PolicyValueNet(MINIATURE_SPEC, seed=6)
    cfg = toy_config(seed=6)
    res = train(net, cfg, [TrainPhase("bandit", lambda i: BanditEnv(),
                                      steps=30 * cfg.n_envs * cfg.horizon)])
    assert all(row["kl"] < 0.1 for row in res.curve)


# --- training loop ------------------------------------------------------------

def bandit_optimal_prob(net):
    env = BanditEnv()
    obs, _ = env.reset()
    probs, _, _ = net.head_probs(obs[None].astype(np.float32) / 255.0,
                                 net.zero_state(1))
    return probs[BanditEnv.optimal_head][0, BanditEnv.optimal_index]


def test_bandit_reaches_greedy_policy():
    net = PolicyValueNet(MINIATURE_SPEC, seed=0)
    cfg = toy_config(seed=0)
    train(net, cfg, [TrainPhase("bandit", lambda i: BanditEnv(),
                                steps=120 * cfg.n_envs * cfg.horizon)],
          stop_when=lambda row: bandit_optimal_prob(net) >= 0.95)
    assert bandit_optimal_prob(net) >= 0.95


def test_training_deterministic_given_seeds():
    def run():
        net = PolicyValueNet(MINIATURE_SPEC, seed=7)
        cfg = toy_config(seed=7)
        train(net, cfg, [TrainPhase("bandit", lambda i: BanditEnv(),
                                    steps=5 * cfg.n_envs * cfg.horizon)])
        return {k: p.data.copy() for k, p in net.params.items()}

    a = run()
    b = run()
    for k in a:
        assert np.array_equal(a[k], b[k]), f"{k} differs between identical runs"


def test_phase_checkpoint_resume_matches_uninterrupted(tmp_path):
    steps = 4 * 4 * 64
    phases = [TrainPhase("p0", lambda i: BanditEnv(), steps),
              TrainPhase("p1", lambda i: CorridorEnv(), steps)]

    net_a = PolicyValueNet(MINIATURE_SPEC, seed=8)
    cfg = toy_config(seed=8)
    train(net_a, cfg, phases, out_dir=str(tmp_path / "full"))

    net_b = PolicyValueNet(MINIATURE_SPEC, seed=8)
    res_b = train(net_b, cfg, phases[:1], out_dir=str(tmp_path / "part"))
    net_c, opt, extra = __import__("endonav.ppo", fromlist=["resume"]) \
        .resume(res_b.checkpoints[-1])
    assert extra["phase_name"] == "p0"
    train(net_c, cfg, phases, optimizer=opt, start_phase=1,
          out_dir=str(tmp_path / "resumed"))

    for k in net_a.params:
        assert np.array_equal(net_a.params[k].data, net_c.params[k].data)


def test_checkpoints_written_per_phase(tmp_path):
    net = PolicyValueNet(MINIATURE_SPEC, seed=9)
    cfg = toy_config(seed=9)
    res = train(net, cfg, [TrainPhase("only", lambda i: BanditEnv(),
                                      steps=2 * cfg.n_envs * cfg.horizon)],
                out_dir=str(tmp_path))
    assert len(res.checkpoints) == 1
    net2, _, _, extra = load_checkpoint(res.checkpoints[0])
    for k in net.params:
        assert np.array_equal(net.params[k].data, net2.params[k].data)
    assert (tmp_path / "curve.tsv").exists()


def test_config_validation():
    with pytest.raises(ValueError):
        PPOConfig(clip=1.5)
    with pytest.raises(ValueError):
        PPOConfig(horizon=100, batch=64)
