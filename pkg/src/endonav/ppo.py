"""Proximal policy optimization over the recurrent visuomotor network.

One iteration = a vectorized rollout of horizon steps per env, generalized
advantage estimation, then clipped-surrogate updates over shuffled
whole-sequence minibatches (BPTT stays valid because sequences keep their
step order and recurrent state snapshots).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .net import (NetworkSpec, PolicyValueNet, RecurrentState,
                  indices_to_action, load_checkpoint, save_checkpoint)
from .reward import normalize_return


class UpdateAborted(RuntimeError):
    """Non-finite loss: parameters were restored to the pre-update snapshot."""


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    clip: float = 0.2
    lr: float = 3e-4
    batch: int = 64                  # BPTT sequence length
    minibatches_per_epoch: int = 4
    epochs_per_iter: int = 4
    entropy_coef: float = 0.01
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    max_steps_total: int = 200_000   # desk default; paper scale is 1.5M
    n_envs: int = 8
    horizon: int = 256               # steps per env per iteration
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must be in (0,1)")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0,1]")
        if self.horizon % self.batch != 0:
            raise ValueError("horizon must be a multiple of the sequence batch")


class Adam:
    """First-order adaptive-moment optimizer over the net's parameter dict."""

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[k] / b1c) \
                / (np.sqrt(self.v[k] / b2c) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state):
        self.t = state["t"]
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}


class RolloutBuffer:
    """Per-env, per-step storage for one training iteration."""

    def __init__(self, n_envs: int, horizon: int, obs_shape, lstm_units: int):
        self.n_envs, self.horizon = n_envs, horizon
        self.obs = np.zeros((n_envs, horizon) + obs_shape, dtype=np.uint8)
        self.action_idx = np.zeros((n_envs, horizon, 3), dtype=np.int64)
        self.log_prob = np.zeros((n_envs, horizon), dtype=np.float64)
        self.value = np.zeros((n_envs, horizon), dtype=np.float64)
        self.reward = np.zeros((n_envs, horizon), dtype=np.float64)
        self.dense = np.zeros((n_envs, horizon), dtype=np.float64)
        self.done = np.zeros((n_envs, horizon), dtype=bool)
        self.h = np.zeros((n_envs, horizon, lstm_units), dtype=np.float32)
        self.c = np.zeros((n_envs, horizon, lstm_units), dtype=np.float32)
        self.advantage = np.zeros((n_envs, horizon), dtype=np.float64)
        self.returns = np.zeros((n_envs, horizon), dtype=np.float64)


def compute_gae(rewards, values, dones, bootstrap, gamma: float, lam: float):
    """A_t = sum_k (gamma*lam)^k * delta_{t+k} with episode-boundary cuts;
    returns (advantages, returns=A+V)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    n, T = rewards.shape
    adv = np.zeros((n, T))
    last = np.zeros(n)
    next_value = np.asarray(bootstrap, dtype=np.float64).copy()
    for t in range(T - 1, -1, -1):
        mask = 1.0 - dones[:, t].astype(np.float64)
        delta = rewards[:, t] + gamma * next_value * mask - values[:, t]
        last = delta + gamma * lam * mask * last
        adv[:, t] = last
        next_value = values[:, t]
    return adv, adv + values


# ---------------------------------------------------------------------------


class VectorRollout:
    """Steps n envs in lockstep with shared parameters and per-env LSTM state."""

    def __init__(self, envs: list, net: PolicyValueNet, config: PPOConfig,
                 phase_seed: int):
        self.envs = envs
        self.net = net
        self.config = config
        self.phase_seed = phase_seed
        self.episode_counter = [0] * len(envs)
        self.obs = None
        self.state = net.zero_state(len(envs))
        self.episode_returns_dense = np.zeros(len(envs))
        self.episode_lengths = np.zeros(len(envs), dtype=int)
        self.finished_episodes: List[dict] = []

    def _reset_env(self, i: int):
        seed = (self.phase_seed * 1_000_003 + i * 10_007
                + self.episode_counter[i]) % (2 ** 31)
        obs, _ = self.envs[i].reset(seed=seed)
        self.episode_counter[i] += 1
        self.state.h[i] = 0.0
        self.state.c[i] = 0.0
        self.episode_returns_dense[i] = 0.0
        self.episode_lengths[i] = 0
        return obs

    def start(self):
        self.obs = np.stack([self._reset_env(i) for i in range(len(self.envs))])

    def collect(self, buffer: RolloutBuffer, rng) -> dict:
        net, cfg = self.net, self.config
        for t in range(cfg.horizon):
            buffer.obs[:, t] = self.obs
            buffer.h[:, t] = self.state.h
            buffer.c[:, t] = self.state.c
            obs_f = self.obs.astype(np.float32) / 255.0
            idx, logp, value, self.state = net.act(obs_f, self.state, rng)
            buffer.action_idx[:, t] = idx
            buffer.log_prob[:, t] = logp
            buffer.value[:, t] = value
            for i, env in enumerate(self.envs):
                obs, r, done, info = env.step(indices_to_action(idx[i]))
                buffer.reward[i, t] = r
                buffer.dense[i, t] = info.get("dense_reward", r)
                buffer.done[i, t] = done
                self.episode_returns_dense[i] += buffer.dense[i, t]
                self.episode_lengths[i] += 1
                if done:
                    self.finished_episodes.append({
                        "dense_return": float(self.episode_returns_dense[i]),
                        "length": int(self.episode_lengths[i]),
                        "terminal": info.get("terminal", "done"),
                    })
                    obs = self._reset_env(i)
                self.obs[i] = obs
        with ad.no_grad():
            obs_f = self.obs.astype(np.float32) / 255.0
            _, bootstrap, _ = net.head_probs(obs_f, self.state)
        adv, ret = compute_gae(buffer.reward, buffer.value, buffer.done,
                               bootstrap, cfg.gamma, cfg.gae_lambda)
        buffer.advantage[:] = adv
        buffer.returns[:] = ret
        return {"mean_dense": float(buffer.dense.mean())}


def ppo_update(net: PolicyValueNet, optimizer: Adam, buffer: RolloutBuffer,
               config: PPOConfig, rng) -> dict:
    """Clipped-surrogate epochs over shuffled sequence minibatches."""
    cfg = config
    L = cfg.batch
    seqs_per_env = cfg.horizon // L
    n_seq = buffer.n_envs * seqs_per_env

    adv = buffer.advantage
    adv_norm = (adv - adv.mean()) / (adv.std() + 1e-8)

    snapshot = {k: p.data.copy() for k, p in net.params.items()}
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "kl": []}
    denom = None
    for _ in range(cfg.epochs_per_iter):
        order = rng.permutation(n_seq)
        for mb in np.array_split(order, cfg.minibatches_per_epoch):
            envs_i = mb // seqs_per_env
            offs = (mb % seqs_per_env) * L
            B = len(mb)
            h = Tensor(buffer.h[envs_i, offs].astype(net.dtype))
            c = Tensor(buffer.c[envs_i, offs].astype(net.dtype))
            policy_sum = value_sum = entropy_sum = None
            kl_acc = 0.0
            for t in range(L):
                cols = offs + t
                if t > 0:
                    alive = 1.0 - buffer.done[envs_i, cols - 1].astype(net.dtype)
                    mask = Tensor(alive[:, None])
                    h = ad.mul(h, mask)
                    c = ad.mul(c, mask)
                obs = buffer.obs[envs_i, cols].astype(net.dtype) / 255.0
                logps, value, h, c = net.forward(obs, h, c)

                logp_new = None
                ent = None
                for j, lp in enumerate(logps):
                    picked = ad.gather_cols(lp, buffer.action_idx[envs_i, cols, j])
                    logp_new = picked if logp_new is None \
                        else ad.add(logp_new, picked)
                    plogp = ad.tsum(ad.mul(ad.exp(lp), lp))
                    ent = plogp if ent is None else ad.add(ent, plogp)

                logp_old = buffer.log_prob[envs_i, cols].astype(net.dtype)
                a_t = Tensor(adv_norm[envs_i, cols].astype(net.dtype))
                ratio = ad.exp(ad.add(logp_new, -logp_old))
                surr1 = ad.mul(ratio, a_t)
                surr2 = ad.mul(ad.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), a_t)
                p_term = ad.tsum(ad.minimum(surr1, surr2))
                policy_sum = p_term if policy_sum is None \
                    else ad.add(policy_sum, p_term)

                diff = ad.add(value, -buffer.returns[envs_i, cols].astype(net.dtype))
                v_term = ad.tsum(ad.mul(diff, diff))
                value_sum = v_term if value_sum is None \
                    else ad.add(value_sum, v_term)
                entropy_sum = ent if entropy_sum is None \
                    else ad.add(entropy_sum, ent)

                r = ratio.data
                kl_acc += float(np.mean(r - 1.0 - np.log(np.maximum(r, 1e-12))))

            denom = float(B * L)
            loss = ad.add(
                ad.add(ad.mul(policy_sum, -1.0 / denom),
                       ad.mul(value_sum, cfg.value_coef / denom)),
                ad.mul(entropy_sum, cfg.entropy_coef / denom))
            if not np.isfinite(loss.data):
                for k, p in net.params.items():
                    p.data = snapshot[k]
                raise UpdateAborted("non-finite loss; parameters restored")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            stats["policy_loss"].append(-float(policy_sum.data) / denom)
            stats["value_loss"].append(float(value_sum.data) / denom)
            stats["entropy"].append(-float(entropy_sum.data) / denom)
            stats["kl"].append(kl_acc / L)

    return {k: float(np.mean(v)) for k, v in stats.items()}


# ---------------------------------------------------------------------------


@dataclass
class TrainPhase:
    name: str
    make_env: Callable[[int], object]    # env index -> environment
    steps: int


@dataclass
class TrainResult:
    curve: List[dict] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)
    env_steps: int = 0
    stopped_early: bool = False


def train(net: PolicyValueNet, config: PPOConfig, phases: List[TrainPhase],
          out_dir: Optional[str] = None,
          optimizer: Optional[Adam] = None,
          stop_when: Optional[Callable[[dict], bool]] = None,
          start_phase: int = 0,
          log_every: int = 1,
          quiet: bool = True) -> TrainResult:
    """Sequential curriculum phases sharing parameters.

    Fully reproducible for a fixed config.seed: env episode seeds and the
    sampling rng derive from (seed, phase index). Checkpoints are written per
    phase; resuming restarts at the next phase boundary with identical
    results to an uninterrupted run.
    """
    optimizer = optimizer or Adam(net.params, config.lr, config.adam_beta1,
                                  config.adam_beta2, config.adam_eps)
    result = TrainResult()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        curve_path = os.path.join(out_dir, "curve.tsv")
        with open(curve_path, "w") as f:
            f.write("phase\titeration\tenv_steps\tnorm_return\tpolicy_loss"
                    "\tvalue_loss\tentropy\tkl\tepisodes\n")

    for pi in range(start_phase, len(phases)):
        phase = phases[pi]
        phase_seed = config.seed * 7919 + pi
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, pi]))
        envs = [phase.make_env(i) for i in range(config.n_envs)]
        roller = VectorRollout(envs, net, config, phase_seed)
        roller.start()
        obs_shape = roller.obs.shape[1:]
        buffer = RolloutBuffer(config.n_envs, config.horizon, obs_shape,
                               net.spec.lstm_units)
        iters = max(1, int(np.ceil(phase.steps / (config.n_envs * config.horizon))))
        stop = False
        for it in range(iters):
            roll_stats = roller.collect(buffer, rng)
            up_stats = ppo_update(net, optimizer, buffer, config, rng)
            result.env_steps += config.n_envs * config.horizon
            # Fig-6-style curve point: normalized return (dense return over
            # length, clamped) averaged over the most recent full episodes
            recent = roller.finished_episodes[-10:]
            norm_return = float(np.mean([
                normalize_return(e["dense_return"], e["length"])
                for e in recent])) if recent else None
            row = {"phase": phase.name, "iteration": it,
                   "env_steps": result.env_steps,
                   "norm_return": norm_return,
                   "rollout_dense": roll_stats["mean_dense"],
                   **up_stats,
                   "episodes": len(roller.finished_episodes)}
            result.curve.append(row)
            if out_dir:
                nr = f"{norm_return:.6f}" if norm_return is not None else "nan"
                with open(curve_path, "a") as f:
                    f.write(f"{phase.name}\t{it}\t{row['env_steps']}\t{nr}"
                            f"\t{row['policy_loss']:.6f}"
                            f"\t{row['value_loss']:.6f}"
                            f"\t{row['entropy']:.6f}\t{row['kl']:.6f}"
                            f"\t{row['episodes']}\n")
            if not quiet and it % log_every == 0:
                nr = f"{norm_return:.3f}" if norm_return is not None else "n/a"
                print(f"[{phase.name}] iter {it} steps {row['env_steps']} "
                      f"return {nr} rollout {row['rollout_dense']:.3f} "
                      f"entropy {row['entropy']:.3f}", flush=True)
            if stop_when is not None and stop_when(row):
                stop = True
                result.stopped_early = True
                break
        if out_dir:
            path = os.path.join(out_dir, f"phase_{pi}_{phase.name}.ckpt")
            save_checkpoint(path, net, optimizer_state=optimizer.state_dict(),
                            rng_state=rng.bit_generator.state,
                            extra={"phase": pi, "phase_name": phase.name,
                                   "env_steps": result.env_steps,
                                   "config": asdict(config)})
            result.checkpoints.append(path)
        if stop:
            break
    return result


def resume(path: str):
    """Load a phase checkpoint: returns (net, optimizer, extra)."""
    net, opt_state, _rng, extra = load_checkpoint(path)
    optimizer = Adam(net.params, lr=extra.get("config", {}).get("lr", 3e-4))
    if opt_state is not None:
        optimizer.load_state_dict(opt_state)
    return net, optimizer, extra
