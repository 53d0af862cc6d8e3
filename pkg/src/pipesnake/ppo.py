"""Clipped-surrogate policy optimization.

Synchronous rollout collection over N env instances, lambda-weighted
advantage estimation with optional per-step discount exponents (so
option-level transitions that span several env steps discount correctly),
and minibatched Adam updates of a shared policy/value network.  Gradients
of the surrogate are computed analytically against the network's tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PPOConfig:
    lr: float = 1e-5
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.99
    entropy_coef: float = 0.005
    value_coef: float = 0.5
    train_batch: int = 1000
    minibatch: int = 300
    epochs: int = 10
    max_grad_norm: float = 0.5
    bptt_len: int = 30

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must be in (0, 1)")
        if not (0.0 <= self.gae_lambda <= 1.0 and 0.0 <= self.gamma <= 1.0):
            raise ValueError("gamma and gae_lambda must be in [0, 1]")
        if self.minibatch > self.train_batch:
            raise ValueError("minibatch cannot exceed train_batch")


# -- distributions ---------------------------------------------------------


def gaussian_log_prob(mean, log_std, actions):
    """Sum of per-dim diagonal Gaussian log densities, shape (B,)."""
    z = (actions - mean) * np.exp(-log_std)
    return -0.5 * ((z * z).sum(axis=-1)
                   + actions.shape[-1] * _LOG_2PI) - log_std.sum()


def gaussian_entropy(log_std):
    return float(log_std.sum() + 0.5 * log_std.size * (1.0 + _LOG_2PI))


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

def softmax(logits):
    return np.exp(log_softmax(logits))


def categorical_log_prob(logits, actions):
    return log_softmax(logits)[np.arange(len(actions)), actions]


def categorical_entropy(logits):
    logp = log_softmax(logits)
    return -(np.exp(logp) * logp).sum(axis=-1)


def sample_categorical(rng, logits):
    p = softmax(logits)
    u = rng.random((p.shape[0], 1))
    idx = (p.cumsum(axis=-1) < u).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


# -- advantage estimation --------------------------------------------------


def gae(rewards, values, dones, gamma, lam, last_value=0.0, durations=None):
    """Lambda-weighted advantages over one stream.

    ``durations`` holds per-step discount exponents; a step that spans k
    env steps discounts the tail by gamma**k.  Returns (advantages,
    returns) with returns = advantages + values.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    t_len = len(rewards)
    if len(values) != t_len or len(dones) != t_len:
        raise ValueError("rewards, values and dones must have equal length")
    if durations is None:
        disc = np.full(t_len, gamma)
    else:
        durations = np.asarray(durations)
        if len(durations) != t_len:
            raise ValueError("durations length mismatch")
        disc = gamma ** durations
    adv = np.zeros(t_len)
    carry = 0.0
    next_value = last_value
    for t in range(t_len - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + disc[t] * next_value * live - values[t]
        carry = delta + disc[t] * lam * live * carry
        adv[t] = carry
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv):
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# -- losses ----------------------------------------------------------------


def clipped_surrogate(ratio, adv, clip_eps):
    """Per-sample min(ratio*adv, clip(ratio)*adv)."""
    ratio = np.asarray(ratio, dtype=float)
    adv = np.asarray(adv, dtype=float)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)


def ppo_loss(new_log_probs, old_log_probs, advantages, values, returns,
             entropies, config):
    """Scalar PPO objective plus diagnostics.

    Returns (loss, metrics) where metrics carries policy/value/entropy
    components, clip fraction and a KL estimate.  Raises on non-finite
    intermediates so a poisoned batch aborts the iteration loudly.
    """
    ratio = np.exp(np.asarray(new_log_probs) - np.asarray(old_log_probs))
    if not (np.isfinite(ratio).all() and np.isfinite(np.asarray(values)).all()
            and np.isfinite(np.asarray(advantages)).all()):
        raise RuntimeError("non-finite intermediates in PPO loss")
    surr = clipped_surrogate(ratio, advantages, config.clip_eps)
    policy_loss = -float(surr.mean())
    value_loss = float(((values - returns) ** 2).mean())
    entropy = float(np.mean(entropies))
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    if not math.isfinite(loss):
        raise RuntimeError("non-finite PPO loss "
                           f"(policy {policy_loss}, value {value_loss}, entropy {entropy})")
    metrics = {
        "loss": loss,
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_fraction": float((np.abs(ratio - 1.0) > config.clip_eps).mean()),
        "approx_kl": float(((ratio - 1.0) - np.log(ratio)).mean()),
    }
    return loss, metrics


def _surrogate_grads(ratio, adv, values, returns, clip_eps, value_coef, n_total):
    """d loss / d new_log_prob and d loss / d value, per sample.

    The clipped branch has zero derivative, so gradient flows only where
    the unclipped term attains the min (includes the in-band tie).
    """
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    active = (ratio * adv) <= (clipped * adv)
    g_logp = -(adv * ratio * active) / n_total
    g_value = value_coef * 2.0 * (values - returns) / n_total
    return g_logp, g_value


# -- trainer ---------------------------------------------------------------


class RolloutBuffer:
    """Per-phase storage, one row per synchronous step of all envs."""

    def __init__(self):
        self.obs = []
        self.actions = []
        self.log_probs = []
        self.rewards = []
        self.values = []
        self.dones = []
        self.states = []          # recurrent (h, c) snapshots taken before the step
        self.advantages = None
        self.returns = None

    def add(self, obs, action, log_prob, reward, value, done, state=None):
        self.obs.append(obs)
        self.actions.append(action)
        self.log_probs.append(log_prob)
        self.rewards.append(reward)
        self.values.append(value)
        self.dones.append(done)
        self.states.append(state)

    def __len__(self):
        return len(self.obs) * (len(self.obs[0]) if self.obs else 0)

    def finalize(self, last_values, gamma, lam):
        """Compute per-stream advantages; arrays become (T, n_envs)."""
        rewards = np.asarray(self.rewards, dtype=float)
        values = np.asarray(self.values, dtype=float)
        dones = np.asarray(self.dones, dtype=bool)
        t_len, n_envs = rewards.shape
        self.advantages = np.zeros((t_len, n_envs))
        self.returns = np.zeros((t_len, n_envs))
        for e in range(n_envs):
            adv, ret = gae(rewards[:, e], values[:, e], dones[:, e],
                           gamma, lam, last_value=last_values[e])
            self.advantages[:, e] = adv
            self.returns[:, e] = ret


class Trainer:
    """Owns envs, policy and optimizer state across training iterations.

    Envs follow reset(seed)->obs, step(action)->(obs, reward, done, info).
    Episodes continue across train batches; mid-episode truncation at the
    batch boundary bootstraps from the value head.
    """

    def __init__(self, envs, net, config: PPOConfig, seed=0):
        self.envs = list(envs) if isinstance(envs, (list, tuple)) else [envs]
        if config.train_batch % len(self.envs) != 0:
            raise ValueError("train_batch must divide evenly across envs")
        self.net = net
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.opt = nn.Adam(net, config.lr)
        self.discrete = net.arch.discrete
        self.recurrent = net.lstm is not None
        self._seed_counter = seed
        self.obs = np.stack([env.reset(seed=self._next_seed()) for env in self.envs])
        self.state = net.zero_state(len(self.envs)) if self.recurrent else None
        self._ep_ret = np.zeros(len(self.envs))
        self._ep_len = np.zeros(len(self.envs), dtype=int)
        self._recent_episodes = []
        self.total_steps = 0

    def _next_seed(self):
        self._seed_counter += 1
        return self._seed_counter

    # -- acting -------------------------------------------------------------

    def _act(self, obs, state):
        pol, val, new_state = self.net.forward(obs, state)
        self.net.drop_tape()
        if self.discrete:
            actions = sample_categorical(self.rng, pol)
            logp = categorical_log_prob(pol, actions)
        else:
            std = np.exp(self.net.clipped_log_std())
            actions = pol + std * self.rng.standard_normal(pol.shape)
            logp = gaussian_log_prob(pol, self.net.clipped_log_std(), actions)
        return actions, logp, val, new_state

    # -- collection ----------------------------------------------------------

    def _collect(self):
        cfg = self.config
        n_envs = len(self.envs)
        horizon = cfg.train_batch // n_envs
        buf = RolloutBuffer()
        for _ in range(horizon):
            state_snapshot = None
            if self.recurrent:
                state_snapshot = (self.state[0].copy(), self.state[1].copy())
            actions, logp, values, new_state = self._act(self.obs, self.state)
            next_obs = np.empty_like(self.obs)
            rewards = np.zeros(n_envs)
            dones = np.zeros(n_envs, dtype=bool)
            for e, env in enumerate(self.envs):
                obs_e, r, done, _ = env.step(actions[e])
                rewards[e] = r
                dones[e] = done
                self._ep_ret[e] += r
                self._ep_len[e] += 1
                if done:
                    self._recent_episodes.append((self._ep_ret[e], self._ep_len[e]))
                    self._ep_ret[e] = 0.0
                    self._ep_len[e] = 0
                    obs_e = env.reset(seed=self._next_seed())
                    if self.recurrent:
                        z = self.net.zero_state(1)
                        new_state[0][e] = z[0][0]
                        new_state[1][e] = z[1][0]
                next_obs[e] = obs_e
            buf.add(self.obs.copy(), actions, logp, rewards, values, dones,
                    state_snapshot)
            self.obs = next_obs
            if self.recurrent:
                self.state = new_state
        _, last_values, _ = self.net.forward(self.obs, self.state)
        self.net.drop_tape()
        last_values = np.where(np.asarray(buf.dones[-1]), 0.0, last_values)
        buf.finalize(last_values, cfg.gamma, cfg.gae_lambda)
        self.total_steps += cfg.train_batch
        return buf

    # -- updates --------------------------------------------------------------

    def train_iteration(self):
        """One collect + optimize cycle; returns a metrics dict."""
        cfg = self.config
        buf = self._collect()
        adv_flat = normalize_advantages(buf.advantages.reshape(-1))
        buf.advantages = adv_flat.reshape(buf.advantages.shape)
        if self.recurrent:
            update_metrics = self._update_recurrent(buf)
        else:
            t_len, n_envs = np.asarray(buf.rewards).shape
            obs = np.asarray(buf.obs).reshape(t_len * n_envs, -1)
            actions = np.asarray(buf.actions).reshape(t_len * n_envs, -1)
            if self.discrete:
                actions = np.asarray(buf.actions).reshape(-1)
            update_metrics = ppo_update(
                self.net, self.opt, obs, actions,
                np.asarray(buf.log_probs).reshape(-1),
                buf.advantages.reshape(-1), buf.returns.reshape(-1),
                cfg, self.rng)
        recent = self._recent_episodes[-20:]
        self._recent_episodes = recent
        metrics = {
            "steps": self.total_steps,
            "mean_reward": float(np.mean([r for r, _ in recent])) if recent else 0.0,
            "mean_length": float(np.mean([l for _, l in recent])) if recent else 0.0,
            **update_metrics,
        }
        return metrics

    def _update_recurrent(self, buf):
        cfg = self.config
        obs = np.asarray(buf.obs)            # (T, n, D)
        actions = np.asarray(buf.actions)
        old_logp = np.asarray(buf.log_probs)
        dones = np.asarray(buf.dones, dtype=bool)
        t_len, n_envs = dones.shape
        segments = []
        for e in range(n_envs):
            start = 0
            for t in range(t_len):
                end_here = dones[t, e] or (t - start + 1) >= cfg.bptt_len or t == t_len - 1
                if end_here:
                    segments.append((e, start, t + 1))
                    start = t + 1
        all_metrics = []
        for _ in range(cfg.epochs):
            order = self.rng.permutation(len(segments))
            group = []
            count = 0
            for gi in order:
                group.append(segments[gi])
                count += segments[gi][2] - segments[gi][1]
                if count >= cfg.minibatch:
                    all_metrics.append(self._apply_segments(buf, obs, actions, old_logp, group))
                    group = []
                    count = 0
            if group:
                all_metrics.append(self._apply_segments(buf, obs, actions, old_logp, group))
        return _mean_metrics(all_metrics)

    def _apply_segments(self, buf, obs, actions, old_logp, group):
        cfg = self.config
        n_total = sum(t1 - t0 for _, t0, t1 in group)
        self.net.begin()
        mb_new_logp, mb_old_logp, mb_adv = [], [], []
        mb_values, mb_returns, mb_ent = [], [], []
        for e, t0, t1 in group:
            h0, c0 = buf.states[t0]
            state = (h0[e:e + 1].copy(), c0[e:e + 1].copy())
            upstream = []
            for t in range(t0, t1):
                pol, val, state = self.net.forward(obs[t, e][None], state)
                a = actions[t, e][None]
                log_std = self.net.clipped_log_std()
                new_lp = gaussian_log_prob(pol, log_std, a)
                ratio = np.exp(new_lp - old_logp[t, e])
                g_logp, g_val = _surrogate_grads(
                    ratio, buf.advantages[t, e], val, buf.returns[t, e],
                    cfg.clip_eps, cfg.value_coef, n_total)
                g_mean = g_logp[:, None] * (a - pol) * np.exp(-2.0 * log_std)
                self.net.g_log_std += (g_logp[:, None]
                                       * (((a - pol) * np.exp(-log_std)) ** 2 - 1.0)).sum(axis=0)
                upstream.append((g_mean, g_val))
                mb_new_logp.append(new_lp[0])
                mb_old_logp.append(old_logp[t, e])
                mb_adv.append(buf.advantages[t, e])
                mb_values.append(val[0])
                mb_returns.append(buf.returns[t, e])
            self.net.backward(upstream)
        self.net.g_log_std += -cfg.entropy_coef * np.ones_like(self.net.g_log_std)
        mb_ent = gaussian_entropy(self.net.clipped_log_std())
        loss, metrics = ppo_loss(np.asarray(mb_new_logp), np.asarray(mb_old_logp),
                                 np.asarray(mb_adv), np.asarray(mb_values),
                                 np.asarray(mb_returns), mb_ent, cfg)
        self.opt.step(cfg.max_grad_norm)
        return metrics


def ppo_update(net, opt, obs, actions, old_logp, advantages, returns, config, rng):
    """Epochs x minibatches of clipped-surrogate updates on flat arrays."""
    n = len(obs)
    all_metrics = []
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch):
            mb = perm[start:start + config.minibatch]
            all_metrics.append(_minibatch_update(
                net, opt, obs[mb], actions[mb], old_logp[mb],
                advantages[mb], returns[mb], config))
    return _mean_metrics(all_metrics)


def compute_loss_and_grads(net, obs, actions, old_logp, adv, returns, config):
    """Forward the minibatch, leave loss gradients in the net, return metrics."""
    n = len(obs)
    net.begin()
    pol, values, _ = net.forward(obs)
    if net.arch.discrete:
        new_logp = categorical_log_prob(pol, actions)
        entropies = categorical_entropy(pol)
    else:
        log_std = net.clipped_log_std()
        new_logp = gaussian_log_prob(pol, log_std, actions)
        entropies = np.full(n, gaussian_entropy(log_std))
    ratio = np.exp(new_logp - old_logp)
    g_logp, g_val = _surrogate_grads(ratio, adv, values, returns,
                                     config.clip_eps, config.value_coef, n)
    if net.arch.discrete:
        p = softmax(pol)
        onehot = np.zeros_like(p)
        onehot[np.arange(n), actions] = 1.0
        g_pol = g_logp[:, None] * (onehot - p)
        logp_full = log_softmax(pol)
        g_pol += config.entropy_coef / n * p * (logp_full + entropies[:, None])
    else:
        inv_var = np.exp(-2.0 * log_std)
        g_pol = g_logp[:, None] * (actions - pol) * inv_var
        net.g_log_std += (g_logp[:, None]
                          * (((actions - pol) * np.exp(-log_std)) ** 2 - 1.0)).sum(axis=0)
        net.g_log_std += -config.entropy_coef
    net.backward([(g_pol, g_val)])
    return ppo_loss(new_logp, old_logp, adv, values, returns, entropies, config)


def _minibatch_update(net, opt, obs, actions, old_logp, adv, returns, config):
    _, metrics = compute_loss_and_grads(net, obs, actions, old_logp, adv,
                                        returns, config)
    opt.step(config.max_grad_norm)
    return metrics


def _mean_metrics(metric_dicts):
    if not metric_dicts:
        return {}
    keys = metric_dicts[0].keys()
    return {k: float(np.mean([m[k] for m in metric_dicts])) for k in keys}


def deterministic_action(net, obs, state=None):
    """Greedy action (Gaussian mean or argmax logits) for evaluation."""
    pol, _, new_state = net.forward(obs, state)
    net.drop_tape()
    if net.arch.discrete:
        return pol.argmax(axis=-1), new_state
    return pol, new_state
