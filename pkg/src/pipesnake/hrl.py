"""Options layer: a discrete selector over three locomotion skills.

A Master policy picks one of three sub-policies (clamped driving, folding
into a bend, re-clamping after one); the chosen sub-policy drives the
robot for up to 30 steps under its own actuation mask, then control
returns to the Master.  At the Master level each burst is one temporally
extended action: its reward is the undiscounted sum of environment
rewards inside the burst and its advantage estimate discounts across
bursts by gamma**duration.  Sub-policies may additionally earn small
shaping terms (clamping, camera orientation) that the Master never sees.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import os

import numpy as np

from . import nn, ppo
from .env import ClampDriveEnv, EnterTurnEnv, ExitTurnEnv, PipeEnv
from .robot import (
    POSITION,
    VELOCITY,
    ActuationModes,
    RobotParams,
    clamp_metric,
)
from .sensing import camera_alignment

MAX_OPTION_STEPS = 30


class OptionId(enum.IntEnum):
    CLAMP_DRIVE = 0
    ENTER_TURN = 1
    EXIT_TURN = 2


OPTION_MODES = {
    OptionId.CLAMP_DRIVE: ActuationModes(
        joint_modes=(VELOCITY, VELOCITY, POSITION, VELOCITY, VELOCITY, POSITION),
        wheel_mask=(True, True, True, True, True, True)),
    OptionId.ENTER_TURN: ActuationModes(
        joint_modes=(VELOCITY, POSITION, POSITION, POSITION, POSITION, POSITION),
        wheel_mask=(True, True, True, False, False, False)),
    OptionId.EXIT_TURN: ActuationModes(
        joint_modes=(POSITION, POSITION, POSITION, POSITION, VELOCITY, POSITION),
        wheel_mask=(False, False, False, True, True, True)),
}

# env classes used to pretrain each skill in isolation
SKILL_ENVS = {
    OptionId.CLAMP_DRIVE: ClampDriveEnv,
    OptionId.ENTER_TURN: EnterTurnEnv,
    OptionId.EXIT_TURN: ExitTurnEnv,
}


def mask_action(option: OptionId, raw: np.ndarray) -> np.ndarray:
    """Zero the wheel channels the option's mask disables."""
    a = np.array(raw, dtype=float, copy=True)
    mask = OPTION_MODES[OptionId(option)].wheel_mask
    for w, on in enumerate(mask):
        if not on:
            a[6 + w] = 0.0
    return a


@dataclasses.dataclass(frozen=True)
class AuxRewardConfig:
    """Shaping weights for the sub-policies, indexed by OptionId."""
    clamp_weight: float = 0.1
    camera_weight: float = 0.05
    clamp_sections: tuple = (("front", "rear"), ("rear",), ("rear",))
    camera_enabled: tuple = (True, True, True)

    def __post_init__(self):
        if self.clamp_weight < 0 or self.camera_weight < 0:
            raise ValueError("aux weights must be >= 0")
        if len(self.clamp_sections) != 3 or len(self.camera_enabled) != 3:
            raise ValueError("per-option tables must have 3 entries")


def auxiliary_reward(option: OptionId, state, net, params,
                     cfg: AuxRewardConfig) -> float:
    """Clamp + camera shaping for one sub-policy step; never paid upward."""
    option = OptionId(option)
    total = 0.0
    sections = cfg.clamp_sections[option]
    if sections and cfg.clamp_weight > 0.0:
        c = np.mean([clamp_metric(state, net, params, s) for s in sections])
        total += cfg.clamp_weight * float(c)
    if cfg.camera_enabled[option] and cfg.camera_weight > 0.0:
        total += cfg.camera_weight * max(0.0, camera_alignment(state, net))
    return total


@dataclasses.dataclass
class SMDPTransition:
    obs: np.ndarray              # master observation at option start
    option: int
    log_prob: float
    value: float
    reward: float                # undiscounted env-reward sum inside the burst
    duration: int
    next_obs: np.ndarray
    terminal: bool               # episode ended inside the burst


def master_policy_step(master: nn.Network, obs: np.ndarray, rng=None,
                       deterministic=False):
    """One Master decision; returns (option, log_prob, value)."""
    logits, value, _ = master.forward(obs[None, :])
    master.drop_tape()
    if deterministic:
        opt = int(np.argmax(logits[0]))
    else:
        opt = int(ppo.sample_categorical(rng, logits)[0])
    logp = float(ppo.categorical_log_prob(logits, np.array([opt]))[0])
    return OptionId(opt), logp, float(value[0])


def _sub_act(sub: nn.Network, obs, rng, deterministic):
    pol, val, _ = sub.forward(obs[None, :])
    sub.drop_tape()
    mean = pol[0]
    if deterministic:
        return mean, 0.0, float(val[0])
    log_std = sub.clipped_log_std()
    action = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    logp = float(ppo.gaussian_log_prob(pol, log_std, action[None, :])[0])
    return action, logp, float(val[0])


def run_option(env: PipeEnv, option: OptionId, sub: nn.Network, rng=None,
               max_steps=MAX_OPTION_STEPS, aux_cfg: AuxRewardConfig = None,
               deterministic=False, collect=None) -> SMDPTransition:
    """Drive the env with one sub-policy until handback or episode end.

    ``collect(obs, action, log_prob, value, sub_reward, done)`` receives the
    per-step stream for the sub-policy's own training; sub_reward includes
    the shaping terms, the returned transition's reward never does.
    """
    option = OptionId(option)
    obs0 = env.last_obs
    obs = obs0
    total = 0.0
    terminal = False
    duration = 0
    for _ in range(max_steps):
        action, logp, value = _sub_act(sub, obs, rng, deterministic)
        next_obs, r, done, info = env.step(mask_action(option, action),
                                           modes=OPTION_MODES[option])
        total += r
        duration += 1
        if collect is not None:
            sub_r = r
            if aux_cfg is not None:
                sub_r += auxiliary_reward(option, env.state, env.net,
                                          env.params, aux_cfg)
            collect(obs, action, logp, value, sub_r, done)
        obs = next_obs
        if done:
            terminal = True
            break
    return SMDPTransition(obs=obs0, option=int(option), log_prob=0.0,
                          value=0.0, reward=total, duration=duration,
                          next_obs=obs, terminal=terminal)


# -- policy bundles -----------------------------------------------------------

_BUNDLE_META = "policyset.json"
_CKPT_NAMES = {
    OptionId.CLAMP_DRIVE: "clamp_drive.ckpt",
    OptionId.ENTER_TURN: "enter_turn.ckpt",
    OptionId.EXIT_TURN: "exit_turn.ckpt",
}


@dataclasses.dataclass
class PolicySet:
    """Master + three sub-policies plus the metadata to rebuild them."""
    master: nn.Network
    subs: dict
    state_set: str = "kinematic"
    regime: str = "pretrain"

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        nn.save_checkpoint(self.master, os.path.join(directory, "master.ckpt"))
        for opt, net in self.subs.items():
            nn.save_checkpoint(net, os.path.join(directory,
                                                 _CKPT_NAMES[OptionId(opt)]))
        meta = {
            "state_set": self.state_set,
            "regime": self.regime,
            "options": {str(int(o)): o.name for o in OptionId},
            "masks": {o.name: {
                "joint_modes": list(OPTION_MODES[o].joint_modes),
                "wheel_mask": list(OPTION_MODES[o].wheel_mask),
            } for o in OptionId},
        }
        with open(os.path.join(directory, _BUNDLE_META), "w") as f:
            json.dump(meta, f, indent=1)

    @classmethod
    def load(cls, directory) -> "PolicySet":
        with open(os.path.join(directory, _BUNDLE_META)) as f:
            meta = json.load(f)
        master = nn.load_checkpoint(os.path.join(directory, "master.ckpt"))
        subs = {opt: nn.load_checkpoint(os.path.join(directory, name))
                for opt, name in _CKPT_NAMES.items()}
        return cls(master=master, subs=subs, state_set=meta["state_set"],
                   regime=meta["regime"])


def build_policy_set(state_set="kinematic", seed=0, regime="pretrain") -> PolicySet:
    if state_set == nn.VISUAL_RECURRENT:
        raise ValueError("the options layer runs feedforward policies only")
    master = nn.Network(nn.ArchSpec(variant=state_set, action_dim=3,
                                    discrete=True), seed)
    subs = {opt: nn.Network(nn.ArchSpec(variant=state_set), seed + 1 + int(opt))
            for opt in OptionId}
    return PolicySet(master=master, subs=subs, state_set=state_set,
                     regime=regime)


# -- training -------------------------------------------------------------------

class HRLTrainer:
    """Collects option-segmented experience on full networks and updates
    the Master (always) and the sub-policies (simultaneous regime only)."""

    def __init__(self, env: PipeEnv, policies: PolicySet, config: ppo.PPOConfig,
                 aux: AuxRewardConfig = None, seed=0, train_subs=True,
                 deterministic_subs=False):
        self.env = env
        self.policies = policies
        self.config = config
        self.aux = aux if aux is not None else AuxRewardConfig()
        self.rng = np.random.default_rng(seed)
        self.train_subs = train_subs
        self.deterministic_subs = deterministic_subs
        self.master_opt = nn.Adam(policies.master, config.lr)
        self.sub_opts = {opt: nn.Adam(net, config.lr)
                         for opt, net in policies.subs.items()}
        self._seed_counter = seed
        self._ep_ret = 0.0
        self._ep_len = 0
        self._recent_episodes = []
        self._needs_reset = True
        self.total_steps = 0
        self.iteration = 0

    def _next_seed(self):
        self._seed_counter += 1
        return self._seed_counter

    # one option burst, recording both levels
    def _burst(self, sub_batches):
        opt, logp, value = master_policy_step(self.policies.master,
                                              self.env.last_obs, self.rng)
        seg = {"obs": [], "actions": [], "logp": [], "values": [],
               "rewards": []}

        def collect(obs, action, alogp, avalue, r, done):
            seg["obs"].append(obs)
            seg["actions"].append(action)
            seg["logp"].append(alogp)
            seg["values"].append(avalue)
            seg["rewards"].append(r)

        tr = run_option(self.env, opt, self.policies.subs[opt], self.rng,
                        aux_cfg=self.aux if self.train_subs else None,
                        deterministic=self.deterministic_subs,
                        collect=collect if self.train_subs else None)
        tr.log_prob = logp
        tr.value = value
        if self.train_subs:
            sub = self.policies.subs[opt]
            if tr.terminal:
                boot = 0.0
            else:
                _, v, _ = sub.forward(tr.next_obs[None, :])
                sub.drop_tape()
                boot = float(v[0])
            seg["bootstrap"] = boot
            seg["terminal"] = tr.terminal
            sub_batches[opt].append(seg)
        return tr

    def _collect(self):
        cfg = self.config
        master_stream = []
        sub_batches = {opt: [] for opt in OptionId}
        steps = 0
        while steps < cfg.train_batch:
            if self._needs_reset:
                self.env.reset(seed=self._next_seed())
                self._needs_reset = False
            tr = self._burst(sub_batches)
            master_stream.append(tr)
            steps += tr.duration
            self._ep_ret += tr.reward
            self._ep_len += tr.duration
            if tr.terminal:
                self._recent_episodes.append((self._ep_ret, self._ep_len))
                self._ep_ret = 0.0
                self._ep_len = 0
                self._needs_reset = True
        self.total_steps += steps
        return master_stream, sub_batches, steps

    def _master_update(self, stream):
        rewards = np.array([t.reward for t in stream])
        values = np.array([t.value for t in stream])
        dones = np.array([t.terminal for t in stream])
        durations = np.array([t.duration for t in stream], dtype=float)
        if dones[-1]:
            last_value = 0.0
        else:
            _, v, _ = self.policies.master.forward(stream[-1].next_obs[None, :])
            self.policies.master.drop_tape()
            last_value = float(v[0])
        adv, ret = ppo.gae(rewards, values, dones, self.config.gamma,
                           self.config.gae_lambda, last_value,
                           durations=durations)
        adv = ppo.normalize_advantages(adv)
        obs = np.stack([t.obs for t in stream])
        actions = np.array([t.option for t in stream])
        logp = np.array([t.log_prob for t in stream])
        return ppo.ppo_update(self.policies.master, self.master_opt, obs,
                              actions, logp, adv, ret, self.config, self.rng)

    def _sub_update(self, opt, segments):
        cfg = self.config
        obs, actions, logp, adv, ret = [], [], [], [], []
        for seg in segments:
            r = np.asarray(seg["rewards"])
            v = np.asarray(seg["values"])
            d = np.zeros(len(r), dtype=bool)
            d[-1] = seg["terminal"]
            a, g = ppo.gae(r, v, d, cfg.gamma, cfg.gae_lambda,
                           seg["bootstrap"])
            obs.append(np.asarray(seg["obs"]))
            actions.append(np.asarray(seg["actions"]))
            logp.append(np.asarray(seg["logp"]))
            adv.append(a)
            ret.append(g)
        adv = ppo.normalize_advantages(np.concatenate(adv))
        return ppo.ppo_update(self.policies.subs[opt], self.sub_opts[opt],
                              np.concatenate(obs), np.concatenate(actions),
                              np.concatenate(logp), adv, np.concatenate(ret),
                              cfg, self.rng)

    def train_iteration(self):
        stream, sub_batches, steps = self._collect()
        losses = {"master": self._master_update(stream)}
        if self.train_subs:
            for opt in OptionId:
                n = sum(len(s["rewards"]) for s in sub_batches[opt])
                if n >= self.config.minibatch:
                    losses[opt.name.lower()] = self._sub_update(
                        opt, sub_batches[opt])
        self.iteration += 1
        recent = self._recent_episodes[-20:]
        self._recent_episodes = recent
        metrics = {
            "iteration": self.iteration,
            "steps": steps,
            "decisions": len(stream),
            "mean_reward": float(np.mean([r for r, _ in recent])) if recent else 0.0,
            "mean_length": float(np.mean([l for _, l in recent])) if recent else 0.0,
            "losses": losses,
        }
        return metrics


def pretrain_sub(option: OptionId, state_set, config: ppo.PPOConfig,
                 iterations, seed=0, aux: AuxRewardConfig = None,
                 n_envs=1, env_kwargs=None, net=None, log=None):
    """PPO on one skill in its specialized environment; returns (net, metrics)."""
    option = OptionId(option)
    aux = aux if aux is not None else AuxRewardConfig()
    env_kwargs = dict(env_kwargs or {})
    env_kwargs.setdefault("state_set", state_set)
    env_kwargs.setdefault("modes", OPTION_MODES[option])
    params = env_kwargs.get("params") or RobotParams()
    env_kwargs["params"] = params

    def extra(state, net_):
        return auxiliary_reward(option, state, net_, params, aux)

    envs = []
    for k in range(n_envs):
        kw = dict(env_kwargs)
        kw["geometry_seed"] = kw.get("geometry_seed", 0) + 1000 * k + seed
        envs.append(SKILL_ENVS[option](extra_reward=extra, **kw))
    if net is None:
        net = nn.Network(nn.ArchSpec(variant=state_set), seed)
    trainer = ppo.Trainer(envs, net, config, seed=seed)
    history = []
    for _ in range(iterations):
        m = trainer.train_iteration()
        history.append(m)
        if log is not None:
            log(m)
    return net, history


def train_hrl(regime, env_factory, state_set="kinematic",
              config: ppo.PPOConfig = None, iterations=50,
              sub_iterations=50, aux: AuxRewardConfig = None, seed=0,
              n_envs=1, sub_env_kwargs=None, log=None):
    """Train a PolicySet under one of the two regimes.

    pretrain: each sub-policy learns its skill in isolation, then the subs
    freeze and only the Master trains on full networks. simultaneous: all
    four policies update from the same full-network run, each sub on the
    steps gathered while it was the active option.
    """
    if regime not in ("pretrain", "simultaneous"):
        raise ValueError(f"unknown regime {regime!r}")
    config = config or ppo.PPOConfig()
    policies = build_policy_set(state_set, seed, regime)
    history = {"regime": regime, "subs": {}, "master": []}

    if regime == "pretrain":
        for opt in OptionId:
            sub_log = None
            if log is not None:
                tag = "pretrain:" + opt.name.lower()
                sub_log = lambda m, _t=tag: log(dict(m, phase=_t))
            net, h = pretrain_sub(opt, state_set, config, sub_iterations,
                                  seed=seed + int(opt), aux=aux,
                                  n_envs=n_envs, env_kwargs=sub_env_kwargs,
                                  net=policies.subs[opt], log=sub_log)
            history["subs"][opt.name.lower()] = h

    env = env_factory()
    trainer = HRLTrainer(env, policies, config, aux=aux, seed=seed,
                         train_subs=(regime == "simultaneous"),
                         deterministic_subs=(regime == "pretrain"))
    phase = "master" if regime == "pretrain" else "joint"
    for _ in range(iterations):
        m = trainer.train_iteration()
        history["master"].append(m)
        if log is not None:
            log(dict(m, phase=phase))
    return policies, history


def evaluate_hrl(policies: PolicySet, env: PipeEnv, episodes=10, seed=0):
    """Greedy rollouts (argmax Master, mean sub actions); returns infos."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(episodes):
        env.reset(seed=int(rng.integers(2 ** 31)))
        d0 = env.head_distance()
        done = False
        while not done:
            opt, _, _ = master_policy_step(policies.master, env.last_obs,
                                           deterministic=True)
            done = run_option(env, opt, policies.subs[opt],
                              deterministic=True).terminal
        out.append({
            "distance": env.max_distance,
            "net_progress": env.head_distance() - d0,
            "goal": env.goal_reached,
            "steps": env.t,
            "corners_passed": env.corners_passed(),
        })
    return out
