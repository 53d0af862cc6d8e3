"""Experiment orchestration: training runs, evaluation, artifacts.

``run_experiment`` executes one config over its seed list and leaves a
self-describing directory behind: the config, a line-delimited metrics
stream per seed, checkpoints, an evaluation report per seed, and a
manifest that names every emitted file exactly once together with the
config hash it came from.  ``evaluate`` rolls a trained policy (flat
network or options bundle) over held-out networks with greedy actions.
"""

import dataclasses
import json
import os
import statistics

import numpy as np

from .. import hrl, nn, ppo
from ..env import PipeEnv
from ..pipes import PipeNetwork, generate_network
from .config import (
    ExperimentConfig,
    config_hash,
    save_config,
    serialize_config,
)

MANIFEST_FORMAT = "pipesnake-run/1"


# -- evaluation ----------------------------------------------------------------


@dataclasses.dataclass
class EvalReport:
    """Greedy-policy evaluation outcomes over a set of networks."""

    episodes: list                    # dicts: distance, success, corners, steps
    mean_distance: float = 0.0
    std_distance: float = 0.0
    success_rate: float = 0.0
    mean_corners: float = 0.0

    @classmethod
    def from_episodes(cls, episodes) -> "EvalReport":
        if not episodes:
            return cls(episodes=[])
        d = [e["distance"] for e in episodes]
        return cls(
            episodes=list(episodes),
            mean_distance=float(statistics.fmean(d)),
            std_distance=float(statistics.pstdev(d)) if len(d) > 1 else 0.0,
            success_rate=float(np.mean([e["success"] for e in episodes])),
            mean_corners=float(np.mean([e["corners"] for e in episodes])),
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        return cls(**d)


def _greedy_flat_episode(net: nn.Network, env: PipeEnv):
    obs = env.last_obs
    state = net.zero_state(1) if net.lstm is not None else None
    done = False
    while not done:
        action, state = ppo.deterministic_action(net, obs[None, :], state)
        obs, _, done, _ = env.step(action[0])


def _greedy_hrl_episode(policies: hrl.PolicySet, env: PipeEnv):
    done = False
    while not done:
        opt, _, _ = hrl.master_policy_step(policies.master, env.last_obs,
                                           deterministic=True)
        done = hrl.run_option(env, opt, policies.subs[opt],
                              deterministic=True).terminal


def evaluate(policy, networks, episodes=1, params=None, horizon=900,
             seed=0) -> EvalReport:
    """Deterministic rollouts of ``policy`` over each network.

    ``policy`` is either a flat Network or a PolicySet; its observation
    set decides what the env serves, and a mismatch between the policy's
    input width and the environment raises before anything runs.
    """
    if isinstance(policy, hrl.PolicySet):
        state_set = policy.state_set
        probe = policy.master
    elif isinstance(policy, nn.Network):
        state_set = policy.arch.variant
        probe = policy
    else:
        raise TypeError(f"cannot evaluate {type(policy).__name__}")

    rows = []
    for i, network in enumerate(networks):
        if not isinstance(network, PipeNetwork):
            raise TypeError("evaluate wants resolved PipeNetwork instances")
        env = PipeEnv(network, state_set=state_set, params=params,
                      horizon=horizon)
        if probe.arch.obs_dim != env.obs_dim:
            raise ValueError(
                f"checkpoint expects {probe.arch.obs_dim}-dim observations, "
                f"env serves {env.obs_dim}")
        for ep in range(episodes):
            env.reset(seed=seed + 7919 * i + ep)
            if isinstance(policy, hrl.PolicySet):
                _greedy_hrl_episode(policy, env)
            else:
                _greedy_flat_episode(policy, env)
            rows.append({
                "network": i,
                "episode": ep,
                "distance": env.max_distance,
                "success": bool(env.goal_reached),
                "corners": env.corners_passed(),
                "steps": env.t,
                "network_length": env.net.total_centerline_length,
            })
    report = EvalReport.from_episodes(rows)
    for row in report.episodes:
        assert row["distance"] >= 0.0
        if row["success"]:
            assert row["distance"] >= (row["network_length"]
                                       - networks[row["network"]].diameter)
    return report


def eval_networks(cfg: ExperimentConfig):
    """Held-out networks for a config: fresh draws for dynamic envs, the
    fixed layout itself for static ones."""
    if not cfg.env.dynamic:
        return [generate_network(cfg.env)]
    spec = dataclasses.replace(cfg.env, seed=cfg.eval_seed)
    return [generate_network(spec, episode_index=i)
            for i in range(cfg.eval_episodes)]


# -- training -------------------------------------------------------------------


def _metrics_line(iteration, raw) -> dict:
    """Normalize trainer output to the on-disk metrics schema."""
    if "losses" in raw:               # options trainer
        losses = raw["losses"]
        clip = losses.get("master", {}).get("clip_fraction", 0.0)
    else:                             # flat trainer
        losses = {k: raw[k] for k in
                  ("loss", "policy_loss", "value_loss", "entropy", "approx_kl")
                  if k in raw}
        clip = raw.get("clip_fraction", 0.0)
    line = {
        "iteration": iteration,
        "steps": raw.get("steps", 0),
        "mean_reward": raw.get("mean_reward", 0.0),
        "mean_length": raw.get("mean_length", 0.0),
        "losses": losses,
        "clip_fraction": clip,
    }
    if "phase" in raw:
        line["phase"] = raw["phase"]
    return line


class _MetricsWriter:
    def __init__(self, path):
        self.path = path
        self.count = 0
        self._f = open(path, "w")

    def __call__(self, raw):
        self.count += 1
        json.dump(_metrics_line(self.count, raw), self._f, sort_keys=True)
        self._f.write("\n")
        self._f.flush()

    def close(self):
        self._f.close()


def _train_env_spec(cfg: ExperimentConfig, run_seed: int):
    # distinct seeds see distinct layout streams; eval draws live far away
    return dataclasses.replace(cfg.env, seed=cfg.env.seed + 1009 * run_seed)


def _make_train_envs(cfg: ExperimentConfig, run_seed: int):
    envs = []
    for k in range(cfg.n_envs):
        spec = dataclasses.replace(_train_env_spec(cfg, run_seed),
                                   seed=cfg.env.seed + 1009 * run_seed + 97 * k)
        envs.append(PipeEnv(spec, state_set=cfg.state_set, params=cfg.robot,
                            horizon=cfg.horizon))
    return envs


def _save_policy(policy, path):
    if isinstance(policy, hrl.PolicySet):
        policy.save(path)
        return [os.path.join(path, n) for n in sorted(os.listdir(path))]
    nn.save_checkpoint(policy, path + ".ckpt")
    return [path + ".ckpt"]


def _run_seed_srl(cfg: ExperimentConfig, run_seed, seed_dir, files):
    net = nn.Network(nn.ArchSpec(variant=cfg.state_set), run_seed)
    files["initial"] = _save_policy(net, os.path.join(seed_dir, "initial"))
    if cfg.iterations == 0:
        return net, None
    envs = _make_train_envs(cfg, run_seed)
    trainer = ppo.Trainer(envs, net, cfg.ppo, seed=run_seed)
    writer = _MetricsWriter(os.path.join(seed_dir, "metrics.jsonl"))
    periodic = []
    try:
        for it in range(1, cfg.iterations + 1):
            writer(trainer.train_iteration())
            if cfg.checkpoint_every and it % cfg.checkpoint_every == 0 \
                    and it < cfg.iterations:
                periodic += _save_policy(net, os.path.join(seed_dir, f"iter_{it}"))
    finally:
        writer.close()
    files["metrics"] = writer.path
    files["periodic"] = periodic
    files["final"] = _save_policy(net, os.path.join(seed_dir, "final"))
    return net, writer


def _run_seed_hrl(cfg: ExperimentConfig, run_seed, seed_dir, files):
    regime = "pretrain" if cfg.agent == "hrl_pretrain" else "simultaneous"
    policies = hrl.build_policy_set(cfg.state_set, run_seed, regime)
    files["initial"] = _save_policy(policies, os.path.join(seed_dir, "initial"))
    if cfg.iterations == 0:
        return policies, None

    spec = _train_env_spec(cfg, run_seed)

    def env_factory():
        return PipeEnv(spec, state_set=cfg.state_set, params=cfg.robot,
                       horizon=cfg.horizon)

    writer = _MetricsWriter(os.path.join(seed_dir, "metrics.jsonl"))
    try:
        policies, _ = hrl.train_hrl(
            regime, env_factory, state_set=cfg.state_set, config=cfg.ppo,
            iterations=cfg.iterations,
            sub_iterations=cfg.sub_iterations or cfg.iterations,
            aux=cfg.aux, seed=run_seed, n_envs=cfg.n_envs,
            sub_env_kwargs={"params": cfg.robot}, log=writer)
    finally:
        writer.close()
    files["metrics"] = writer.path
    files["periodic"] = []
    files["final"] = _save_policy(policies, os.path.join(seed_dir, "final"))
    return policies, writer


def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """Train per seed, evaluate, and write the artifact tree; returns the
    manifest (also written as manifest.json)."""
    os.makedirs(out_dir, exist_ok=True)
    cfg_path = os.path.join(out_dir, "config.json")
    save_config(cfg, cfg_path)
    manifest = {
        "format": MANIFEST_FORMAT,
        "name": cfg.name,
        "config_hash": config_hash(cfg),
        "config": "config.json",
        "seeds": {},
        "files": ["config.json"],
    }

    for run_seed in cfg.seeds:
        seed_dir = os.path.join(out_dir, f"seed_{run_seed}")
        os.makedirs(seed_dir, exist_ok=True)
        files = {}
        if cfg.agent == "srl":
            policy, _ = _run_seed_srl(cfg, run_seed, seed_dir, files)
        else:
            policy, _ = _run_seed_hrl(cfg, run_seed, seed_dir, files)

        entry = {"initial": [os.path.relpath(p, out_dir) for p in files["initial"]]}
        if cfg.iterations > 0:
            report = evaluate(policy, eval_networks(cfg),
                              params=cfg.robot, horizon=cfg.horizon,
                              seed=cfg.eval_seed + run_seed)
            eval_path = os.path.join(seed_dir, "eval.json")
            with open(eval_path, "w") as f:
                json.dump({"seed": run_seed, **report.to_dict()}, f, indent=1,
                          sort_keys=True)
                f.write("\n")
            entry["metrics"] = os.path.relpath(files["metrics"], out_dir)
            entry["checkpoints"] = [os.path.relpath(p, out_dir)
                                    for p in files["periodic"] + files["final"]]
            entry["eval"] = os.path.relpath(eval_path, out_dir)
        manifest["seeds"][str(run_seed)] = entry

        flat = list(entry["initial"])
        flat += [entry["metrics"]] if "metrics" in entry else []
        flat += entry.get("checkpoints", [])
        flat += [entry["eval"]] if "eval" in entry else []
        manifest["files"].extend(flat)

    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest


def load_policy(path):
    """A checkpoint file gives a flat Network, a bundle directory a PolicySet."""
    if os.path.isdir(path):
        return hrl.PolicySet.load(path)
    return nn.load_checkpoint(path)
