"""Experiment configuration: one serializable record per training run.

A config bundles the environment distribution, observation set, agent
kind, optimizer settings, shaping weights, robot parameters, the seed
list and the iteration budget.  ``parse_config(serialize_config(c))``
returns an equal config; the canonical JSON form is what gets hashed
into run manifests.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from ..env import STATE_SETS
from ..hrl import AuxRewardConfig
from ..pipes import NetworkSpec
from ..ppo import PPOConfig
from ..robot import RobotParams

FORMAT = "pipesnake-config/1"
AGENTS = ("srl", "hrl_pretrain", "hrl_simul")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "run"
    env: NetworkSpec = field(default_factory=NetworkSpec)
    state_set: str = "kinematic"
    agent: str = "srl"
    ppo: PPOConfig = field(default_factory=PPOConfig)
    aux: AuxRewardConfig = field(default_factory=AuxRewardConfig)
    robot: RobotParams = field(default_factory=RobotParams)
    seeds: tuple = (0,)
    iterations: int = 50
    sub_iterations: int = 0       # hrl_pretrain per-skill budget; 0 means `iterations`
    horizon: int = 900
    n_envs: int = 1
    eval_episodes: int = 10
    eval_seed: int = 900_000
    checkpoint_every: int = 0     # extra checkpoints every k iterations; 0 = ends only

    def __post_init__(self):
        if self.state_set not in STATE_SETS:
            raise ValueError(f"unknown state set {self.state_set!r}")
        if self.agent not in AGENTS:
            raise ValueError(f"agent must be one of {AGENTS}, got {self.agent!r}")
        if self.iterations < 0 or self.sub_iterations < 0:
            raise ValueError("iteration budgets must be >= 0")
        if not self.seeds:
            raise ValueError("need at least one seed")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


def _tuplify(x):
    if isinstance(x, list):
        return tuple(_tuplify(v) for v in x)
    return x


def serialize_config(cfg: ExperimentConfig) -> dict:
    out = {"format": FORMAT}
    out.update(dataclasses.asdict(cfg))
    return out


def parse_config(data) -> ExperimentConfig:
    """Inverse of serialize_config; accepts a dict or a JSON string."""
    if isinstance(data, (str, bytes)):
        data = json.loads(data)
    d = {k: v for k, v in data.items() if k != "format"}
    try:
        d["env"] = NetworkSpec(**{k: _tuplify(v) for k, v in d["env"].items()})
        d["ppo"] = PPOConfig(**d["ppo"])
        d["aux"] = AuxRewardConfig(**{k: _tuplify(v) for k, v in d["aux"].items()})
        d["robot"] = RobotParams(**{k: _tuplify(v) for k, v in d["robot"].items()})
        d["seeds"] = tuple(d["seeds"])
        return ExperimentConfig(**d)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed experiment config: {exc}") from exc


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(serialize_config(cfg), sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        return parse_config(json.load(f))


def save_config(cfg: ExperimentConfig, path):
    with open(path, "w") as f:
        json.dump(serialize_config(cfg), f, indent=1, sort_keys=True)
        f.write("\n")
