"""Command line entry point.

Subcommands: train, eval, gen-pipes, gradcheck, teleop-serve, replay.
``train`` assembles an ExperimentConfig from an optional JSON config file
plus flag overrides (flags win), runs it, and prints the manifest path.
"""

import argparse
import dataclasses
import json
import os
import sys

from .. import nn, pipes
from ..env import PipeEnv
from . import config as cfgmod
from . import experiment, teleop


def _parse_seeds(text):
    return tuple(int(v) for v in text.split(",") if v.strip() != "")


def _build_train_config(args) -> cfgmod.ExperimentConfig:
    if args.config:
        cfg = cfgmod.load_config(args.config)
    else:
        cfg = cfgmod.ExperimentConfig()
    over = {}
    if args.name is not None:
        over["name"] = args.name
    if args.agent is not None:
        over["agent"] = args.agent
    if args.state_set is not None:
        over["state_set"] = args.state_set
    if args.seeds is not None:
        over["seeds"] = _parse_seeds(args.seeds)
    if args.iterations is not None:
        over["iterations"] = args.iterations
    if args.sub_iterations is not None:
        over["sub_iterations"] = args.sub_iterations
    if args.horizon is not None:
        over["horizon"] = args.horizon
    if args.eval_episodes is not None:
        over["eval_episodes"] = args.eval_episodes
    if args.checkpoint_every is not None:
        over["checkpoint_every"] = args.checkpoint_every
    env_over = {}
    if args.junctions is not None:
        env_over["n_junctions"] = args.junctions
    if args.dynamic is not None:
        env_over["dynamic"] = args.dynamic
    if args.env_seed is not None:
        env_over["seed"] = args.env_seed
    if env_over:
        over["env"] = dataclasses.replace(cfg.env, **env_over)
    if args.lr is not None or args.batch is not None:
        ppo_over = {}
        if args.lr is not None:
            ppo_over["lr"] = args.lr
        if args.batch is not None:
            ppo_over["train_batch"] = args.batch
        over["ppo"] = dataclasses.replace(cfg.ppo, **ppo_over)
    return dataclasses.replace(cfg, **over) if over else cfg


def _cmd_train(args):
    cfg = _build_train_config(args)
    manifest = experiment.run_experiment(cfg, args.out)
    print(os.path.join(args.out, "manifest.json"))
    print(f"config hash {manifest['config_hash'][:16]}  "
          f"seeds {list(cfg.seeds)}  agent {cfg.agent}")
    return 0


def _cmd_eval(args):
    policy = experiment.load_policy(args.policy)
    if args.networks:
        nets = [pipes.load_network(p) for p in args.networks]
    else:
        spec = pipes.NetworkSpec(n_junctions=args.junctions,
                                 dynamic=args.count > 1, seed=args.env_seed)
        nets = [pipes.generate_network(spec, episode_index=i)
                for i in range(args.count)]
    report = experiment.evaluate(policy, nets, episodes=args.episodes,
                                 horizon=args.horizon, seed=args.seed)
    payload = report.to_dict()
    if args.out:
        with open(args.out, "w") as f:
            json.dump(payload, f, indent=1, sort_keys=True)
            f.write("\n")
        print(args.out)
    else:
        json.dump(payload, sys.stdout, indent=1, sort_keys=True)
        print()
    print(f"mean distance {report.mean_distance:.3f} m  "
          f"success rate {report.success_rate:.2f}")
    return 0


def _cmd_gen_pipes(args):
    os.makedirs(args.out_dir, exist_ok=True)
    spec = pipes.NetworkSpec(n_junctions=args.junctions, dynamic=args.count > 1,
                             seed=args.env_seed)
    for i in range(args.count):
        net = pipes.generate_network(spec, episode_index=i)
        path = os.path.join(args.out_dir, f"net_{i:03d}.pipenet")
        pipes.save_network(net, path)
        print(f"{path}  length {net.total_centerline_length:.2f} m  "
              f"{len(net.segments)} segments")
    return 0


def _cmd_gradcheck(args):
    worst_any = 0.0
    for variant in ("kinematic", "visual", "visual_recurrent"):
        arch = nn.ArchSpec(variant=variant)
        worst = nn.gradient_check(arch, seed=args.seed, n_params=args.n_params)
        worst_any = max(worst_any, worst)
        print(f"{variant:17s} max relative error {worst:.3e}")
    ok = worst_any < 1e-4
    print("PASS" if ok else "FAIL", f"(threshold 1e-4, worst {worst_any:.3e})")
    return 0 if ok else 1


def _cmd_teleop_serve(args):
    if args.network:
        source = pipes.load_network(args.network)
    else:
        source = pipes.NetworkSpec(n_junctions=args.junctions, dynamic=False,
                                   seed=args.env_seed)
    env = PipeEnv(source, state_set="visual", horizon=args.horizon)
    srv = teleop.TeleopServer(env, port=args.port, rate_hz=args.rate,
                              fairness=not args.no_fairness, log_path=args.log,
                              episode_seed=args.seed)
    host, port = srv.address
    print(f"serving on {host}:{port}  rate {args.rate} Hz  "
          f"fairness {'off' if args.no_fairness else 'on'}")
    try:
        result = srv.serve_episode()
    except KeyboardInterrupt:
        srv.stop()
        return 130
    print(json.dumps(result, sort_keys=True))
    return 0


def _cmd_replay(args):
    got = teleop.replay(args.log)
    _, _, logged = teleop.load_session(args.log)
    print(json.dumps(got, sort_keys=True))
    if logged is not None:
        drift = abs(got["distance"] - logged["distance"])
        ok = drift < 1e-6
        print(f"logged {logged['distance']:.9f}  replayed "
              f"{got['distance']:.9f}  drift {drift:.2e}  "
              f"{'OK' if ok else 'MISMATCH'}")
        return 0 if ok else 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pipesnake",
        description="train, evaluate and teleoperate the in-pipe robot")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run an experiment config")
    t.add_argument("--config", help="JSON config file (flags override it)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--name")
    t.add_argument("--agent", choices=cfgmod.AGENTS)
    t.add_argument("--state-set", dest="state_set",
                   choices=("kinematic", "visual", "visual_recurrent"))
    t.add_argument("--seeds", help="comma separated, e.g. 0,1,2")
    t.add_argument("--iterations", type=int)
    t.add_argument("--sub-iterations", dest="sub_iterations", type=int)
    t.add_argument("--horizon", type=int)
    t.add_argument("--eval-episodes", dest="eval_episodes", type=int)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--junctions", type=int)
    t.add_argument("--env-seed", dest="env_seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    g = t.add_mutually_exclusive_group()
    g.add_argument("--dynamic", dest="dynamic", action="store_true",
                   default=None)
    g.add_argument("--static", dest="dynamic", action="store_false",
                   default=None)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on pipe networks")
    e.add_argument("--policy", required=True,
                   help=".ckpt file (flat) or bundle directory (options)")
    e.add_argument("--networks", nargs="*", help="pipe files; omit to generate")
    e.add_argument("--junctions", type=int, default=5)
    e.add_argument("--count", type=int, default=10)
    e.add_argument("--env-seed", dest="env_seed", type=int, default=900_000)
    e.add_argument("--episodes", type=int, default=1)
    e.add_argument("--horizon", type=int, default=900)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=_cmd_eval)

    g = sub.add_parser("gen-pipes", help="write pipe network files")
    g.add_argument("--junctions", type=int, default=3)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--env-seed", dest="env_seed", type=int, default=0)
    g.add_argument("--out-dir", dest="out_dir", required=True)
    g.set_defaults(func=_cmd_gen_pipes)

    c = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    c.add_argument("--n-params", dest="n_params", type=int, default=200)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=_cmd_gradcheck)

    s = sub.add_parser("teleop-serve", help="host one teleoperated episode")
    s.add_argument("--port", type=int, default=7779)
    s.add_argument("--network", help="pipe file; omit to generate")
    s.add_argument("--junctions", type=int, default=5)
    s.add_argument("--env-seed", dest="env_seed", type=int, default=0)
    s.add_argument("--horizon", type=int, default=900)
    s.add_argument("--rate", type=float, default=10.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--log", help="session log path (JSONL)")
    s.add_argument("--no-fairness", action="store_true",
                   help="include world geometry in frames (debugging)")
    s.set_defaults(func=_cmd_teleop_serve)

    r = sub.add_parser("replay", help="re-run a logged teleop session")
    r.add_argument("--log", required=True)
    r.set_defaults(func=_cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
