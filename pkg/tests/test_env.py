"""Episode-layer tests: reward telescoping, termination, skill tasks, pilot."""

import itertools
import math

import numpy as np
import pytest

import pipesnake.robot as robot
from pipesnake.env import (
    ClampDriveEnv,
    EnterTurnEnv,
    ExitTurnEnv,
    PipeEnv,
    ScriptedPilot,
    clamp_travel_pose,
    run_pilot,
)
from pipesnake.pipes import NetworkSpec, PipeNetwork, SegmentSpec
from pipesnake.robot import RobotParams, clamp_metric

D = 0.125


def _straight(length=3.0, angle=0.0):
    return PipeNetwork([SegmentSpec("straight", D, length=length)],
                       start_pose=(0.0, 0.0, angle))


def _corner(direction, radius_class, angle=0.0, pre=2.0, post=2.0):
    return PipeNetwork([
        SegmentSpec("straight", D, length=pre),
        SegmentSpec("bend", D, direction=direction, radius_class=radius_class),
        SegmentSpec("straight", D, length=post),
    ], start_pose=(0.0, 0.0, angle))


# -- reward telescoping ----------------------------------------------------------

def test_telescoping_identity_over_100_random_episodes():
    # with the end-of-network bonus off, the return must collapse to net
    # head displacement no matter what the contacts did in between
    rng = np.random.default_rng(0)
    sources = [
        _straight(4.0, 0.3),
        NetworkSpec(n_junctions=3, seed=5),
        NetworkSpec(n_junctions=3, dynamic=True, seed=9),
    ]
    worst = 0.0
    for ep in range(100):
        env = PipeEnv(sources[ep % len(sources)], horizon=40, goal_bonus=0.0)
        env.reset(seed=ep)
        d0 = env.head_distance()
        total = 0.0
        done = False
        while not done:
            _, r, done, info = env.step(rng.uniform(-1.0, 1.0, 12))
            total += r
        worst = max(worst, abs(total - (info["distance"] - d0)))
    assert worst < 1e-9


def test_extra_reward_added_on_top_of_displacement():
    env = PipeEnv(_straight(), horizon=30, goal_bonus=0.0,
                  extra_reward=lambda state, net: 0.25)
    env.reset()
    d0 = env.head_distance()
    total = 0.0
    for _ in range(30):
        _, r, done, info = env.step(np.zeros(12))
        total += r
    assert total - 0.25 * 30 == pytest.approx(info["distance"] - d0, abs=1e-12)


def test_goal_bonus_paid_exactly_once():
    env = PipeEnv(PipeNetwork([SegmentSpec("straight", D, length=1.7)]),
                  horizon=300)
    env.reset()
    d0 = env.head_distance()
    drive = np.zeros(12)
    drive[0] = 1.0
    drive[4] = 1.0
    drive[6:] = 1.0
    total = 0.0
    done = False
    while not done:
        _, r, done, info = env.step(drive)
        total += r
    assert info["goal"]
    assert total == pytest.approx(info["distance"] - d0 + 1.0, abs=1e-9)


# -- termination ------------------------------------------------------------------

def test_horizon_terminates_short_episode():
    env = PipeEnv(_straight(), horizon=60)
    env.reset()
    for t in range(60):
        _, _, done, info = env.step(np.zeros(12))
    assert done and env.t == 60
    assert not info["stuck"] and not info["goal"]


def test_stuck_fires_after_window_without_progress():
    env = PipeEnv(_straight(), horizon=900)
    env.reset()
    done = False
    while not done:
        _, _, done, info = env.step(np.zeros(12))
    assert env.t == 150
    assert info["stuck"] and not info["goal"]


def test_step_before_reset_raises():
    env = PipeEnv(_straight())
    with pytest.raises(RuntimeError):
        env.step(np.zeros(12))


def test_unknown_state_set_rejected():
    with pytest.raises(ValueError):
        PipeEnv(_straight(), state_set="lidar")


# -- observations ------------------------------------------------------------------

def test_state_set_observation_dims():
    for state_set, dim in (("kinematic", 48), ("visual", 304),
                           ("visual_recurrent", 304)):
        env = PipeEnv(_straight(), state_set=state_set)
        obs = env.reset()
        assert env.obs_dim == dim
        assert obs.shape == (dim,)
        assert np.all(np.isfinite(obs))


def test_observation_noise_leaves_dynamics_alone():
    acts = np.random.default_rng(3).uniform(-1, 1, (25, 12))
    envs = [PipeEnv(_straight(), noise_sigma=sig) for sig in (0.0, 0.05)]
    rewards = []
    obs_last = []
    for env in envs:
        env.reset(seed=0)
        rs = []
        for a in acts:
            o, r, _, _ = env.step(a)
            rs.append(r)
        rewards.append(rs)
        obs_last.append(o)
    assert rewards[0] == rewards[1]
    assert not np.allclose(obs_last[0], obs_last[1])


# -- layout sourcing ----------------------------------------------------------------

def test_static_spec_keeps_layout_dynamic_redraws():
    static = PipeEnv(NetworkSpec(n_junctions=3, seed=7))
    static.reset()
    first = static.net.total_centerline_length
    static.reset()
    assert static.net.total_centerline_length == first

    dyn = PipeEnv(NetworkSpec(n_junctions=3, dynamic=True, seed=7))
    lengths = set()
    for _ in range(4):
        dyn.reset()
        lengths.add(round(dyn.net.total_centerline_length, 6))
    assert len(lengths) > 1


def test_same_construction_same_trajectory():
    acts = np.random.default_rng(11).uniform(-1, 1, (40, 12))

    def rollout():
        env = PipeEnv(NetworkSpec(n_junctions=3, dynamic=True, seed=4),
                      horizon=40)
        env.reset()
        out = []
        for a in acts:
            _, r, _, info = env.step(a)
            out.append((r, info["distance"]))
        return out, env.state.pos.copy()

    (r1, p1), (r2, p2) = rollout(), rollout()
    assert r1 == r2
    assert np.array_equal(p1, p2)


# -- corner bookkeeping ---------------------------------------------------------------

def test_corners_passed_monotone_and_complete():
    env = PipeEnv(NetworkSpec(n_junctions=3, seed=0), horizon=900)
    pilot = ScriptedPilot()
    env.reset()
    seen = [0]
    done = False
    while not done:
        _, _, done, info = env.step(pilot.act(env.state, env.net))
        assert info["corners_passed"] >= seen[-1]
        seen.append(info["corners_passed"])
    assert info["goal"]
    assert seen[-1] == 3


# -- scripted pilot traversability -----------------------------------------------------

@pytest.mark.parametrize("angle", [0.0, math.pi / 2, math.pi, -math.pi / 2])
def test_pilot_single_corner_matrix(angle):
    for direction, rc in itertools.product(("left", "right"), ("1D", "2D")):
        env = PipeEnv(_corner(direction, rc, angle), horizon=900)
        info = run_pilot(env)
        assert info["goal"], (angle, direction, rc, info)


def test_pilot_traverses_generated_networks():
    cases = [
        (NetworkSpec(n_junctions=3, seed=0), 1),
        (NetworkSpec(n_junctions=5, seed=0), 1),
        (NetworkSpec(n_junctions=3, dynamic=True, seed=7), 3),
        (NetworkSpec(n_junctions=5, dynamic=True, seed=23), 4),
    ]
    for spec, episodes in cases:
        env = PipeEnv(spec, horizon=900)
        for _ in range(episodes):
            info = run_pilot(env)
            assert info["goal"], (spec, env.episode, info)


# -- clamped placement -----------------------------------------------------------------

def test_clamp_travel_pose_hits_target_and_holds_on_vertical():
    net = _straight(3.0, math.pi / 2)
    params = RobotParams()
    st = clamp_travel_pose(net, params, 1.5)
    s, _, _ = net.locate(st.pos[:1])
    assert abs(s[0] - 1.5) < 0.02
    assert clamp_metric(st, net, params, "front") > 0.9
    assert clamp_metric(st, net, params, "rear") > 0.9
    for _ in range(20):
        st = robot.step(st, np.zeros(12), net, params)
    s2, _, _ = net.locate(st.pos[:1])
    assert abs(s2[0] - s[0]) < 0.02


# -- skill environments ------------------------------------------------------------------

def test_clampdrive_draws_angles_per_episode():
    env = ClampDriveEnv()
    angles = set()
    for _ in range(6):
        env.reset()
        angles.add(round(env.net.start_pose[2], 6))
    assert len(angles) > 1
    assert all(abs(a) <= math.pi / 2 for a in angles)

    fixed = ClampDriveEnv(angles=(0.3,))
    fixed.reset()
    assert fixed.net.start_pose[2] == pytest.approx(0.3)


def test_clampdrive_solvable_by_travel_clamp():
    env = ClampDriveEnv()
    drive = np.zeros(12)
    drive[0] = 1.0
    drive[4] = 1.0
    drive[6:] = 1.0
    progress = []
    for _ in range(4):
        env.reset()
        d0 = env.head_distance()
        done = False
        while not done:
            _, _, done, info = env.step(drive)
        progress.append(info["distance"] - d0)
    assert np.mean(progress) > 0.5


def test_enterturn_reset_contract():
    env = EnterTurnEnv()
    for _ in range(5):
        env.reset()
        b0, b1 = env.net._s0[1], env.net._s1[1]
        s, _, _ = env.net.locate(env.state.pos)
        assert abs(s[0] - (b0 - 0.22)) < 0.03
        assert s[2] < 0.5 * (b0 + b1)           # front V still short of the apex
        assert clamp_metric(env.state, env.net, env.params, "front") > 0.9
        assert clamp_metric(env.state, env.net, env.params, "rear") > 0.9


def test_enterturn_scripted_success():
    env = EnterTurnEnv(success_bonus=0.5, goal_bonus=0.0)
    for _ in range(4):
        env.reset()
        want = 0.0 if env.net.segments[1].direction == "left" else math.pi
        d0 = env.head_distance()
        total = 0.0
        done = False
        while not done:
            a = np.zeros(12)
            aligned = abs(((env.state.roll - want + math.pi) % (2 * math.pi))
                          - math.pi) < 0.3
            a[0] = 1.0 if aligned else 0.0
            a[4] = 1.0
            a[6:] = 1.0
            a[2] = want / math.pi
            _, r, done, info = env.step(a)
            total += r
        assert info["success"] and not info["stuck"]
        assert env.t < env.horizon
        apex = 0.5 * (env.net._s0[1] + env.net._s1[1])
        s, _, _ = env.net.locate(env.state.pos[2:3])
        assert s[0] >= apex
        # success pays its bonus exactly once, on top of displacement
        assert total == pytest.approx(info["distance"] - d0 + 0.5, abs=1e-9)


def test_exitturn_reset_contract():
    env = ExitTurnEnv()
    for _ in range(5):
        env.reset()
        bend_end = env.net._s1[1]
        s, _, _ = env.net.locate(env.state.pos)
        assert abs(s[0] - (bend_end + 0.30)) < 0.05
        assert s[6] < bend_end                   # rear V still inside/behind the bend


def test_exitturn_scripted_success():
    env = ExitTurnEnv()
    drive = np.zeros(12)
    drive[0] = 1.0
    drive[4] = 1.0
    drive[6:] = 1.0
    for _ in range(4):
        env.reset()
        done = False
        while not done:
            _, _, done, info = env.step(drive)
        assert info["success"], info
        bend_end = env.net._s1[1]
        s, _, _ = env.net.locate(env.state.pos[6:7])
        assert s[0] >= bend_end
        assert clamp_metric(env.state, env.net, env.params, "rear") >= 0.5
