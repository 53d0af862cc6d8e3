"""Episode layer over the simulator.

PipeEnv turns the robot/network pair into an RL environment: reward is
per-step head progress along the centerline (so episode return telescopes
to distance travelled), plus a one-off bonus on reaching the end of the
network.  Specialized environments isolate the three locomotion skills
(driving a straight, entering a bend, exiting a bend) with their own
initial conditions and success tests.  A hand-written pilot that can
drive full networks end to end doubles as a traversability check and a
data point for what the learned policies should achieve.
"""

from __future__ import annotations

import collections
import dataclasses
import math

import numpy as np

from . import robot, sensing
from .pipes import NetworkSpec, PipeNetwork, SegmentSpec, generate_network
from .robot import ACTION_DIM, ActuationModes, RobotParams

HORIZON = 900
GOAL_BONUS = 1.0
STUCK_WINDOW = 150
STUCK_MIN_PROGRESS = 0.01

STATE_SETS = ("kinematic", "visual", "visual_recurrent")


class PipeEnv:
    """reset/step episode wrapper.

    ``source`` is a fixed PipeNetwork (static) or a NetworkSpec (layout
    drawn per episode; redrawn every reset only when the spec is dynamic).
    ``extra_reward(state, net) -> float`` lets callers add shaping terms
    without touching the base displacement reward.
    """

    def __init__(self, source, state_set="kinematic", params: RobotParams = None,
                 horizon=HORIZON, noise_sigma=0.0, goal_bonus=GOAL_BONUS,
                 extra_reward=None, modes: ActuationModes = None,
                 success_bonus=1.0):
        if state_set not in STATE_SETS:
            raise ValueError(f"unknown state set {state_set!r}")
        self.source = source
        self.state_set = state_set
        self.params = params or RobotParams()
        self.horizon = horizon
        self.noise_sigma = noise_sigma
        self.goal_bonus = goal_bonus
        self.extra_reward = extra_reward
        self.modes = modes or robot.DEFAULT_MODES
        self.success_bonus = success_bonus
        self.rng = np.random.default_rng(0)
        self.episode = -1
        self.net = None
        self.state = None
        self.t = 0

    @property
    def obs_dim(self):
        return sensing.KINEMATIC_DIM if self.state_set == "kinematic" else sensing.VISUAL_DIM

    # -- episode setup -------------------------------------------------------

    def _make_network(self) -> PipeNetwork:
        if isinstance(self.source, PipeNetwork):
            return self.source
        return generate_network(self.source, episode_index=self.episode)

    def _initial_state(self):
        return robot.reset(self.net, self.params)

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.episode += 1
        self.net = self._make_network()
        self.state = self._initial_state()
        self.t = 0
        d = self.head_distance()
        self._d_prev = d
        self._max_d = d
        self._d_hist = [d]
        self._goal_hit = False
        self.last_obs = self._obs()
        return self.last_obs

    # -- queries ---------------------------------------------------------------

    def head_distance(self) -> float:
        s, _, _ = self.net.locate(self.state.pos[:1])
        return float(s[0])

    @property
    def max_distance(self) -> float:
        """Deepest head arclength reached this episode."""
        return self._max_d

    @property
    def goal_reached(self) -> bool:
        return self._goal_hit

    def corners_passed(self) -> float:
        count = 0
        for i, seg in enumerate(self.net.segments):
            if seg.kind == "bend" and self._max_d >= self.net._s1[i]:
                count += 1
        return count

    def _obs(self):
        if self.state_set == "kinematic":
            return sensing.kinematic_obs(self.state, self.params,
                                         self.noise_sigma, self.rng)
        return sensing.visual_obs(self.state, self.net, self.params,
                                  noise_sigma=self.noise_sigma, rng=self.rng)

    def _success(self) -> bool:
        """Extra terminal condition for specialized skill tasks."""
        return False

    # -- stepping ---------------------------------------------------------------

    def step(self, action, modes: ActuationModes = None):
        if self.state is None:
            raise RuntimeError("step before reset")
        self.state = robot.step(self.state, action, self.net, self.params,
                                modes or self.modes)
        self.t += 1
        d = self.head_distance()
        reward = d - self._d_prev
        self._d_prev = d
        self._max_d = max(self._max_d, d)
        if self.extra_reward is not None:
            reward += float(self.extra_reward(self.state, self.net))

        goal = d >= self.net.total_centerline_length - self.net.diameter
        if goal and not self._goal_hit:
            reward += self.goal_bonus
            self._goal_hit = True

        self._d_hist.append(d)
        if len(self._d_hist) > STUCK_WINDOW + 1:
            self._d_hist.pop(0)
        stuck = (len(self._d_hist) > STUCK_WINDOW
                 and self._d_hist[-1] - self._d_hist[0] < STUCK_MIN_PROGRESS)

        success = self._success()
        if success:
            reward += self.success_bonus
        done = goal or stuck or success or self.t >= self.horizon
        info = {
            "distance": d,
            "max_distance": self._max_d,
            "corners_passed": self.corners_passed(),
            "goal": goal,
            "stuck": stuck,
            "success": success or goal,
        }
        self.last_obs = self._obs()
        return self.last_obs, reward, done, info


# -- specialized skill environments -------------------------------------------

_RIGHT_ANGLES = (0.0, math.pi / 2.0, math.pi, -math.pi / 2.0)


def _episode_rng(base_seed, episode):
    return np.random.default_rng(np.random.SeedSequence([base_seed, episode]))


class ClampDriveEnv(PipeEnv):
    """A single straight at a random inclination, redrawn per episode.

    Horizontal runs reward plain driving; steep and vertical runs pay only
    when the chain braces across the bore first.
    """

    def __init__(self, diameter=0.125, length=8.0, geometry_seed=0,
                 horizon=300, angles=None, **kw):
        super().__init__(None, horizon=horizon, **kw)
        self.diameter = diameter
        self.length = length
        self.geometry_seed = geometry_seed
        self.angles = angles          # fixed menu, or None for uniform

    def _make_network(self):
        rng = _episode_rng(self.geometry_seed, self.episode)
        if self.angles is not None:
            angle = float(rng.choice(self.angles))
        else:
            angle = float(rng.uniform(-math.pi / 2.0, math.pi / 2.0))
        seg = SegmentSpec("straight", self.diameter, length=self.length)
        return PipeNetwork([seg], start_pose=(0.0, 0.0, angle))


def _bend_network(rng, diameter, approach=None):
    """straight + bend + straight with axis-aligned world orientation."""
    start_angle = float(rng.choice(_RIGHT_ANGLES)) if approach is None else approach
    pre = SegmentSpec("straight", diameter, length=float(rng.uniform(1.3, 2.0)))
    bend = SegmentSpec("bend", diameter,
                       direction="left" if rng.random() < 0.5 else "right",
                       radius_class="1D" if rng.random() < 0.5 else "2D")
    post = SegmentSpec("straight", diameter, length=float(rng.uniform(1.5, 2.5)))
    return PipeNetwork([pre, bend, post], start_pose=(0.0, 0.0, start_angle))


def _settle_with(env_state, net, params, action, steps, modes=robot.DEFAULT_MODES):
    st = env_state
    for _ in range(steps):
        st = robot.step(st, action, net, params, modes)
    return st


def clamp_travel_pose(net: PipeNetwork, params: RobotParams, s_head: float):
    """Place at s_head and fold both V-shapes into the travel clamp.

    The pose is synthesised with the gravity slide switched off so steep
    approaches get the same initial condition as level ones, re-targeted
    once to cancel the arclength shift the fold itself causes, and then
    held under real physics so the wedge is load-bearing before handing
    the state to the episode.
    """
    calm = dataclasses.replace(params, slide_speed=0.0)
    fold = np.zeros(ACTION_DIM)
    fold[0] = 1.0
    fold[4] = 1.0

    def build(target):
        target = max(target, robot.ROBOT_LENGTH + 0.02)
        st = robot.place_along_centerline(net, calm, target)
        st = _settle_with(st, net, calm, np.zeros(ACTION_DIM), 10)
        return _settle_with(st, net, calm, fold, 45)

    st = build(s_head)
    got, _, _ = net.locate(st.pos[:1])
    err = float(got[0]) - s_head
    if abs(err) > 0.02:
        st = build(s_head - err)
    st = _settle_with(st, net, params, fold, 10)
    st.vel[:] = 0.0
    st.joint_vel[:] = 0.0
    st.prev_action[:] = 0.0
    return st


class EnterTurnEnv(PipeEnv):
    """Start clamped shortly before a bend; succeed once the front V-shape
    has folded past the bend apex."""

    def __init__(self, diameter=0.125, geometry_seed=1, horizon=150, **kw):
        super().__init__(None, horizon=horizon, **kw)
        self.diameter = diameter
        self.geometry_seed = geometry_seed

    def _make_network(self):
        rng = _episode_rng(self.geometry_seed, self.episode)
        return _bend_network(rng, self.diameter)

    def _initial_state(self):
        bend_start = self.net._s0[1]
        return clamp_travel_pose(self.net, self.params,
                                 bend_start - 0.22)

    def _success(self):
        apex = 0.5 * (self.net._s0[1] + self.net._s1[1])
        s, _, _ = self.net.locate(self.state.pos[2:3])
        return float(s[0]) >= apex


class ExitTurnEnv(PipeEnv):
    """Start with the body spanning the bend; succeed once the rear V-shape
    is clamped in the segment after it."""

    REAR_CLAMP_THRESHOLD = 0.5

    def __init__(self, diameter=0.125, geometry_seed=2, horizon=150, **kw):
        super().__init__(None, horizon=horizon, **kw)
        self.diameter = diameter
        self.geometry_seed = geometry_seed

    def _make_network(self):
        rng = _episode_rng(self.geometry_seed, self.episode)
        return _bend_network(rng, self.diameter)

    def _initial_state(self):
        bend_end = self.net._s1[1]
        calm = dataclasses.replace(self.params, slide_speed=0.0)
        st = robot.place_along_centerline(self.net, calm, bend_end + 0.30)
        return _settle_with(st, self.net, calm, np.zeros(ACTION_DIM), 10)

    def _success(self):
        bend_end = self.net._s1[1]
        s, _, _ = self.net.locate(self.state.pos[6:7])
        if float(s[0]) < bend_end:
            return False
        c = robot.clamp_metric(self.state, self.net, self.params, "rear")
        return c >= self.REAR_CLAMP_THRESHOLD


# -- scripted reference pilot ---------------------------------------------------

class ScriptedPilot:
    """Deterministic hand-written driver for full networks.

    Exists to prove generated layouts are physically traversable and to
    give the learned policies a concrete performance yardstick.  Drives
    clamped along straights, rolls the camera section toward the next
    bend, folds the front through, crawls the body across, then re-clamps
    on the far side.
    """

    def __init__(self, params: RobotParams = None):
        self.params = params or RobotParams()
        self._endgame = False
        self._pressed = collections.deque(maxlen=50)

    def act(self, state, net: PipeNetwork) -> np.ndarray:
        s, _, _ = net.locate(state.pos)
        s_head, s_front, s_rear = s[0], s[2], s[6]
        if s_head < net.total_centerline_length - 0.8:
            # far from the cap (also the case right after an episode reset)
            self._endgame = False
            self._pressed.clear()
        bend = self._next_bend(net, s_rear)
        a = np.zeros(ACTION_DIM)
        roll_cmd = 0.0
        if bend is not None:
            b0, b1, seg = bend
            want = 0.0 if seg.direction == "left" else math.pi
            roll_cmd = want / math.pi
            near = s_head > b0 - 0.35
            if near and s_front < b1:
                # fold the camera section around the corner; the rear V
                # stays clamped and every wheel keeps shoving so a half
                # finished fold cannot wedge against the approach wall
                turn = abs(_wrap_angle(state.roll - want)) < 0.3
                a[0] = 1.0 if turn else 0.0
                a[4] = 1.0
                a[6:] = 1.0
                a[2] = roll_cmd
                return a
            if s_front >= b1 and s_rear < b1:
                # front is through: drag the rear V across the bend
                a[0] = 1.0
                a[4] = 1.0
                a[6:12] = 1.0
                a[2] = roll_cmd
                return a
        # cruise: hold the travel clamp and drive all wheels
        a[0] = 1.0
        a[4] = 1.0
        a[6:] = 1.0
        a[2] = roll_cmd
        if bend is None and s.max() > net.total_centerline_length - 0.05:
            # some part of the body is pressed against the cap; keep shoving
            # as long as the head still advances, and only once it stalls
            # swap to straightening the nose, whose folded tip trails the
            # clamp apex by about a link.  Latched: the unfold briefly costs
            # grip and must not flap on and off.
            self._pressed.append(s_head)
            if (len(self._pressed) == self._pressed.maxlen
                    and s_head - self._pressed[0] < 0.005):
                self._endgame = True
        if self._endgame:
            a[0] = -1.0
        return a

    @staticmethod
    def _next_bend(net, s_from):
        for i, seg in enumerate(net.segments):
            if seg.kind == "bend" and net._s1[i] > s_from:
                return net._s0[i], net._s1[i], seg
        return None


def _wrap_angle(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def run_pilot(env: PipeEnv, max_steps=None, pilot: ScriptedPilot = None):
    """Roll the scripted pilot through one episode; returns the last info."""
    pilot = pilot or ScriptedPilot(env.params)
    env.reset()
    info = {"distance": env.head_distance(), "max_distance": env.head_distance(),
            "corners_passed": 0, "goal": False, "stuck": False, "success": False}
    steps = max_steps or env.horizon
    for _ in range(steps):
        a = pilot.act(env.state, env.net)
        _, _, done, info = env.step(a)
        if done:
            break
    return info
