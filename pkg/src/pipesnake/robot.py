"""Quasi-static articulated robot model.

The robot is a 8-node chain in the pipe plane: camera tip, a three-wheel
front clamping V, a two-piece body around a roll joint, and a three-wheel
rear clamping V.  Each step integrates actuator commands, then solves link,
joint-servo, wall and wheel-grip constraints by projection (position based
dynamics) so the pose is always feasible.

Roll is reduced to a single scalar: the bending plane of the front section
relative to the pipe plane.  In-plane authority of the front joints scales
with cos(roll), so corner entry genuinely requires rolling the camera
section to face the bend before folding into it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .pipes import PipeNetwork

try:
    from . import _kernel
except ImportError:  # numba unavailable: pure-python solver only
    _kernel = None

# flipped by tests to cross-check the jitted solver against the python one
_FORCE_PYTHON_SOLVER = False

N_NODES = 8
N_JOINTS = 6
N_WHEELS = 6
ACTION_DIM = 12

# chain: n0 camera tip | n1..n3 front V | n4 roll housing | n5..n7 rear V
LINKS = ((0, 1, 0.03), (1, 2, 0.085), (2, 3, 0.085), (3, 4, 0.028),
         (4, 5, 0.028), (5, 6, 0.085), (6, 7, 0.085))
ROBOT_LENGTH = sum(l for _, _, l in LINKS)
# disjoint colour groups relax evenly under Gauss-Seidel sweeps
_LINK_ORDER = tuple(list(LINKS[0::2]) + list(LINKS[1::2]))

# joint i (J1..J6) articulates the chain at JOINT_NODE[i]
JOINT_NODE = (2, 3, 4, 5, 6, 1)
ROLL_JOINT = 2            # J3: axial roll, rigid in plane
FRONT_JOINTS = (5, 0, 1)  # J6, J1, J2: gated by cos(roll)
WHEEL_NODE = (1, 2, 3, 5, 6, 7)
FRONT_WHEELS = (0, 1, 2)
REAR_WHEELS = (3, 4, 5)

VELOCITY = "velocity"
POSITION = "position"

_LINK_I = np.array([l[0] for l in _LINK_ORDER], dtype=np.int64)
_LINK_K = np.array([l[1] for l in _LINK_ORDER], dtype=np.int64)
_LINK_REST = np.array([l[2] for l in _LINK_ORDER])
_JOINT_NODE_ARR = np.array(JOINT_NODE, dtype=np.int64)


@dataclass(frozen=True)
class RobotParams:
    wheel_radius: float = 0.025
    body_radius: float = 0.012
    masses: tuple = (0.05, 0.12, 0.12, 0.10, 0.10, 0.12, 0.12, 0.10)
    # command-frame joint limits (lo, hi); J1 is deliberately one-sided so a
    # badly rolled front section cannot fold toward the wrong wall
    joint_limits: tuple = ((-0.3, 2.45), (-2.45, 2.45), (-math.pi, math.pi),
                           (-2.45, 2.45), (-2.45, 2.45), (-1.2, 1.2))
    joint_speed: float = 1.5          # rad/s, velocity-mode target integration
    wheel_speed: float = 0.3          # m/s surface speed at full command
    roll_speed: float = 2.5           # rad/s
    dt: float = 0.05
    pbd_iterations: int = 10
    angle_stiffness: float = 0.5
    grip_stiffness: float = 0.8
    windup: float = 0.35              # max |target - measured| fed to the solver
    k_wall: float = 4000.0            # N per metre of projection pushback
    grip_force_ref: float = 3.0       # normal force for full traction
    mu: float = 0.8
    slide_speed: float = 0.4          # unsupported terminal slide, m/s
    camera_fov: float = math.pi / 3.0
    settle_steps: int = 30

    @property
    def node_radii(self):
        r = np.full(N_NODES, self.body_radius)
        r[list(WHEEL_NODE)] = self.wheel_radius
        return r


@dataclass
class ActuationModes:
    """Per-channel actuation semantics, set by the active control scheme."""
    joint_modes: tuple = (VELOCITY, VELOCITY, POSITION, VELOCITY, VELOCITY, POSITION)
    wheel_mask: tuple = (True,) * N_WHEELS


DEFAULT_MODES = ActuationModes()


@dataclass
class RobotState:
    pos: np.ndarray                   # (8, 2)
    vel: np.ndarray                   # (8, 2)
    roll: float
    theta_cmd: np.ndarray             # (6,) command-frame servo targets
    joint_meas: np.ndarray            # (6,) measured in-plane angles
    joint_vel: np.ndarray             # (6,)
    normal_forces: np.ndarray         # (8,) wall reaction per node
    slip: np.ndarray                  # (6,) wheel commanded without traction
    prev_action: np.ndarray           # (12,)
    prev_servo_raw: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))
    wheel_vel: np.ndarray = field(default_factory=lambda: np.zeros(N_WHEELS))

    def copy(self) -> "RobotState":
        return RobotState(self.pos.copy(), self.vel.copy(), self.roll,
                          self.theta_cmd.copy(), self.joint_meas.copy(),
                          self.joint_vel.copy(), self.normal_forces.copy(),
                          self.slip.copy(), self.prev_action.copy(),
                          self.prev_servo_raw.copy(), self.wheel_vel.copy())


def _wrap(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


_JOINT_OF_NODE = [JOINT_NODE.index(k) for k in range(1, 7)]


def measured_angles(pos) -> np.ndarray:
    """Signed in-plane articulation at each joint node (0 when straight)."""
    v = np.diff(pos, axis=0)
    phi = np.arctan2(v[:, 1], v[:, 0])
    th = _wrap(np.diff(phi))  # articulation at nodes 1..6
    out = np.empty(N_JOINTS)
    for node_i in range(6):
        out[_JOINT_OF_NODE[node_i]] = th[node_i]
    return out


def camera_pose(pos):
    """Camera origin and unit axis (along the tip link, pointing out)."""
    axis = pos[0] - pos[1]
    n = math.hypot(axis[0], axis[1])
    return pos[0].copy(), axis / max(n, 1e-12)


FRONT_CONTACT_NODES = (0, 1, 2, 3)
REAR_CONTACT_NODES = (5, 6, 7)


def clamp_metric(state: RobotState, net: PipeNetwork, params: RobotParams,
                 module: str, _d=None) -> float:
    """How firmly a module is braced across the bore, in [0, 1].

    Product of a force factor (the weaker of the two opposing wall-side
    reaction sums over the module's contact nodes, saturating at the
    traction reference) and a span factor (transverse spread of those
    contacts relative to the bore minus wheel diameter).  Resting on one
    wall scores 0 however hard gravity presses; 1 needs a two-sided press
    across the full width.
    """
    nodes = list(FRONT_CONTACT_NODES if module == "front" else REAR_CONTACT_NODES)
    forces = state.normal_forces[nodes]
    if (forces <= 0.0).all():
        return 0.0
    if _d is None:
        _, d, _ = net.locate(state.pos[nodes])
    else:
        d = _d[nodes]
    n_plus = float(forces[d > 0].sum())
    n_minus = float(forces[d < 0].sum())
    f_force = min(1.0, min(n_plus, n_minus) / params.grip_force_ref)
    span_full = net.diameter - 2.0 * params.wheel_radius
    f_span = float(np.clip((d.max() - d.min()) / span_full, 0.0, 1.0))
    return f_force * f_span


def required_roll(net: PipeNetwork, s_head: float) -> float:
    """Roll that gives the front section authority for the next bend.

    0 for a left bend, pi for a right bend, 0 when no bend lies ahead.
    """
    for i, seg in enumerate(net.segments):
        if seg.kind == "bend" and net._s1[i] > s_head:
            return 0.0 if seg.direction == "left" else math.pi
    return 0.0


def place_along_centerline(net: PipeNetwork, params: RobotParams,
                           s_head: float, offset: float | None = None) -> RobotState:
    """Drape the chain along the centerline with the camera tip at s_head."""
    if offset is None:
        offset = -(net.diameter / 2.0 - params.wheel_radius)
    ss = [s_head]
    for _, _, length in LINKS:
        ss.append(ss[-1] - length)
    ss = np.asarray(ss)
    if ss[-1] < 0.0 or s_head > net.total_centerline_length:
        raise ValueError(f"chain [{ss[-1]:.3f}, {s_head:.3f}] does not fit the network")
    pos = net.point_at(ss, np.full(N_NODES, offset))
    return RobotState(
        pos=pos, vel=np.zeros((N_NODES, 2)), roll=0.0,
        theta_cmd=np.zeros(N_JOINTS), joint_meas=measured_angles(pos),
        joint_vel=np.zeros(N_JOINTS), normal_forces=np.zeros(N_NODES),
        slip=np.zeros(N_WHEELS, dtype=bool), prev_action=np.zeros(ACTION_DIM))


def reset(net: PipeNetwork, params: RobotParams = RobotParams(),
          s_head: float | None = None, settle: bool = True) -> RobotState:
    """Rest pose near the pipe entry, relaxed onto the wall by settling."""
    if s_head is None:
        s_head = ROBOT_LENGTH + 0.04
    first = net.segments[0]
    if first.kind != "straight" or first.arclength < s_head:
        raise ValueError("network must start with a straight that fits the robot")
    state = place_along_centerline(net, params, s_head)
    if settle:
        zero = np.zeros(ACTION_DIM)
        for _ in range(params.settle_steps):
            state = step(state, zero, net, params)
        state.vel[:] = 0.0
        state.joint_vel[:] = 0.0
        state.theta_cmd[:] = 0.0
        state.slip[:] = False
        state.prev_action[:] = 0.0
    return state


def _servo_raw(theta_cmd, roll):
    """Command-frame targets mapped into the pipe plane, before windup."""
    raw = theta_cmd.copy()
    gate = math.cos(roll)
    for j in FRONT_JOINTS:
        raw[j] = gate * theta_cmd[j]
    raw[ROLL_JOINT] = 0.0  # roll housing is rigid in the plane
    return raw


def step(state: RobotState, action, net: PipeNetwork,
         params: RobotParams = RobotParams(),
         modes: ActuationModes = DEFAULT_MODES) -> RobotState:
    """Advance one control period.  Pure function of its inputs."""
    a = np.asarray(action, dtype=float)
    if a.shape != (ACTION_DIM,):
        raise ValueError(f"action must have shape ({ACTION_DIM},), got {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("action contains non-finite values")
    a = np.clip(a, -1.0, 1.0)
    cmd_j, cmd_w = a[:N_JOINTS], a[N_JOINTS:]
    dt = params.dt

    # actuator command integration in the command frame
    theta_cmd = state.theta_cmd.copy()
    for j in range(N_JOINTS):
        lo, hi = params.joint_limits[j]
        if modes.joint_modes[j] == VELOCITY:
            theta_cmd[j] += cmd_j[j] * params.joint_speed * dt
        else:
            theta_cmd[j] = lo + (cmd_j[j] + 1.0) * 0.5 * (hi - lo)
        theta_cmd[j] = min(max(theta_cmd[j], lo), hi)

    s_all, d_all, _ = net.locate(state.pos)

    # roll moves toward its target only while at least one module is free
    c_front = clamp_metric(state, net, params, "front", _d=d_all)
    c_rear = clamp_metric(state, net, params, "rear", _d=d_all)
    rate = params.roll_speed * (1.0 - min(c_front, c_rear))
    droll = theta_cmd[ROLL_JOINT] - state.roll
    roll = state.roll + float(np.clip(droll, -rate * dt, rate * dt))

    meas_plane = measured_angles(state.pos)
    raw = _servo_raw(theta_cmd, roll)
    phys = np.clip(raw, meas_plane - params.windup, meas_plane + params.windup)

    # a module whose joints are actively commanded overpowers its wheel
    # brakes (servos are far stronger than traction), so its grip fades
    # while it articulates; a quiescent module brakes hard
    d_raw = np.abs(raw - state.prev_servo_raw) / (params.joint_speed * dt)
    act_front = min(1.0, float(d_raw[list(FRONT_JOINTS)].max()))
    act_rear = min(1.0, float(d_raw[[3, 4]].max()))
    grip_scale = np.empty(N_WHEELS)
    grip_scale[list(FRONT_WHEELS)] = 1.0 - 0.9 * act_front
    grip_scale[list(REAR_WHEELS)] = 1.0 - 0.9 * act_rear

    # wheel traction from last step's wall reactions
    wheel_nodes = list(WHEEL_NODE)
    t_hat = net.tangent_at(s_all[wheel_nodes])
    grip = np.clip(params.mu * state.normal_forces[wheel_nodes]
                   / params.grip_force_ref, 0.0, 1.0) * grip_scale
    mask = np.asarray(modes.wheel_mask, dtype=float)
    u = cmd_w * params.wheel_speed * mask
    slip = (np.abs(u) > 0.02 * params.wheel_speed) & (grip < 0.9)
    anchors = state.pos[wheel_nodes].copy()
    advance = u * dt

    inv_mass = 1.0 / np.asarray(params.masses)
    radii = params.node_radii
    ks = params.angle_stiffness
    kg = params.grip_stiffness

    grips = [(int(WHEEL_NODE[w]), float(grip[w]), float(t_hat[w, 0]), float(t_hat[w, 1]),
              float(anchors[w, 0] + advance[w] * t_hat[w, 0]),
              float(anchors[w, 1] + advance[w] * t_hat[w, 1]))
             for w in range(N_WHEELS) if grip[w] > 0.0]

    if _kernel is not None and not _FORCE_PYTHON_SOLVER:
        p, push_acc = _kernel.solve(
            *net._tables, net.total_centerline_length, net.diameter / 2.0,
            state.pos, inv_mass, radii, phys, _JOINT_NODE_ARR,
            np.array([g[0] for g in grips], dtype=np.int64),
            np.array([g[1] for g in grips]),
            np.array([g[2] for g in grips]),
            np.array([g[3] for g in grips]),
            np.array([g[4] for g in grips]),
            np.array([g[5] for g in grips]),
            _LINK_I, _LINK_K, _LINK_REST,
            params.slide_speed * dt, params.pbd_iterations, ks, kg)
    else:
        p, push_acc = _solve_python(state, net, params, inv_mass, radii,
                                    phys, grips, ks, kg)

    vel = (p - state.pos) / dt
    meas = measured_angles(p)
    joint_vel = _wrap(meas - state.joint_meas) / dt
    meas_out = meas.copy()
    meas_out[ROLL_JOINT] = roll
    joint_vel[ROLL_JOINT] = (roll - state.roll) / dt

    return RobotState(
        pos=p, vel=vel, roll=roll, theta_cmd=theta_cmd, joint_meas=meas_out,
        joint_vel=joint_vel, normal_forces=params.k_wall * push_acc,
        slip=slip, prev_action=a, prev_servo_raw=raw, wheel_vel=u)


def _solve_python(state, net, params, inv_mass, radii, phys, grips, ks, kg):
    """Reference projection solver; the jitted kernel mirrors it exactly."""
    # predict: unsupported parts slide down at terminal speed
    px = state.pos[:, 0].tolist()
    py = (state.pos[:, 1] - params.slide_speed * params.dt).tolist()
    im = inv_mass.tolist()
    targets = phys.tolist()

    push_acc = np.zeros(N_NODES)
    two_pi = 2.0 * math.pi
    atan2 = math.atan2

    def link_pass():
        for i, k, rest in _LINK_ORDER:
            dx = px[k] - px[i]
            dy = py[k] - py[i]
            dist = math.sqrt(dx * dx + dy * dy)
            if dist < 1e-12:
                continue
            f = (dist - rest) / dist
            cx, cy = f * dx, f * dy
            w = im[i] + im[k]
            wi, wk = im[i] / w, im[k] / w
            px[i] += cx * wi
            py[i] += cy * wi
            px[k] -= cx * wk
            py[k] -= cy * wk

    def grip_pass(strength):
        for node, g, tx, ty, gx, gy in grips:
            e_t = (gx - px[node]) * tx + (gy - py[node]) * ty
            f = e_t * g * strength
            px[node] += tx * f
            py[node] += ty * f

    def wall_pass():
        c, dirs = net.clearances(np.column_stack((px, py)), radii)
        viol = np.maximum(0.0, -c)
        if viol.any():
            for i in range(N_NODES):
                v = viol[i]
                if v > 0.0:
                    px[i] += dirs[i, 0] * v
                    py[i] += dirs[i, 1] * v
        return viol

    for _ in range(params.pbd_iterations):
        link_pass()
        # joint servos: three-point angular projection, gradients sum to zero
        for j in range(N_JOINTS):
            k = JOINT_NODE[j]
            a_n, b_n = k - 1, k + 1
            vin_x = px[k] - px[a_n]
            vin_y = py[k] - py[a_n]
            vo_x = px[b_n] - px[k]
            vo_y = py[b_n] - py[k]
            meas_j = atan2(vo_y, vo_x) - atan2(vin_y, vin_x)
            err = (targets[j] - meas_j + math.pi) % two_pi - math.pi
            if abs(err) < 1e-12:
                continue
            li2 = vin_x * vin_x + vin_y * vin_y
            lo2 = vo_x * vo_x + vo_y * vo_y
            if li2 < 1e-16 or lo2 < 1e-16:
                continue
            ga_x, ga_y = -vin_y / li2, vin_x / li2
            gb_x, gb_y = -vo_y / lo2, vo_x / lo2
            gk_x, gk_y = -ga_x - gb_x, -ga_y - gb_y
            ia, ik, ib = im[a_n], im[k], im[b_n]
            denom = (ia * (ga_x * ga_x + ga_y * ga_y)
                     + ik * (gk_x * gk_x + gk_y * gk_y)
                     + ib * (gb_x * gb_x + gb_y * gb_y))
            lam = ks * err / denom
            px[a_n] += lam * ia * ga_x
            py[a_n] += lam * ia * ga_y
            px[k] += lam * ik * gk_x
            py[k] += lam * ik * gk_y
            px[b_n] += lam * ib * gb_x
            py[b_n] += lam * ib * gb_y
        # wheel grip: braked/driven wheels track their anchor along the wall
        grip_pass(kg)
        push_acc += wall_pass()

    # final tangential lock: braked wheels settle exactly on their anchors so
    # a clamped, uncommanded robot cannot creep step over step
    for _ in range(2):
        link_pass()
        grip_pass(1.0)

    # exact non-penetration pass
    for _ in range(3):
        viol = wall_pass()
        push_acc += viol
        if (viol <= 1e-9).all():
            break

    return np.column_stack((px, py)), push_acc
