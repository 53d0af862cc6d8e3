"""Observation construction.

Two observation sets: a 48-entry kinematic vector, and a visual set that
appends a 16x16 depth image rendered as a planar ray fan from the tip
camera (rows replicate the fan so 2-D conv stacks see a real image).
All entries are normalized to O(1) ranges.
"""

import math

import numpy as np

from . import robot
from .pipes import RAY_HORIZON, PipeNetwork
from .robot import RobotParams, RobotState

KINEMATIC_DIM = 48
DEPTH_H = 16
DEPTH_W = 16
DEPTH_FOV = math.pi / 3.0
VISUAL_DIM = KINEMATIC_DIM + DEPTH_H * DEPTH_W

POSITION_SCALE = 10.0     # meters mapped to O(1)
# entries 0..35 are sensor readings (angles, rates, positions); the trailing
# 12 echo the previous action and carry no sensor noise
N_SENSOR_ENTRIES = 36


def joint_world_orientations(pos) -> np.ndarray:
    """World angle of the link leaving each joint node, J1..J6 order."""
    out = np.empty(robot.N_JOINTS)
    for j, k in enumerate(robot.JOINT_NODE):
        v = pos[k + 1] - pos[k]
        out[j] = math.atan2(v[1], v[0])
    return out


def kinematic_obs(state: RobotState, params: RobotParams = RobotParams(),
                  noise_sigma: float = 0.0, rng=None) -> np.ndarray:
    """48-entry vector: q/o/v per joint, p/v per wheel, previous action."""
    vj = state.joint_vel / params.joint_speed
    vj[robot.ROLL_JOINT] = state.joint_vel[robot.ROLL_JOINT] / params.roll_speed
    wheels = state.pos[list(robot.WHEEL_NODE)]
    out = np.concatenate([
        state.joint_meas / math.pi,
        joint_world_orientations(state.pos) / math.pi,
        vj,
        wheels.ravel() / POSITION_SCALE,
        state.wheel_vel / params.wheel_speed,
        state.prev_action,
    ])
    if noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noise requires an rng")
        out[:N_SENSOR_ENTRIES] += rng.normal(0.0, noise_sigma, N_SENSOR_ENTRIES)
    return out


def pixel_angles(w: int = DEPTH_W, fov: float = DEPTH_FOV) -> np.ndarray:
    """Ray angle of each pixel column relative to the camera axis."""
    return -fov / 2.0 + (np.arange(w) + 0.5) * (fov / w)


def depth_image(state: RobotState, net: PipeNetwork, h: int = DEPTH_H,
                w: int = DEPTH_W, fov: float = DEPTH_FOV,
                h_max: float = RAY_HORIZON):
    """Planar depth fan replicated over rows; (image, camera_inside)."""
    origin, axis = robot.camera_pose(state.pos)
    if not net.contains(origin.reshape(1, 2))[0]:
        return np.full((h, w), h_max), False
    base = math.atan2(axis[1], axis[0])
    row = net.ray_fan(origin, base + pixel_angles(w, fov), h_max)
    return np.tile(row, (h, 1)), True


def camera_alignment(state: RobotState, net: PipeNetwork) -> float:
    """Cosine between the camera axis and the local centerline tangent."""
    origin, axis = robot.camera_pose(state.pos)
    s, _, _ = net.locate(origin.reshape(1, 2))
    t = net.tangent_at(s)[0]
    return float(axis[0] * t[0] + axis[1] * t[1])


def visual_obs(state: RobotState, net: PipeNetwork,
               params: RobotParams = RobotParams(),
               noise_sigma: float = 0.0, rng=None,
               h_max: float = RAY_HORIZON) -> np.ndarray:
    """Kinematic vector followed by the flattened normalized depth image."""
    kin = kinematic_obs(state, params, noise_sigma, rng)
    img, _ = depth_image(state, net, h_max=h_max)
    return np.concatenate([kin, img.ravel() / h_max])
