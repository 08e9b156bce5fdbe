"""PD pose controller with gravity compensation for the fully actuated body."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from omav_door import rotations as so3
from omav_door.world import Array, GeometryConfig, RobotState, Wrench, gravity_wrench


@dataclass(frozen=True)
class PoseReference:
    position_W_ref: Array
    orientation_WB_ref: Array


@dataclass(frozen=True)
class PoseGains:
    kp_pos: float = 40.0
    kd_pos: float = 12.0
    kp_rot: float = 8.0
    kd_rot: float = 2.0
    max_force: float = 30.0
    max_torque: float = 10.0

    def __post_init__(self) -> None:
        for name in ("kp_pos", "kd_pos", "kp_rot", "kd_rot", "max_force", "max_torque"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


def attitude_error(orientation_WB: Array, orientation_ref: Array) -> Array:
    """Geometric attitude error ``1/2 vee(R_ref^T R - R^T R_ref)``."""
    m = so3.matTmul(orientation_ref, orientation_WB)
    return 0.5 * so3.vee(m - np.swapaxes(m, -1, -2))


def compute_wrench(robot: RobotState, ref: PoseReference, gains: PoseGains,
                   config: GeometryConfig) -> Wrench:
    """Body-frame command wrench steering ``robot`` towards ``ref``.

    The PD feedback is clamped elementwise to ``max_force`` / ``max_torque``;
    gravity compensation is added after the clamp so the hover load never
    eats into the feedback authority.
    """
    R = robot.orientation_WB
    pos_err_B = so3.matTvec(R, ref.position_W_ref - robot.position_W)
    force = gains.kp_pos * pos_err_B - gains.kd_pos * robot.linear_velocity_B
    force = np.clip(force, -gains.max_force, gains.max_force)
    force = force - gravity_wrench(R, config).force_B

    e_R = attitude_error(R, ref.orientation_WB_ref)
    torque = -gains.kp_rot * e_R - gains.kd_rot * robot.angular_velocity_B
    torque = np.clip(torque, -gains.max_torque, gains.max_torque)
    return Wrench(force, torque)
