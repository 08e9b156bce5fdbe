"""Floating wrench-actuated body, hinged door and penalty hook/handle contact.

State containers hold plain numpy arrays and may carry leading batch
dimensions: a batch of ``n`` worlds has ``position_W.shape == (n, 3)``,
``door.angle.shape == (n,)`` and so on. All stepping functions are pure
value-to-value maps and broadcast over the batch.

Door angle convention: ``angle = pi/2`` is fully closed, ``0`` fully open.
Door frame D sits at the centre of the handle rectangle with ``x_D``
pointing from the robot side into the door, ``y_D`` along the door leaf
from the hinge towards the free edge and ``z_D`` along the hinge axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

from omav_door import rotations as so3

Array = NDArray[np.float64]

GRAVITY = 9.81
HALF_PI = 0.5 * np.pi
MAX_DT = 0.01


class NumericalBlowUp(FloatingPointError):
    """Raised when a simulation step produces non-finite state."""


def _vec(values) -> Array:
    return np.asarray(values, dtype=np.float64)


@dataclass(frozen=True)
class GeometryConfig:
    """Physical parameters of the robot, door, handle and contact model.

    ``hook_capsule`` is ``(axis_B, half_length, radius)``. ``handle_rect`` is
    ``(width, height, bar_radius, standoff)``. The loop stands upright in the
    ``x_D``-``z_D`` plane: ``width`` runs along the door normal ``x_D``,
    ``height`` along the hinge direction ``z_D``, so a vertical hook slides
    in from the side and pulls on the outer bar. ``standoff`` is the distance
    of the handle centre from the door plane. ``closed_door_orientation_W``
    is ``R_WD`` of the closed door; its z axis must be the hinge axis.
    """

    robot_mass: float = 4.0
    robot_inertia_B: Array = field(default_factory=lambda: np.diag([0.15, 0.15, 0.2]))
    hook_offset_B: Array = field(default_factory=lambda: _vec([0.55, 0.0, 0.0]))
    hook_capsule: tuple = ((0.0, 0.0, 1.0), 0.05, 0.015)
    door_inertia_about_hinge: float = 0.35
    door_width: float = 0.4
    hinge_axis_W: Array = field(default_factory=lambda: _vec([0.0, 0.0, 1.0]))
    hinge_point_W: Array = field(default_factory=lambda: _vec([0.0, -0.35, 1.5]))
    closed_door_orientation_W: Array = field(default_factory=lambda: np.eye(3))
    handle_center_on_door: Array = field(default_factory=lambda: _vec([0.0, 0.35, 0.0]))
    handle_rect: tuple = (0.08, 0.2, 0.01, 0.05)
    door_viscous_damping: float = 0.5
    contact_stiffness: float = 5000.0
    contact_damping: float = 50.0
    friction_coefficient: float = 0.3

    def __post_init__(self) -> None:
        for name in ("robot_inertia_B", "hook_offset_B", "hinge_axis_W", "hinge_point_W",
                     "closed_door_orientation_W", "handle_center_on_door"):
            object.__setattr__(self, name, _vec(getattr(self, name)))
        axis, half_length, radius = self.hook_capsule
        object.__setattr__(self, "hook_capsule", (tuple(float(a) for a in axis),
                                                  float(half_length), float(radius)))
        object.__setattr__(self, "handle_rect", tuple(float(v) for v in self.handle_rect))
        self.validate()
        object.__setattr__(self, "_inertia_inv", np.linalg.inv(self.robot_inertia_B))

    def validate(self) -> None:
        positive = {
            "robot_mass": self.robot_mass,
            "door_inertia_about_hinge": self.door_inertia_about_hinge,
            "door_width": self.door_width,
            "contact_stiffness": self.contact_stiffness,
            "contact_damping": self.contact_damping,
            "hook half_length": self.hook_half_length,
            "hook radius": self.hook_radius,
            "handle width": self.handle_rect[0],
            "handle height": self.handle_rect[1],
            "handle bar radius": self.handle_rect[2],
        }
        for name, value in positive.items():
            if not value > 0:
                raise ValueError(f"{name} must be strictly positive, got {value}")
        if self.door_viscous_damping < 0 or self.friction_coefficient < 0:
            raise ValueError("damping and friction must be non-negative")
        J = self.robot_inertia_B
        if J.shape != (3, 3) or not np.allclose(J, J.T):
            raise ValueError("robot_inertia_B must be a symmetric 3x3 matrix")
        if np.linalg.eigvalsh(J).min() <= 0:
            raise ValueError("robot_inertia_B must be positive definite")
        if abs(np.linalg.norm(self.hinge_axis_W) - 1.0) > 1e-9:
            raise ValueError("hinge_axis_W must be a unit vector")
        C = self.closed_door_orientation_W
        if C.shape != (3, 3) or not np.allclose(C.T @ C, np.eye(3), atol=1e-9) or np.linalg.det(C) < 0:
            raise ValueError("closed_door_orientation_W must be a rotation matrix")
        if not np.allclose(C[:, 2], self.hinge_axis_W, atol=1e-9):
            raise ValueError("the closed door's z axis must equal hinge_axis_W")
        if abs(np.linalg.norm(self.hook_axis_B) - 1.0) > 1e-9:
            raise ValueError("hook capsule axis must be a unit vector")

    @property
    def hook_axis_B(self) -> Array:
        return _vec(self.hook_capsule[0])

    @property
    def hook_half_length(self) -> float:
        return self.hook_capsule[1]

    @property
    def hook_radius(self) -> float:
        return self.hook_capsule[2]

    @property
    def inertia_inv(self) -> Array:
        return self._inertia_inv

    @property
    def contact_reach(self) -> float:
        """Hook-centre to handle-centre distance beyond which no bar can touch."""
        width, height, bar_radius, _ = self.handle_rect
        return (self.hook_half_length + self.hook_radius + 0.5 * np.hypot(width, height)
                + bar_radius + 1e-3)


@dataclass(frozen=True)
class Wrench:
    force_B: Array
    torque_B: Array

    @classmethod
    def zero(cls, batch_shape: tuple = ()) -> "Wrench":
        return cls(np.zeros(batch_shape + (3,)), np.zeros(batch_shape + (3,)))

    def __add__(self, other: "Wrench") -> "Wrench":
        return Wrench(self.force_B + other.force_B, self.torque_B + other.torque_B)

    def __neg__(self) -> "Wrench":
        return Wrench(-self.force_B, -self.torque_B)

    def stacked(self) -> Array:
        return np.concatenate([self.force_B, self.torque_B], axis=-1)


@dataclass(frozen=True)
class RobotState:
    position_W: Array
    orientation_WB: Array
    linear_velocity_B: Array
    angular_velocity_B: Array

    @classmethod
    def at_rest(cls, position_W, orientation_WB=None) -> "RobotState":
        position_W = _vec(position_W)
        batch = position_W.shape[:-1]
        if orientation_WB is None:
            orientation_WB = np.broadcast_to(np.eye(3), batch + (3, 3)).copy()
        return cls(position_W, _vec(orientation_WB), np.zeros(batch + (3,)), np.zeros(batch + (3,)))


@dataclass(frozen=True)
class DoorState:
    angle: Array
    angular_rate: Array
    handle_offset_D: Array

    @classmethod
    def closed(cls, batch_shape: tuple = ()) -> "DoorState":
        return cls(np.full(batch_shape, HALF_PI), np.zeros(batch_shape), np.zeros(batch_shape + (3,)))


@dataclass(frozen=True)
class WorldState:
    robot: RobotState
    door: DoorState
    time: Array

    @property
    def batch_shape(self) -> tuple:
        return self.robot.position_W.shape[:-1]


def stack_worlds(worlds: list[WorldState]) -> WorldState:
    """Combine unbatched worlds into one batched world."""
    def stack(getter):
        return np.stack([getter(w) for w in worlds])

    robot = RobotState(
        stack(lambda w: w.robot.position_W),
        stack(lambda w: w.robot.orientation_WB),
        stack(lambda w: w.robot.linear_velocity_B),
        stack(lambda w: w.robot.angular_velocity_B),
    )
    door = DoorState(
        stack(lambda w: w.door.angle),
        stack(lambda w: w.door.angular_rate),
        stack(lambda w: w.door.handle_offset_D),
    )
    return WorldState(robot, door, stack(lambda w: w.time))


def index_world(world: WorldState, idx) -> WorldState:
    """Select entries of a batched world (``idx`` may be an int, slice or mask)."""
    r, d = world.robot, world.door
    return WorldState(
        RobotState(r.position_W[idx], r.orientation_WB[idx], r.linear_velocity_B[idx],
                   r.angular_velocity_B[idx]),
        DoorState(d.angle[idx], d.angular_rate[idx], d.handle_offset_D[idx]),
        world.time[idx],
    )


def where_world(mask: NDArray[np.bool_], a: WorldState, b: WorldState) -> WorldState:
    """Entry-wise ``a if mask else b`` over the leading batch axis."""
    def pick(x, y):
        m = mask.reshape(mask.shape + (1,) * (x.ndim - mask.ndim))
        return np.where(m, x, y)

    ra, rb, da, db = a.robot, b.robot, a.door, b.door
    return WorldState(
        RobotState(pick(ra.position_W, rb.position_W), pick(ra.orientation_WB, rb.orientation_WB),
                   pick(ra.linear_velocity_B, rb.linear_velocity_B),
                   pick(ra.angular_velocity_B, rb.angular_velocity_B)),
        DoorState(pick(da.angle, db.angle), pick(da.angular_rate, db.angular_rate),
                  pick(da.handle_offset_D, db.handle_offset_D)),
        pick(a.time, b.time),
    )


# ----------------------------------------------------------------------------
# Rigid body
# ----------------------------------------------------------------------------

def gravity_wrench(orientation_WB: Array, config: GeometryConfig) -> Wrench:
    """Gravity acting on the body, expressed in the body frame."""
    g_W = _vec([0.0, 0.0, -config.robot_mass * GRAVITY])
    force = so3.matTvec(orientation_WB, np.broadcast_to(g_W, orientation_WB.shape[:-1]))
    return Wrench(force, np.zeros_like(force))


def coriolis_wrench(angular_velocity_B: Array, config: GeometryConfig) -> Wrench:
    w = _vec(angular_velocity_B)
    torque = so3.cross(w, so3.matvec(config.robot_inertia_B, w))
    return Wrench(np.zeros_like(torque), torque)


def step_free_body(robot: RobotState, applied: Wrench, config: GeometryConfig, dt: float,
                   check_finite: bool = True) -> RobotState:
    """Advance the floating body by ``dt`` under ``applied`` (body frame).

    Velocities are updated first. Translation is integrated with the mean of
    the old and new world-frame velocity, which is exact for the piecewise
    constant force held over a step; the attitude uses the exponential map of
    the updated angular velocity and is re-orthonormalized.
    """
    if not 0.0 < dt <= MAX_DT:
        raise ValueError(f"dt must be in (0, {MAX_DT}], got {dt}")
    R = robot.orientation_WB
    m = config.robot_mass

    gravity = gravity_wrench(R, config)
    coriolis = coriolis_wrench(robot.angular_velocity_B, config)

    # linear: m * R^T p_ddot = F_B + g_B, integrated in the world frame
    v_W = so3.matvec(R, robot.linear_velocity_B)
    acc_W = so3.matvec(R, applied.force_B + gravity.force_B) / m
    v_W_next = v_W + acc_W * dt
    p_next = robot.position_W + 0.5 * (v_W + v_W_next) * dt

    # angular: J w_dot + w x J w = tau
    w_dot = so3.matvec(config.inertia_inv, applied.torque_B - coriolis.torque_B)
    w_next = robot.angular_velocity_B + w_dot * dt
    R_next = so3.orthonormalize(so3.matmul(R, so3.exp_so3(w_next * dt)))

    out = RobotState(p_next, R_next, so3.matTvec(R_next, v_W_next), w_next)
    if check_finite and not (np.all(np.isfinite(p_next)) and np.all(np.isfinite(v_W_next))
                             and np.all(np.isfinite(w_next)) and np.all(np.isfinite(R_next))):
        raise NumericalBlowUp("non-finite robot state after integration step")
    return out


def robot_state_finite(robot: RobotState) -> NDArray[np.bool_]:
    return (np.all(np.isfinite(robot.position_W), axis=-1)
            & np.all(np.isfinite(robot.linear_velocity_B), axis=-1)
            & np.all(np.isfinite(robot.angular_velocity_B), axis=-1)
            & np.all(np.isfinite(robot.orientation_WB), axis=(-2, -1)))


# ----------------------------------------------------------------------------
# Door kinematics
# ----------------------------------------------------------------------------

def door_orientation(angle: Array, config: GeometryConfig) -> Array:
    """``R_WD``: the closed door frame turned by ``pi/2 - angle`` about the hinge."""
    angle = np.asarray(angle, dtype=np.float64)
    axis = np.broadcast_to(config.hinge_axis_W, angle.shape + (3,))
    return so3.matmul(so3.axis_angle(axis, HALF_PI - angle), config.closed_door_orientation_W)


def handle_frame(door: DoorState, config: GeometryConfig) -> tuple[Array, Array]:
    """World position and orientation ``(W p_d, R_WD)`` of the handle frame."""
    R_WD = door_orientation(door.angle, config)
    standoff = config.handle_rect[3]
    local = config.handle_center_on_door + _vec([-standoff, 0.0, 0.0]) + door.handle_offset_D
    return config.hinge_point_W + so3.matvec(R_WD, local), R_WD


def handle_segments(door: DoorState, config: GeometryConfig) -> Array:
    """Endpoints ``(..., 4, 2, 3)`` of the four handle bars in the world frame.

    Bar order: outer (robot side), top, door side, bottom.
    """
    p_d, R_WD = handle_frame(door, config)
    hx = 0.5 * config.handle_rect[0]
    hz = 0.5 * config.handle_rect[1]
    corners = _vec([[-hx, 0.0, -hz], [-hx, 0.0, hz], [hx, 0.0, hz], [hx, 0.0, -hz]])
    local = np.stack([corners, np.roll(corners, -1, axis=0)], axis=1)  # (4, 2, 3)
    world = np.einsum("...ij,kmj->...kmi", R_WD, local)
    return world + p_d[..., None, None, :]


def hook_center(robot: RobotState, config: GeometryConfig) -> Array:
    """World position of the hook frame H (middle of the hook cylinder)."""
    return robot.position_W + so3.matvec(robot.orientation_WB, config.hook_offset_B)


def hook_segment(robot: RobotState, config: GeometryConfig) -> Array:
    """Endpoints ``(..., 2, 3)`` of the hook capsule axis in the world frame."""
    c = hook_center(robot, config)
    half = config.hook_half_length * so3.matvec(robot.orientation_WB,
                                                np.broadcast_to(config.hook_axis_B, c.shape))
    return np.stack([c - half, c + half], axis=-2)


# ----------------------------------------------------------------------------
# Contact
# ----------------------------------------------------------------------------

# squared segment length below which a segment is treated as a point
DEGENERATE_SQ = 1e-30


def segment_closest_points(p0: Array, p1: Array, q0: Array, q1: Array,
                           eps: float = 1e-12) -> tuple[Array, Array]:
    """Closest points between segments ``[p0, p1]`` and ``[q0, q1]``.

    For parallel segments with overlapping projections the pair is taken at
    the middle of the overlap. ``eps`` is the relative parallelism tolerance;
    a segment counts as a point only below :data:`DEGENERATE_SQ` squared length.
    """
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = np.sum(d1 * d1, axis=-1)
    e = np.sum(d2 * d2, axis=-1)
    b = np.sum(d1 * d2, axis=-1)
    c = np.sum(d1 * r, axis=-1)
    f = np.sum(d2 * r, axis=-1)
    a_safe = np.where(a > DEGENERATE_SQ, a, 1.0)
    e_safe = np.where(e > DEGENERATE_SQ, e, 1.0)
    denom = a * e - b * b
    parallel = denom <= eps * np.maximum(a * e, eps)

    # general position
    s = np.clip((b * f - c * e) / np.where(parallel, 1.0, denom), 0.0, 1.0)
    t = (b * s + f) / e_safe
    s = np.where(t < 0.0, np.clip(-c / a_safe, 0.0, 1.0),
                 np.where(t > 1.0, np.clip((b - c) / a_safe, 0.0, 1.0), s))
    t = np.clip(t, 0.0, 1.0)

    # parallel: centre of the overlap of q's projection onto p's segment
    sq0 = -c / a_safe
    sq1 = (b - c) / a_safe
    lo = np.maximum(0.0, np.minimum(sq0, sq1))
    hi = np.minimum(1.0, np.maximum(sq0, sq1))
    s_par = np.where(np.maximum(sq0, sq1) < 0.0, 0.0,
                     np.where(np.minimum(sq0, sq1) > 1.0, 1.0, 0.5 * (lo + hi)))
    pa_par = p0 + s_par[..., None] * d1
    t_par = np.clip(np.sum((pa_par - q0) * d2, axis=-1) / e_safe, 0.0, 1.0)

    s = np.where(parallel, s_par, s)
    t = np.where(parallel, t_par, t)
    s = np.where(a > DEGENERATE_SQ, s, 0.0)
    t = np.where(e > DEGENERATE_SQ, t, 0.0)
    return p0 + s[..., None] * d1, q0 + t[..., None] * d2


def _fallback_normal(direction: Array) -> Array:
    """A unit vector perpendicular to ``direction`` (used for coincident axes)."""
    trial = np.where(np.abs(direction[..., :1]) < 0.9, _vec([1.0, 0.0, 0.0]), _vec([0.0, 1.0, 0.0]))
    n = so3.cross(direction, trial)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    return np.where(norm > 1e-12, n / np.where(norm > 1e-12, norm, 1.0), _vec([0.0, 0.0, 1.0]))


def capsule_capsule_distance(seg_a: Array, radius_a, seg_b: Array, radius_b
                             ) -> tuple[Array, tuple[Array, Array], Array]:
    """Signed surface distance between two capsules.

    Args:
        seg_a: ``(..., 2, 3)`` endpoints of capsule a's axis.
        radius_a: radius of capsule a.
        seg_b: ``(..., 2, 3)`` endpoints of capsule b's axis.
        radius_b: radius of capsule b.

    Returns:
        ``(distance, (point_a, point_b), normal)`` where the points are the
        closest points on the two axes, ``normal`` points from b towards a and
        a negative distance is a penetration depth.
    """
    seg_a = _vec(seg_a)
    seg_b = _vec(seg_b)
    pa, pb = segment_closest_points(seg_a[..., 0, :], seg_a[..., 1, :], seg_b[..., 0, :], seg_b[..., 1, :])
    delta = pa - pb
    gap = np.linalg.norm(delta, axis=-1)
    ok = gap > 1e-12
    normal = delta / np.where(ok, gap, 1.0)[..., None]
    if not np.all(ok):
        normal = np.where(ok[..., None], normal, _fallback_normal(seg_a[..., 1, :] - seg_a[..., 0, :]))
    return gap - radius_a - radius_b, (pa, pb), normal


@dataclass(frozen=True)
class ContactResult:
    """Per-bar contact quantities in the world frame (bar axis is ``-2``)."""

    force_on_robot_W: Array  # (..., 4, 3)
    points_W: Array  # (..., 4, 3)
    penetration: Array  # (..., 4)
    wrench_on_robot_B: Wrench
    hinge_torque: Array

    @property
    def force_on_door_W(self) -> Array:
        return -self.force_on_robot_W


def contact_details(world: WorldState, config: GeometryConfig) -> ContactResult:
    batch = world.batch_shape
    if len(batch) == 1:
        # broadphase: solve only the worlds whose hook is near the handle
        p_d, _ = handle_frame(world.door, config)
        near = np.linalg.norm(hook_center(world.robot, config) - p_d, axis=-1) < config.contact_reach
        if not np.all(near):
            force = np.zeros(batch + (4, 3))
            points = np.zeros(batch + (4, 3))
            pen = np.zeros(batch + (4,))
            f_B = np.zeros(batch + (3,))
            t_B = np.zeros(batch + (3,))
            hinge = np.zeros(batch)
            if np.any(near):
                sub = _contact_narrow(index_world(world, near), config)
                force[near], points[near], pen[near] = sub.force_on_robot_W, sub.points_W, sub.penetration
                f_B[near], t_B[near] = sub.wrench_on_robot_B.force_B, sub.wrench_on_robot_B.torque_B
                hinge[near] = sub.hinge_torque
            return ContactResult(force, points, pen, Wrench(f_B, t_B), hinge)
    return _contact_narrow(world, config)


def _contact_narrow(world: WorldState, config: GeometryConfig) -> ContactResult:
    robot, door = world.robot, world.door
    R = robot.orientation_WB
    hook = hook_segment(robot, config)
    bars = handle_segments(door, config)
    dist, (pa, pb), normal = capsule_capsule_distance(hook[..., None, :, :], config.hook_radius,
                                                      bars, config.handle_rect[2])
    penetration = np.maximum(-dist, 0.0)
    # contact point halfway between the two surfaces
    point = 0.5 * ((pa - config.hook_radius * normal) + (pb + config.handle_rect[2] * normal))

    v_W = so3.matvec(R, robot.linear_velocity_B)
    w_W = so3.matvec(R, robot.angular_velocity_B)
    lever_robot = point - robot.position_W[..., None, :]
    v_robot = v_W[..., None, :] + so3.cross(w_W[..., None, :], lever_robot)
    # the door turns by (pi/2 - angle) about the hinge axis
    w_door = -door.angular_rate[..., None] * config.hinge_axis_W
    lever_door = point - config.hinge_point_W
    v_door = so3.cross(w_door[..., None, :], lever_door)
    v_rel = v_robot - v_door
    v_n = np.sum(v_rel * normal, axis=-1)
    f_n = np.where(penetration > 0.0,
                   np.maximum(0.0, config.contact_stiffness * penetration - config.contact_damping * v_n),
                   0.0)
    v_t = v_rel - v_n[..., None] * normal
    speed_t = np.linalg.norm(v_t, axis=-1)
    f_t_mag = np.minimum(config.friction_coefficient * f_n, config.contact_damping * speed_t)
    t_dir = v_t / np.where(speed_t > 1e-12, speed_t, 1.0)[..., None]
    force = f_n[..., None] * normal - f_t_mag[..., None] * t_dir

    total_force_W = force.sum(axis=-2)
    total_moment_W = so3.cross(lever_robot, force).sum(axis=-2)
    wrench = Wrench(so3.matTvec(R, total_force_W), so3.matTvec(R, total_moment_W))
    # generalized force on the angle coordinate: dx/dangle = -axis x lever
    moment_on_door = so3.cross(lever_door, -force).sum(axis=-2)
    hinge_torque = -np.sum(moment_on_door * config.hinge_axis_W, axis=-1)
    return ContactResult(force, point, penetration, wrench, hinge_torque)


def contact_forces(world: WorldState, config: GeometryConfig) -> tuple[Wrench, Array]:
    """Hook/handle penalty contact.

    Returns the body-frame wrench on the robot (about the body origin) and the
    generalized torque on the door angle coordinate. A positive hinge torque
    drives the angle up, i.e. towards closed.
    """
    result = contact_details(world, config)
    return result.wrench_on_robot_B, result.hinge_torque


# ----------------------------------------------------------------------------
# Door and world stepping
# ----------------------------------------------------------------------------

def step_door(door: DoorState, hinge_torque, config: GeometryConfig, dt: float) -> DoorState:
    if not 0.0 < dt <= MAX_DT:
        raise ValueError(f"dt must be in (0, {MAX_DT}], got {dt}")
    acc = (hinge_torque - config.door_viscous_damping * door.angular_rate) / config.door_inertia_about_hinge
    rate = door.angular_rate + acc * dt
    angle = door.angle + rate * dt
    at_stop = (angle <= 0.0) | (angle >= HALF_PI)
    angle = np.clip(angle, 0.0, HALF_PI)
    rate = np.where(at_stop, 0.0, rate)
    return DoorState(np.asarray(angle, dtype=np.float64), np.asarray(rate, dtype=np.float64),
                     door.handle_offset_D)


def step_world(world: WorldState, applied: Wrench, config: GeometryConfig, dt: float,
               check_finite: bool = True) -> WorldState:
    """One physics substep: contact, then robot, then door."""
    contact_wrench, hinge_torque = contact_forces(world, config)
    robot = step_free_body(world.robot, applied + contact_wrench, config, dt, check_finite=check_finite)
    door = step_door(world.door, hinge_torque, config, dt)
    return WorldState(robot, door, world.time + dt)


def with_door(world: WorldState, **changes) -> WorldState:
    return replace(world, door=replace(world.door, **changes))
