"""Compiled batch stepping for the hot loops (training rollouts and MPPI).

These kernels re-state the numpy reference in :mod:`omav_door.world`,
:mod:`omav_door.control` and :mod:`omav_door.env` as scalar loops compiled
with numba. ``tests/test_kernels.py`` pins them to the reference.

Parameters travel as flat float64 vectors built by :func:`pack_geometry`,
:func:`pack_gains` and :func:`pack_episode`.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from omav_door.world import DEGENERATE_SQ, GRAVITY, GeometryConfig

# geometry vector layout
G_MASS = 0
G_J = 1  # 9 entries, row-major
G_JINV = 10  # 9 entries
G_HOOK_OFF = 19
G_HOOK_AXIS = 22
G_HOOK_HALF = 25
G_HOOK_R = 26
G_DOOR_I = 27
G_HINGE_AXIS = 28
G_HINGE_POINT = 31
G_HANDLE_CENTER = 34
G_HANDLE_W = 37
G_HANDLE_H = 38
G_BAR_R = 39
G_STANDOFF = 40
G_DOOR_DAMP = 41
G_K = 42
G_C = 43
G_MU = 44
G_CLOSED = 45  # 9 entries, row-major
G_SIZE = 54

# episode vector layout
E_SAT = 0
E_MAX_TRANS = 1
E_MAX_ROT = 2
E_ALPHA_TARGET = 3
E_H_THRESH = 4
E_D_THRESH = 5
E_SIZE = 6


def pack_geometry(config: GeometryConfig) -> np.ndarray:
    p = np.zeros(G_SIZE)
    p[G_MASS] = config.robot_mass
    p[G_J:G_J + 9] = config.robot_inertia_B.reshape(9)
    p[G_JINV:G_JINV + 9] = config.inertia_inv.reshape(9)
    p[G_HOOK_OFF:G_HOOK_OFF + 3] = config.hook_offset_B
    p[G_HOOK_AXIS:G_HOOK_AXIS + 3] = config.hook_axis_B
    p[G_HOOK_HALF] = config.hook_half_length
    p[G_HOOK_R] = config.hook_radius
    p[G_DOOR_I] = config.door_inertia_about_hinge
    p[G_HINGE_AXIS:G_HINGE_AXIS + 3] = config.hinge_axis_W
    p[G_HINGE_POINT:G_HINGE_POINT + 3] = config.hinge_point_W
    p[G_HANDLE_CENTER:G_HANDLE_CENTER + 3] = config.handle_center_on_door
    p[G_HANDLE_W], p[G_HANDLE_H], p[G_BAR_R], p[G_STANDOFF] = config.handle_rect
    p[G_DOOR_DAMP] = config.door_viscous_damping
    p[G_K] = config.contact_stiffness
    p[G_C] = config.contact_damping
    p[G_MU] = config.friction_coefficient
    p[G_CLOSED:G_CLOSED + 9] = config.closed_door_orientation_W.reshape(9)
    return p


def pack_gains(gains) -> np.ndarray:
    return np.array([gains.kp_pos, gains.kd_pos, gains.kp_rot, gains.kd_rot, gains.max_force, gains.max_torque])


def pack_episode(episode) -> np.ndarray:
    e = np.zeros(E_SIZE)
    e[E_SAT] = 1.0 if episode.saturation_enabled else 0.0
    e[E_MAX_TRANS] = episode.max_translation
    e[E_MAX_ROT] = episode.max_rotation
    e[E_ALPHA_TARGET] = episode.alpha_target
    e[E_H_THRESH] = episode.delta_h_thresh
    e[E_D_THRESH] = episode.delta_d_thresh
    return e


# ----------------------------------------------------------------------------
# small linear algebra
# ----------------------------------------------------------------------------

@njit(cache=True)
def _mv(M, v, out):
    for i in range(3):
        out[i] = M[i, 0] * v[0] + M[i, 1] * v[1] + M[i, 2] * v[2]


@njit(cache=True)
def _mtv(M, v, out):
    for i in range(3):
        out[i] = M[0, i] * v[0] + M[1, i] * v[1] + M[2, i] * v[2]


@njit(cache=True)
def _mm(A, B, out):
    for i in range(3):
        for j in range(3):
            out[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]


@njit(cache=True)
def _mtm(A, B, out):
    for i in range(3):
        for j in range(3):
            out[i, j] = A[0, i] * B[0, j] + A[1, i] * B[1, j] + A[2, i] * B[2, j]


@njit(cache=True)
def _cross(a, b, out):
    x = a[1] * b[2] - a[2] * b[1]
    y = a[2] * b[0] - a[0] * b[2]
    z = a[0] * b[1] - a[1] * b[0]
    out[0], out[1], out[2] = x, y, z


@njit(cache=True)
def _exp(rx, ry, rz, out):
    theta = math.sqrt(rx * rx + ry * ry + rz * rz)
    if theta < 1e-6:
        a = 1.0 - theta * theta / 6.0
        b = 0.5 - theta * theta / 24.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / (theta * theta)
    # I + a K + b K^2 with K = hat(r); K^2 = r r^T - |r|^2 I
    t2 = theta * theta
    out[0, 0] = 1.0 + b * (rx * rx - t2)
    out[1, 1] = 1.0 + b * (ry * ry - t2)
    out[2, 2] = 1.0 + b * (rz * rz - t2)
    out[0, 1] = -a * rz + b * rx * ry
    out[1, 0] = a * rz + b * rx * ry
    out[0, 2] = a * ry + b * rx * rz
    out[2, 0] = -a * ry + b * rx * rz
    out[1, 2] = -a * rx + b * ry * rz
    out[2, 1] = a * rx + b * ry * rz


@njit(cache=True)
def _angle(R):
    c = 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)
    if c > 1.0:
        c = 1.0
    elif c < -1.0:
        c = -1.0
    return math.acos(c)


@njit(cache=True)
def _log(R, out):
    theta = _angle(R)
    sx = R[2, 1] - R[1, 2]
    sy = R[0, 2] - R[2, 0]
    sz = R[1, 0] - R[0, 1]
    if theta > math.pi - 1e-6:
        best = 0
        for i in range(1, 3):
            if R[i, i] > R[best, best]:
                best = i
        cx = 0.5 * (R[0, best] + (1.0 if best == 0 else 0.0))
        cy = 0.5 * (R[1, best] + (1.0 if best == 1 else 0.0))
        cz = 0.5 * (R[2, best] + (1.0 if best == 2 else 0.0))
        n = math.sqrt(cx * cx + cy * cy + cz * cz)
        out[0], out[1], out[2] = cx / n * theta, cy / n * theta, cz / n * theta
        return
    if theta < 1e-6:
        scale = 0.5 + theta * theta / 12.0
    else:
        scale = theta / (2.0 * math.sin(theta))
    out[0], out[1], out[2] = scale * sx, scale * sy, scale * sz


@njit(cache=True)
def _orthonormalize(R):
    n0 = math.sqrt(R[0, 0] ** 2 + R[1, 0] ** 2 + R[2, 0] ** 2)
    e00, e01, e02 = R[0, 0] / n0, R[1, 0] / n0, R[2, 0] / n0
    d = e00 * R[0, 1] + e01 * R[1, 1] + e02 * R[2, 1]
    u0, u1, u2 = R[0, 1] - d * e00, R[1, 1] - d * e01, R[2, 1] - d * e02
    n1 = math.sqrt(u0 * u0 + u1 * u1 + u2 * u2)
    e10, e11, e12 = u0 / n1, u1 / n1, u2 / n1
    R[0, 0], R[1, 0], R[2, 0] = e00, e01, e02
    R[0, 1], R[1, 1], R[2, 1] = e10, e11, e12
    R[0, 2] = e01 * e12 - e02 * e11
    R[1, 2] = e02 * e10 - e00 * e12
    R[2, 2] = e00 * e11 - e01 * e10


def _clip(x, lo, hi):
    return lo if x < lo else (hi if x > hi else x)


_clip = njit(cache=True)(_clip)


# ----------------------------------------------------------------------------
# door and contact
# ----------------------------------------------------------------------------

@njit(cache=True)
def _door_frame(alpha, offset, P, R_WD, p_d):
    ax, ay, az = P[G_HINGE_AXIS], P[G_HINGE_AXIS + 1], P[G_HINGE_AXIS + 2]
    th = 0.5 * math.pi - alpha
    turn = np.empty((3, 3))
    _exp(ax * th, ay * th, az * th, turn)
    _mm(turn, P[G_CLOSED:G_CLOSED + 9].reshape(3, 3), R_WD)
    lx = P[G_HANDLE_CENTER] - P[G_STANDOFF] + offset[0]
    ly = P[G_HANDLE_CENTER + 1] + offset[1]
    lz = P[G_HANDLE_CENTER + 2] + offset[2]
    for i in range(3):
        p_d[i] = P[G_HINGE_POINT + i] + R_WD[i, 0] * lx + R_WD[i, 1] * ly + R_WD[i, 2] * lz


@njit(cache=True)
def _closest(p0, p1, q0, q1, pa, pb):
    eps = 1e-12
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = d1[0] * d1[0] + d1[1] * d1[1] + d1[2] * d1[2]
    e = d2[0] * d2[0] + d2[1] * d2[1] + d2[2] * d2[2]
    b = d1[0] * d2[0] + d1[1] * d2[1] + d1[2] * d2[2]
    c = d1[0] * r[0] + d1[1] * r[1] + d1[2] * r[2]
    f = d2[0] * r[0] + d2[1] * r[1] + d2[2] * r[2]
    a_safe = a if a > DEGENERATE_SQ else 1.0
    e_safe = e if e > DEGENERATE_SQ else 1.0
    denom = a * e - b * b
    if denom <= eps * max(a * e, eps):
        sq0 = -c / a_safe
        sq1 = (b - c) / a_safe
        lo = max(0.0, min(sq0, sq1))
        hi = min(1.0, max(sq0, sq1))
        if max(sq0, sq1) < 0.0:
            s = 0.0
        elif min(sq0, sq1) > 1.0:
            s = 1.0
        else:
            s = 0.5 * (lo + hi)
        t = 0.0
        for i in range(3):
            t += (p0[i] + s * d1[i] - q0[i]) * d2[i]
        t = _clip(t / e_safe, 0.0, 1.0)
    else:
        s = _clip((b * f - c * e) / denom, 0.0, 1.0)
        t = (b * s + f) / e_safe
        if t < 0.0:
            s = _clip(-c / a_safe, 0.0, 1.0)
        elif t > 1.0:
            s = _clip((b - c) / a_safe, 0.0, 1.0)
        t = _clip(t, 0.0, 1.0)
    if a <= DEGENERATE_SQ:
        s = 0.0
    if e <= DEGENERATE_SQ:
        t = 0.0
    for i in range(3):
        pa[i] = p0[i] + s * d1[i]
        pb[i] = q0[i] + t * d2[i]


@njit(cache=True)
def _contact(pos, R, v, w, alpha, rate, offset, P, R_WD, p_d, f_B, t_B):
    """Contact wrench on the robot (body frame) and generalized hinge torque."""
    f_B[:] = 0.0
    t_B[:] = 0.0
    hc = np.empty(3)
    _mv(R, P[G_HOOK_OFF:G_HOOK_OFF + 3], hc)
    for i in range(3):
        hc[i] += pos[i]
    width, height, bar_r = P[G_HANDLE_W], P[G_HANDLE_H], P[G_BAR_R]
    hook_r, half = P[G_HOOK_R], P[G_HOOK_HALF]
    reach = half + hook_r + 0.5 * math.hypot(width, height) + bar_r + 1e-3
    dx, dy, dz = hc[0] - p_d[0], hc[1] - p_d[1], hc[2] - p_d[2]
    if math.sqrt(dx * dx + dy * dy + dz * dz) >= reach:
        return 0.0
    axis = np.empty(3)
    _mv(R, P[G_HOOK_AXIS:G_HOOK_AXIS + 3], axis)
    h0 = hc - half * axis
    h1 = hc + half * axis
    hx, hz = 0.5 * width, 0.5 * height
    corners = np.array([[-hx, 0.0, -hz], [-hx, 0.0, hz], [hx, 0.0, hz], [hx, 0.0, -hz]])
    cw = np.empty((4, 3))
    for k in range(4):
        for i in range(3):
            cw[k, i] = p_d[i] + R_WD[i, 0] * corners[k, 0] + R_WD[i, 1] * corners[k, 1] + R_WD[i, 2] * corners[k, 2]
    v_W = np.empty(3)
    w_W = np.empty(3)
    _mv(R, v, v_W)
    _mv(R, w, w_W)
    hinge_axis = P[G_HINGE_AXIS:G_HINGE_AXIS + 3]
    w_door = -rate * hinge_axis
    pa = np.empty(3)
    pb = np.empty(3)
    n = np.empty(3)
    tmp = np.empty(3)
    lever = np.empty(3)
    lever_d = np.empty(3)
    F_W = np.zeros(3)
    M_W = np.zeros(3)
    hinge = 0.0
    for k in range(4):
        q0 = cw[k]
        q1 = cw[(k + 1) % 4]
        _closest(h0, h1, q0, q1, pa, pb)
        delta = pa - pb
        gap = math.sqrt(delta[0] ** 2 + delta[1] ** 2 + delta[2] ** 2)
        pen = -(gap - hook_r - bar_r)
        if pen <= 0.0:
            continue
        if gap > 1e-12:
            for i in range(3):
                n[i] = delta[i] / gap
        else:
            d = h1 - h0
            trial = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
            _cross(d, trial, n)
            nn = math.sqrt(n[0] ** 2 + n[1] ** 2 + n[2] ** 2)
            if nn > 1e-12:
                for i in range(3):
                    n[i] /= nn
            else:
                n[0], n[1], n[2] = 0.0, 0.0, 1.0
        for i in range(3):
            tmp[i] = 0.5 * ((pa[i] - hook_r * n[i]) + (pb[i] + bar_r * n[i]))  # contact point
            lever[i] = tmp[i] - pos[i]
            lever_d[i] = tmp[i] - P[G_HINGE_POINT + i]
        vr = np.empty(3)
        vd = np.empty(3)
        _cross(w_W, lever, vr)
        _cross(w_door, lever_d, vd)
        v_rel = v_W + vr - vd
        v_n = v_rel[0] * n[0] + v_rel[1] * n[1] + v_rel[2] * n[2]
        f_n = max(0.0, P[G_K] * pen - P[G_C] * v_n)
        v_t = v_rel - v_n * n
        speed = math.sqrt(v_t[0] ** 2 + v_t[1] ** 2 + v_t[2] ** 2)
        f_t = min(P[G_MU] * f_n, P[G_C] * speed)
        force = np.empty(3)
        for i in range(3):
            t_dir = v_t[i] / speed if speed > 1e-12 else 0.0
            force[i] = f_n * n[i] - f_t * t_dir
        m = np.empty(3)
        _cross(lever, force, m)
        md = np.empty(3)
        _cross(lever_d, -force, md)
        for i in range(3):
            F_W[i] += force[i]
            M_W[i] += m[i]
        hinge -= md[0] * hinge_axis[0] + md[1] * hinge_axis[1] + md[2] * hinge_axis[2]
    _mtv(R, F_W, f_B)
    _mtv(R, M_W, t_B)
    return hinge


# ----------------------------------------------------------------------------
# controller and integration
# ----------------------------------------------------------------------------

@njit(cache=True)
def _pose_ref(pos, R, offset_D, R_corr, R_WD, E, ref_pos, ref_R):
    ox, oy, oz = offset_D[0], offset_D[1], offset_D[2]
    if E[E_SAT] > 0.5:
        norm = math.sqrt(ox * ox + oy * oy + oz * oz)
        scale = min(1.0, E[E_MAX_TRANS] / max(norm, 1e-300))
        ox, oy, oz = ox * scale, oy * scale, oz * scale
    for i in range(3):
        ref_pos[i] = pos[i] + R_WD[i, 0] * ox + R_WD[i, 1] * oy + R_WD[i, 2] * oz
    _mm(R_WD, R_corr, ref_R)
    if E[E_SAT] > 0.5:
        rel = np.empty((3, 3))
        _mtm(R, ref_R, rel)
        phi = np.empty(3)
        _log(rel, phi)
        ang = math.sqrt(phi[0] ** 2 + phi[1] ** 2 + phi[2] ** 2)
        scale = min(1.0, E[E_MAX_ROT] / max(ang, 1e-300))
        _exp(phi[0] * scale, phi[1] * scale, phi[2] * scale, rel)
        _mm(R, rel, ref_R)


@njit(cache=True)
def _controller(pos, R, v, w, ref_pos, ref_R, P, Gn, f, t):
    err = ref_pos - pos
    eb = np.empty(3)
    _mtv(R, err, eb)
    mg = P[G_MASS] * GRAVITY
    for i in range(3):
        f[i] = _clip(Gn[0] * eb[i] - Gn[1] * v[i], -Gn[4], Gn[4]) + mg * R[2, i]
    m = np.empty((3, 3))
    _mtm(ref_R, R, m)
    e = np.empty(3)
    e[0] = 0.5 * (m[2, 1] - m[1, 2])
    e[1] = 0.5 * (m[0, 2] - m[2, 0])
    e[2] = 0.5 * (m[1, 0] - m[0, 1])
    for i in range(3):
        t[i] = _clip(-Gn[2] * e[i] - Gn[3] * w[i], -Gn[5], Gn[5])


@njit(cache=True)
def _integrate(pos, R, v, w, alpha, rate, offset, f_app, t_app, P, dt, R_WD, p_d):
    """One substep of contact + body + door; returns the new (alpha, rate)."""
    fc = np.empty(3)
    tc = np.empty(3)
    hinge = _contact(pos, R, v, w, alpha, rate, offset, P, R_WD, p_d, fc, tc)
    m = P[G_MASS]
    F = f_app + fc
    T = t_app + tc
    # gravity in body frame: R^T (0, 0, -m g)
    for i in range(3):
        F[i] -= m * GRAVITY * R[2, i]
    vW = np.empty(3)
    _mv(R, v, vW)
    aW = np.empty(3)
    _mv(R, F, aW)
    vW_next = vW + aW / m * dt
    for i in range(3):
        pos[i] += 0.5 * (vW[i] + vW_next[i]) * dt
    J = P[G_J:G_J + 9].reshape(3, 3)
    Jinv = P[G_JINV:G_JINV + 9].reshape(3, 3)
    Jw = np.empty(3)
    _mv(J, w, Jw)
    cor = np.empty(3)
    _cross(w, Jw, cor)
    wd = np.empty(3)
    _mv(Jinv, T - cor, wd)
    for i in range(3):
        w[i] += wd[i] * dt
    dR = np.empty((3, 3))
    _exp(w[0] * dt, w[1] * dt, w[2] * dt, dR)
    Rn = np.empty((3, 3))
    _mm(R, dR, Rn)
    _orthonormalize(Rn)
    R[:, :] = Rn
    _mtv(R, vW_next, v)
    acc = (hinge - P[G_DOOR_DAMP] * rate) / P[G_DOOR_I]
    rate_n = rate + acc * dt
    alpha_n = alpha + rate_n * dt
    if alpha_n <= 0.0 or alpha_n >= 0.5 * math.pi:
        rate_n = 0.0
    alpha_n = _clip(alpha_n, 0.0, 0.5 * math.pi)
    return alpha_n, rate_n


@njit(cache=True)
def advance_batch(pos, R, v, w, alpha, rate, offset, ref_pos, ref_R, n_sub, dt, P, Gn, wrench_out):
    """Step every world ``n_sub`` times towards a fixed pose reference, in place.

    ``wrench_out`` receives the controller wrench of the last substep.
    """
    n = pos.shape[0]
    R_WD = np.empty((3, 3))
    p_d = np.empty(3)
    f = np.empty(3)
    t = np.empty(3)
    for b in range(n):
        for _ in range(n_sub):
            _door_frame(alpha[b], offset[b], P, R_WD, p_d)
            _controller(pos[b], R[b], v[b], w[b], ref_pos[b], ref_R[b], P, Gn, f, t)
            alpha[b], rate[b] = _integrate(pos[b], R[b], v[b], w[b], alpha[b], rate[b], offset[b],
                                           f, t, P, dt, R_WD, p_d)
        for i in range(3):
            wrench_out[b, i] = f[i]
            wrench_out[b, 3 + i] = t[i]


@njit(cache=True)
def _finite(pos, R, v, w, alpha):
    for i in range(3):
        if not (math.isfinite(pos[i]) and math.isfinite(v[i]) and math.isfinite(w[i])):
            return False
        for j in range(3):
            if not math.isfinite(R[i, j]):
                return False
    return math.isfinite(alpha)


@njit(cache=True)
def _weighted_reward(pos, R, v, w, alpha, offset, f, t, P, E, weights):
    R_WD = np.empty((3, 3))
    p_d = np.empty(3)
    _door_frame(alpha, offset, P, R_WD, p_d)
    hc = np.empty(3)
    _mv(R, P[G_HOOK_OFF:G_HOOK_OFF + 3], hc)
    d = hc + pos - p_d
    dist = math.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2)
    R_BD = np.empty((3, 3))
    _mtm(R, R_WD, R_BD)
    theta = _angle(R_BD)
    door_err = abs(alpha - E[E_ALPHA_TARGET])
    r = 0.0
    r += weights[0] * -dist
    r += weights[1] * (-1.0 if dist > E[E_H_THRESH] else 0.0)
    r += weights[2] * -theta
    r += weights[3] * -door_err
    r += weights[4] * (-1.0 if door_err > E[E_D_THRESH] else 0.0)
    r += weights[5] * -(v[0] ** 2 + v[1] ** 2 + v[2] ** 2)
    r += weights[6] * -(w[0] ** 2 + w[1] ** 2 + w[2] ** 2)
    r += weights[7] * -(f[0] ** 2 + f[1] ** 2 + f[2] ** 2 + t[0] ** 2 + t[1] ** 2 + t[2] ** 2)
    return r


@njit(cache=True)
def rollout_costs(pos0, R0, v0, w0, alpha0, rate0, offset0, seqs, n_sub, dt, P, Gn, E, weights,
                  terminal_weight, blowup_cost):
    """MPPI rollout costs for sequences ``seqs`` of shape ``(K, H, 6)``."""
    k_count, horizon = seqs.shape[0], seqs.shape[1]
    costs = np.empty(k_count)
    R_WD = np.empty((3, 3))
    p_d = np.empty(3)
    ref_pos = np.empty(3)
    ref_R = np.empty((3, 3))
    R_corr = np.empty((3, 3))
    f = np.zeros(3)
    t = np.zeros(3)
    for k in range(k_count):
        pos = pos0.copy()
        R = R0.copy()
        v = v0.copy()
        w = w0.copy()
        alpha = alpha0
        rate = rate0
        cost = 0.0
        ok = True
        for h in range(horizon):
            u = seqs[k, h]
            _exp(u[3], u[4], u[5], R_corr)
            for _ in range(n_sub):
                _door_frame(alpha, offset0, P, R_WD, p_d)
                _pose_ref(pos, R, u[0:3], R_corr, R_WD, E, ref_pos, ref_R)
                _controller(pos, R, v, w, ref_pos, ref_R, P, Gn, f, t)
                alpha, rate = _integrate(pos, R, v, w, alpha, rate, offset0, f, t, P, dt, R_WD, p_d)
            if not _finite(pos, R, v, w, alpha):
                ok = False
                break
            cost -= _weighted_reward(pos, R, v, w, alpha, offset0, f, t, P, E, weights)
        cost += terminal_weight * abs(alpha - E[E_ALPHA_TARGET]) * horizon
        costs[k] = cost if ok and math.isfinite(cost) else blowup_cost
    return costs


def advance_world(world, ref, gains, config: GeometryConfig, dt: float, n_sub: int):
    """``n_sub`` substeps of :func:`advance_batch` on a :class:`WorldState`.

    Returns ``(next_world, last controller wrench)``; non-finite states are
    passed through for the caller to handle.
    """
    from omav_door.world import DoorState, RobotState, WorldState, Wrench

    batch = world.batch_shape
    n = int(np.prod(batch)) if batch else 1

    def flat(x, tail):
        return np.array(np.broadcast_to(x, batch + tail), dtype=np.float64).reshape((n,) + tail)

    r, d = world.robot, world.door
    pos, R = flat(r.position_W, (3,)), flat(r.orientation_WB, (3, 3))
    v, w = flat(r.linear_velocity_B, (3,)), flat(r.angular_velocity_B, (3,))
    alpha, rate = flat(d.angle, ()), flat(d.angular_rate, ())
    offset = flat(d.handle_offset_D, (3,))
    wrench = np.zeros((n, 6))
    with np.errstate(all="ignore"):
        advance_batch(pos, R, v, w, alpha, rate, offset, flat(ref.position_W_ref, (3,)),
                      flat(ref.orientation_WB_ref, (3, 3)), n_sub, dt, pack_geometry(config),
                      pack_gains(gains), wrench)
    time = world.time
    for _ in range(n_sub):
        time = time + dt
    robot = RobotState(pos.reshape(batch + (3,)), R.reshape(batch + (3, 3)), v.reshape(batch + (3,)),
                       w.reshape(batch + (3,)))
    door = DoorState(alpha.reshape(batch), rate.reshape(batch), d.handle_offset_D)
    wrench = wrench.reshape(batch + (6,))
    return WorldState(robot, door, time), Wrench(wrench[..., :3], wrench[..., 3:])
