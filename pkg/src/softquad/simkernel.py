"""Batched articulated rigid-body stepping kernel.

All hot math lives here as nopython numba, float64 throughout, no fastmath
(bitwise determinism matters more than the last 20% of speed). The batch
entry point parallelizes over environments with no cross-environment data,
so results are independent of thread count and scheduling.

Per substep and per environment:

1. forward kinematics down the tree (world rotations, pivots, velocities),
2. velocity-product (bias) accelerations with qdd = 0,
3. joint-space mass matrix and generalized force vector via body Jacobians
   (each body touches at most 6 base dofs + its ancestor joints),
4. penalty ground contacts (tip spheres, proximal-segment midpoints, base
   corners) with regularized Coulomb friction,
5. pinning of locked joints / fixed base, Cholesky solve,
6. semi-implicit Euler: velocities first, then positions; quaternion via the
   exponential map on the new angular velocity; hard joint-limit clamp.

State is packed per env as
``[pos(3), quat(4 wxyz), linvel(3), angvel_world(3), q(nj), qd(nj), time]``.

Substep accumulators feed the control layer: mean actuator power
(positive work only), mean sum of squared torques, first-touchdown vertical
tip speeds, tip contact flags, and a non-tip contact count.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

F8 = np.float64

# ---------------------------------------------------------------- small math


@njit(inline="always", cache=True)
def _quat_to_mat(qw, qx, qy, qz, R, r0):
    R[r0, 0, 0] = 1.0 - 2.0 * (qy * qy + qz * qz)
    R[r0, 0, 1] = 2.0 * (qx * qy - qw * qz)
    R[r0, 0, 2] = 2.0 * (qx * qz + qw * qy)
    R[r0, 1, 0] = 2.0 * (qx * qy + qw * qz)
    R[r0, 1, 1] = 1.0 - 2.0 * (qx * qx + qz * qz)
    R[r0, 1, 2] = 2.0 * (qy * qz - qw * qx)
    R[r0, 2, 0] = 2.0 * (qx * qz - qw * qy)
    R[r0, 2, 1] = 2.0 * (qy * qz + qw * qx)
    R[r0, 2, 2] = 1.0 - 2.0 * (qx * qx + qy * qy)


@njit(inline="always", cache=True)
def _rot_axis_angle(ux, uy, uz, ang, A):
    # Rodrigues for a unit axis
    c = np.cos(ang)
    s = np.sin(ang)
    t = 1.0 - c
    A[0, 0] = c + ux * ux * t
    A[0, 1] = ux * uy * t - uz * s
    A[0, 2] = ux * uz * t + uy * s
    A[1, 0] = ux * uy * t + uz * s
    A[1, 1] = c + uy * uy * t
    A[1, 2] = uy * uz * t - ux * s
    A[2, 0] = ux * uz * t - uy * s
    A[2, 1] = uy * uz * t + ux * s
    A[2, 2] = c + uz * uz * t


@njit(cache=True)
def _chol_factor(M, n):
    """In-place lower Cholesky of symmetric M. False if a pivot is <= 0."""
    for i in range(n):
        for j in range(i, n):
            s = M[i, j]
            for k in range(i):
                s -= M[i, k] * M[j, k]
            if i == j:
                if s <= 0.0:
                    return False
                M[i, i] = np.sqrt(s)
            else:
                M[j, i] = s / M[i, i]
    return True


@njit(cache=True)
def _chol_substitute(M, b, n):
    """Solve L L^T x = b in place given the factored M."""
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= M[i, k] * b[k]
        b[i] = s / M[i, i]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, n):
            s -= M[k, i] * b[k]
        b[i] = s / M[i, i]


@njit(cache=True)
def _ground_contact(
    e,
    b,
    px,
    py,
    pz,
    r,
    xw,
    vw,
    ww,
    aw,
    anc_joints,
    anc_count,
    base_fixed,
    locked,
    M,
    Q,
    jrow,
    tmp,
    mu_e,
    kn_e,
    cn_e,
    eps_e,
    dt,
    want_energy,
):
    """Penalty force for one sphere sample (center at p, radius r) on body b.

    Applies the wrench into Q and returns (penetration, normal speed at the
    deepest point, spring energy when requested). The normal force is
    clamped to [0, 2*kn*pen] so that the explicit damper can never exceed
    the spring (impact stability; statics unchanged).

    Friction is the regularized Coulomb law integrated semi-implicitly
    along the slip direction: with the articulated effective mass
    m_eff = 1/(J M^-1 J^T) (M comes in factored), the post-substep slip u'
    solves u' = u - (dt/m_eff) mu fn u'/(u'+eps), a scalar quadratic. This
    recovers the continuous law when m_eff is large or dt small, and for
    light links it stops, never reverses, the slip within the substep,
    which kills the explicit-friction chatter instability.
    """
    pen = r - pz
    if pen <= 0.0:
        return pen, 0.0, 0.0
    ndof = Q.shape[0]
    dx = px - xw[b, 0]
    dy = py - xw[b, 1]
    dz = pz - r - xw[b, 2]
    vx = vw[b, 0] + ww[b, 1] * dz - ww[b, 2] * dy
    vy = vw[b, 1] + ww[b, 2] * dx - ww[b, 0] * dz
    vz = vw[b, 2] + ww[b, 0] * dy - ww[b, 1] * dx
    fn = kn_e * pen - cn_e * vz
    if fn < 0.0:
        fn = 0.0
    elif fn > 2.0 * kn_e * pen:
        fn = 2.0 * kn_e * pen
    vt = np.sqrt(vx * vx + vy * vy)
    fx = 0.0
    fy = 0.0
    if vt > 0.0 and mu_e * fn > 0.0:
        tx = vx / vt
        ty = vy / vt
        # Jacobian row of the contact point along the slip direction
        for i in range(ndof):
            jrow[i] = 0.0
        if not base_fixed:
            jrow[0] = tx
            jrow[1] = ty
            ax_ = px - xw[0, 0]
            ay_ = py - xw[0, 1]
            az_ = pz - r - xw[0, 2]
            # ((p - x0) x t) dotted into each rotational axis
            jrow[3] = -az_ * ty
            jrow[4] = az_ * tx
            jrow[5] = ax_ * ty - ay_ * tx
        for u in range(anc_count[b]):
            j = anc_joints[b, u]
            if locked[j]:
                continue
            rx = px - xw[j + 1, 0]
            ry = py - xw[j + 1, 1]
            rz = pz - r - xw[j + 1, 2]
            cxx = -rz * ty
            cyy = rz * tx
            czz = rx * ty - ry * tx
            jrow[6 + j] = aw[j, 0] * cxx + aw[j, 1] * cyy + aw[j, 2] * czz
        inv_meff = 0.0
        for i in range(ndof):
            tmp[i] = jrow[i]
        _chol_substitute(M, tmp, ndof)
        for i in range(ndof):
            inv_meff += jrow[i] * tmp[i]
        if inv_meff > 1e-12:
            k_imp = mu_e * fn * dt * inv_meff
            a_ = eps_e + k_imp - vt
            u_post = 0.5 * (-a_ + np.sqrt(a_ * a_ + 4.0 * eps_e * vt))
            fmag = (vt - u_post) / (dt * inv_meff)
        else:
            fmag = mu_e * fn * vt / (vt + eps_e)
        fx = -fmag * tx
        fy = -fmag * ty
    espring = 0.5 * kn_e * pen * pen if want_energy else 0.0
    Q[0] += fx
    Q[1] += fy
    Q[2] += fn
    ax_ = px - xw[0, 0]
    ay_ = py - xw[0, 1]
    az_ = pz - r - xw[0, 2]
    Q[3] += ay_ * fn - az_ * fy
    Q[4] += az_ * fx - ax_ * fn
    Q[5] += ax_ * fy - ay_ * fx
    for u in range(anc_count[b]):
        j = anc_joints[b, u]
        rx = px - xw[j + 1, 0]
        ry = py - xw[j + 1, 1]
        rz = pz - r - xw[j + 1, 2]
        cxx = ry * fn - rz * fy
        cyy = rz * fx - rx * fn
        czz = rx * fy - ry * fx
        Q[6 + j] += aw[j, 0] * cxx + aw[j, 1] * cyy + aw[j, 2] * czz
    return pen, vz, espring


# ------------------------------------------------------------- the core solve


@njit(cache=True)
def _solve_udot(
    e,
    st,
    tau,
    ext_body,
    ext_point,
    ext_force,
    # topology (shared)
    parent,
    axis,
    origin,
    anc_joints,
    anc_count,
    locked,
    tip_body,
    mid_body,
    mid_local,
    mid_radius,
    corner_local,
    base_fixed,
    gravity,
    dt,
    # per-env model
    mass,
    com,
    inertia,
    tip_local,
    tip_radius,
    mu,
    kn,
    cn,
    eps,
    # workspaces
    R,
    xw,
    ww,
    vw,
    cw,
    Iw,
    wd,
    aa,
    aw,
    M,
    Q,
    jv,
    jw,
    iwjw,
    dofl,
    jrow,
    tmp,
    tip_pen,
    tip_vn,
    # output
    udot,
    want_energy,
):
    """Forward dynamics at the current state of env e.

    Writes joint-space accelerations into udot, geometric tip penetrations
    and pre-force tip normal speeds into tip_pen/tip_vn. Returns
    (n_non_tip_contacts, n_tip_contacts, ok, energy); energy (kinetic +
    gravity potential + contact spring) is only computed when want_energy.

    The damped normal force is capped at twice the spring force: explicit
    damping with cn*|vz| >> kn*pen at impact speeds would otherwise pump
    energy into light distal links (the damper impulse overshoots the
    approach velocity). The cap never changes statics (vz = 0).
    """
    nb = parent.shape[0]
    nj = axis.shape[0]
    ndof = 6 + nj
    nq = 13  # packed offset of joint positions

    # ---- forward kinematics
    _quat_to_mat(st[e, 3], st[e, 4], st[e, 5], st[e, 6], R, 0)
    for i in range(3):
        xw[0, i] = st[e, 0 + i]
        vw[0, i] = st[e, 7 + i]
        ww[0, i] = st[e, 10 + i]
        cw[0, i] = 0.0
    for i in range(3):
        for j in range(3):
            cw[0, i] += R[0, i, j] * com[e, 0, j]
    for i in range(3):
        cw[0, i] += xw[0, i]

    Rj = np.empty((3, 3))
    for b in range(1, nb):
        j = b - 1
        p = parent[b]
        # world axis and pivot
        for i in range(3):
            aw[j, i] = (
                R[p, i, 0] * axis[j, 0] + R[p, i, 1] * axis[j, 1] + R[p, i, 2] * axis[j, 2]
            )
            xw[b, i] = (
                xw[p, i]
                + R[p, i, 0] * origin[j, 0]
                + R[p, i, 1] * origin[j, 1]
                + R[p, i, 2] * origin[j, 2]
            )
        _rot_axis_angle(axis[j, 0], axis[j, 1], axis[j, 2], st[e, nq + j], Rj)
        for i in range(3):
            for k in range(3):
                s = 0.0
                for l in range(3):
                    s += R[p, i, l] * Rj[l, k]
                R[b, i, k] = s
        qd = st[e, nq + nj + j]
        rx = xw[b, 0] - xw[p, 0]
        ry = xw[b, 1] - xw[p, 1]
        rz = xw[b, 2] - xw[p, 2]
        ww[b, 0] = ww[p, 0] + aw[j, 0] * qd
        ww[b, 1] = ww[p, 1] + aw[j, 1] * qd
        ww[b, 2] = ww[p, 2] + aw[j, 2] * qd
        vw[b, 0] = vw[p, 0] + ww[p, 1] * rz - ww[p, 2] * ry
        vw[b, 1] = vw[p, 1] + ww[p, 2] * rx - ww[p, 0] * rz
        vw[b, 2] = vw[p, 2] + ww[p, 0] * ry - ww[p, 1] * rx
        for i in range(3):
            cw[b, i] = (
                xw[b, i]
                + R[b, i, 0] * com[e, b, 0]
                + R[b, i, 1] * com[e, b, 1]
                + R[b, i, 2] * com[e, b, 2]
            )

    # world inertia Iw = R I R^T
    for b in range(nb):
        for i in range(3):
            for k in range(3):
                s = 0.0
                for l in range(3):
                    s += inertia[e, b, i, l] * R[b, k, l]
                Rj[i, k] = s  # I R^T staged
        for i in range(3):
            for k in range(3):
                s = 0.0
                for l in range(3):
                    s += R[b, i, l] * Rj[l, k]
                Iw[b, i, k] = s

    # ---- bias accelerations (qdd = 0)
    for i in range(3):
        wd[0, i] = 0.0
        aa[0, i] = 0.0
    for b in range(1, nb):
        j = b - 1
        p = parent[b]
        qd = st[e, nq + nj + j]
        # world-axis rate: w_parent x axis
        adx = ww[p, 1] * aw[j, 2] - ww[p, 2] * aw[j, 1]
        ady = ww[p, 2] * aw[j, 0] - ww[p, 0] * aw[j, 2]
        adz = ww[p, 0] * aw[j, 1] - ww[p, 1] * aw[j, 0]
        wd[b, 0] = wd[p, 0] + adx * qd
        wd[b, 1] = wd[p, 1] + ady * qd
        wd[b, 2] = wd[p, 2] + adz * qd
        rx = xw[b, 0] - xw[p, 0]
        ry = xw[b, 1] - xw[p, 1]
        rz = xw[b, 2] - xw[p, 2]
        # wd_p x r
        c1x = wd[p, 1] * rz - wd[p, 2] * ry
        c1y = wd[p, 2] * rx - wd[p, 0] * rz
        c1z = wd[p, 0] * ry - wd[p, 1] * rx
        # w_p x (w_p x r)
        wxr_x = ww[p, 1] * rz - ww[p, 2] * ry
        wxr_y = ww[p, 2] * rx - ww[p, 0] * rz
        wxr_z = ww[p, 0] * ry - ww[p, 1] * rx
        c2x = ww[p, 1] * wxr_z - ww[p, 2] * wxr_y
        c2y = ww[p, 2] * wxr_x - ww[p, 0] * wxr_z
        c2z = ww[p, 0] * wxr_y - ww[p, 1] * wxr_x
        aa[b, 0] = aa[p, 0] + c1x + c2x
        aa[b, 1] = aa[p, 1] + c1y + c2y
        aa[b, 2] = aa[p, 2] + c1z + c2z

    # ---- assemble M and Q
    for i in range(ndof):
        Q[i] = 0.0
        for k in range(ndof):
            M[i, k] = 0.0

    energy = 0.0
    for b in range(nb):
        m_b = mass[e, b]
        # dof list: 6 base dofs then ancestor joints (ascending)
        nd = 6
        for i in range(6):
            dofl[i] = i
        for t in range(anc_count[b]):
            dofl[nd] = 6 + anc_joints[b, t]
            nd += 1
        # columns at the CoM
        for p in range(nd):
            d = dofl[p]
            if d < 3:
                for i in range(3):
                    jv[p, i] = 0.0
                    jw[p, i] = 0.0
                jv[p, d] = 1.0
            elif d < 6:
                a = d - 3
                for i in range(3):
                    jw[p, i] = 0.0
                jw[p, a] = 1.0
                rx = cw[b, 0] - xw[0, 0]
                ry = cw[b, 1] - xw[0, 1]
                rz = cw[b, 2] - xw[0, 2]
                if a == 0:
                    jv[p, 0] = 0.0
                    jv[p, 1] = -rz
                    jv[p, 2] = ry
                elif a == 1:
                    jv[p, 0] = rz
                    jv[p, 1] = 0.0
                    jv[p, 2] = -rx
                else:
                    jv[p, 0] = -ry
                    jv[p, 1] = rx
                    jv[p, 2] = 0.0
            else:
                j = d - 6
                rx = cw[b, 0] - xw[j + 1, 0]
                ry = cw[b, 1] - xw[j + 1, 1]
                rz = cw[b, 2] - xw[j + 1, 2]
                jw[p, 0] = aw[j, 0]
                jw[p, 1] = aw[j, 1]
                jw[p, 2] = aw[j, 2]
                jv[p, 0] = aw[j, 1] * rz - aw[j, 2] * ry
                jv[p, 1] = aw[j, 2] * rx - aw[j, 0] * rz
                jv[p, 2] = aw[j, 0] * ry - aw[j, 1] * rx
            for i in range(3):
                iwjw[p, i] = (
                    Iw[b, i, 0] * jw[p, 0] + Iw[b, i, 1] * jw[p, 1] + Iw[b, i, 2] * jw[p, 2]
                )
        # net bias force/torque at the CoM
        rcx = cw[b, 0] - xw[b, 0]
        rcy = cw[b, 1] - xw[b, 1]
        rcz = cw[b, 2] - xw[b, 2]
        a1x = wd[b, 1] * rcz - wd[b, 2] * rcy
        a1y = wd[b, 2] * rcx - wd[b, 0] * rcz
        a1z = wd[b, 0] * rcy - wd[b, 1] * rcx
        wxr_x = ww[b, 1] * rcz - ww[b, 2] * rcy
        wxr_y = ww[b, 2] * rcx - ww[b, 0] * rcz
        wxr_z = ww[b, 0] * rcy - ww[b, 1] * rcx
        a2x = ww[b, 1] * wxr_z - ww[b, 2] * wxr_y
        a2y = ww[b, 2] * wxr_x - ww[b, 0] * wxr_z
        a2z = ww[b, 0] * wxr_y - ww[b, 1] * wxr_x
        acx = aa[b, 0] + a1x + a2x
        acy = aa[b, 1] + a1y + a2y
        acz = aa[b, 2] + a1z + a2z
        fnx = -m_b * acx
        fny = -m_b * acy
        fnz = -m_b * (gravity + acz)
        iwx = Iw[b, 0, 0] * ww[b, 0] + Iw[b, 0, 1] * ww[b, 1] + Iw[b, 0, 2] * ww[b, 2]
        iwy = Iw[b, 1, 0] * ww[b, 0] + Iw[b, 1, 1] * ww[b, 1] + Iw[b, 1, 2] * ww[b, 2]
        iwz = Iw[b, 2, 0] * ww[b, 0] + Iw[b, 2, 1] * ww[b, 1] + Iw[b, 2, 2] * ww[b, 2]
        idx_ = Iw[b, 0, 0] * wd[b, 0] + Iw[b, 0, 1] * wd[b, 1] + Iw[b, 0, 2] * wd[b, 2]
        idy = Iw[b, 1, 0] * wd[b, 0] + Iw[b, 1, 1] * wd[b, 1] + Iw[b, 1, 2] * wd[b, 2]
        idz = Iw[b, 2, 0] * wd[b, 0] + Iw[b, 2, 1] * wd[b, 1] + Iw[b, 2, 2] * wd[b, 2]
        tnx = -(idx_ + ww[b, 1] * iwz - ww[b, 2] * iwy)
        tny = -(idy + ww[b, 2] * iwx - ww[b, 0] * iwz)
        tnz = -(idz + ww[b, 0] * iwy - ww[b, 1] * iwx)
        for p in range(nd):
            Q[dofl[p]] += jv[p, 0] * fnx + jv[p, 1] * fny + jv[p, 2] * fnz
            Q[dofl[p]] += jw[p, 0] * tnx + jw[p, 1] * tny + jw[p, 2] * tnz
            for q in range(p, nd):
                M[dofl[p], dofl[q]] += m_b * (
                    jv[p, 0] * jv[q, 0] + jv[p, 1] * jv[q, 1] + jv[p, 2] * jv[q, 2]
                ) + (jw[p, 0] * iwjw[q, 0] + jw[p, 1] * iwjw[q, 1] + jw[p, 2] * iwjw[q, 2])
        if want_energy:
            # CoM velocity, then KE + gravity PE
            vcx = vw[b, 0] + ww[b, 1] * rcz - ww[b, 2] * rcy
            vcy = vw[b, 1] + ww[b, 2] * rcx - ww[b, 0] * rcz
            vcz = vw[b, 2] + ww[b, 0] * rcy - ww[b, 1] * rcx
            energy += 0.5 * m_b * (vcx * vcx + vcy * vcy + vcz * vcz)
            energy += 0.5 * (ww[b, 0] * iwx + ww[b, 1] * iwy + ww[b, 2] * iwz)
            energy += m_b * gravity * cw[b, 2]

    # ---- joint torques
    for j in range(nj):
        Q[6 + j] += tau[j]

    # ---- external point forces (world frame)
    for x in range(ext_body.shape[0]):
        b = ext_body[x]
        fx = ext_force[x, 0]
        fy = ext_force[x, 1]
        fz = ext_force[x, 2]
        px = ext_point[x, 0]
        py = ext_point[x, 1]
        pz = ext_point[x, 2]
        Q[0] += fx
        Q[1] += fy
        Q[2] += fz
        ax_ = px - xw[0, 0]
        ay_ = py - xw[0, 1]
        az_ = pz - xw[0, 2]
        Q[3] += ay_ * fz - az_ * fy
        Q[4] += az_ * fx - ax_ * fz
        Q[5] += ax_ * fy - ay_ * fx
        for t in range(anc_count[b]):
            j = anc_joints[b, t]
            rx = px - xw[j + 1, 0]
            ry = py - xw[j + 1, 1]
            rz = pz - xw[j + 1, 2]
            cxx = ry * fz - rz * fy
            cyy = rz * fx - rx * fz
            czz = rx * fy - ry * fx
            Q[6 + j] += aw[j, 0] * cxx + aw[j, 1] * cyy + aw[j, 2] * czz

    # ---- symmetrize and pin fixed base / locked joints, then factor
    for i in range(ndof):
        for k in range(i):
            M[i, k] = M[k, i]
    if base_fixed:
        for i in range(6):
            for k in range(ndof):
                M[i, k] = 0.0
                M[k, i] = 0.0
            M[i, i] = 1.0
    for j in range(nj):
        if locked[j]:
            i = 6 + j
            for k in range(ndof):
                M[i, k] = 0.0
                M[k, i] = 0.0
            M[i, i] = 1.0
    if not _chol_factor(M, ndof):
        return 0, 0, False, energy

    # ---- ground contacts (need the factored M for effective masses)
    ncol = 0
    ntip = 0
    mu_e = mu[e]
    kn_e = kn[e]
    cn_e = cn[e]
    eps_e = eps[e]
    nt = tip_body.shape[0]
    for t in range(nt):
        b = tip_body[t]
        px = xw[b, 0] + R[b, 0, 0] * tip_local[e, t, 0] + R[b, 0, 1] * tip_local[e, t, 1] + R[b, 0, 2] * tip_local[e, t, 2]
        py = xw[b, 1] + R[b, 1, 0] * tip_local[e, t, 0] + R[b, 1, 1] * tip_local[e, t, 1] + R[b, 1, 2] * tip_local[e, t, 2]
        pz = xw[b, 2] + R[b, 2, 0] * tip_local[e, t, 0] + R[b, 2, 1] * tip_local[e, t, 1] + R[b, 2, 2] * tip_local[e, t, 2]
        pen, vz, espring = _ground_contact(
            e, b, px, py, pz, tip_radius[e, t],
            xw, vw, ww, aw, anc_joints, anc_count, base_fixed, locked,
            M, Q, jrow, tmp, mu_e, kn_e, cn_e, eps_e, dt, want_energy,
        )
        tip_pen[t] = pen if pen > 0.0 else 0.0
        tip_vn[t] = vz
        if pen > 0.0:
            ntip += 1
            energy += espring

    for s_ in range(mid_body.shape[0]):
        b = mid_body[s_]
        px = xw[b, 0] + R[b, 0, 0] * mid_local[s_, 0] + R[b, 0, 1] * mid_local[s_, 1] + R[b, 0, 2] * mid_local[s_, 2]
        py = xw[b, 1] + R[b, 1, 0] * mid_local[s_, 0] + R[b, 1, 1] * mid_local[s_, 1] + R[b, 1, 2] * mid_local[s_, 2]
        pz = xw[b, 2] + R[b, 2, 0] * mid_local[s_, 0] + R[b, 2, 1] * mid_local[s_, 1] + R[b, 2, 2] * mid_local[s_, 2]
        pen, vz, espring = _ground_contact(
            e, b, px, py, pz, mid_radius[s_],
            xw, vw, ww, aw, anc_joints, anc_count, base_fixed, locked,
            M, Q, jrow, tmp, mu_e, kn_e, cn_e, eps_e, dt, want_energy,
        )
        if pen > 0.0:
            ncol += 1
            energy += espring

    for c_ in range(corner_local.shape[0]):
        px = xw[0, 0] + R[0, 0, 0] * corner_local[c_, 0] + R[0, 0, 1] * corner_local[c_, 1] + R[0, 0, 2] * corner_local[c_, 2]
        py = xw[0, 1] + R[0, 1, 0] * corner_local[c_, 0] + R[0, 1, 1] * corner_local[c_, 1] + R[0, 1, 2] * corner_local[c_, 2]
        pz = xw[0, 2] + R[0, 2, 0] * corner_local[c_, 0] + R[0, 2, 1] * corner_local[c_, 1] + R[0, 2, 2] * corner_local[c_, 2]
        pen, vz, espring = _ground_contact(
            e, 0, px, py, pz, 0.0,
            xw, vw, ww, aw, anc_joints, anc_count, base_fixed, locked,
            M, Q, jrow, tmp, mu_e, kn_e, cn_e, eps_e, dt, want_energy,
        )
        if pen > 0.0:
            ncol += 1
            energy += espring

    # ---- solve (contact scatter may have touched pinned rows; re-zero)
    if base_fixed:
        for i in range(6):
            Q[i] = 0.0
    for j in range(nj):
        if locked[j]:
            Q[6 + j] = 0.0
    for i in range(ndof):
        udot[i] = Q[i]
    _chol_substitute(M, udot, ndof)
    return ncol, ntip, True, energy


@njit(cache=True)
def _pd_tau(e, st, targets, kp, kd, taulim, locked, tau):
    nj = tau.shape[0]
    for j in range(nj):
        if locked[j]:
            tau[j] = 0.0
            continue
        q = st[e, 13 + j]
        qd = st[e, 13 + nj + j]
        t = kp[e, j] * (targets[e, j] - q) - kd[e, j] * qd
        lim = taulim[j]
        if t > lim:
            t = lim
        elif t < -lim:
            t = -lim
        tau[j] = t


@njit(cache=True)
def _integrate(e, st, udot, dt, qlim, locked, base_fixed, airborne, M, tmp):
    """Velocity kick then position drift; True while the state stays finite.

    M arrives Cholesky-factored from the forward-dynamics solve and is
    only read here.  Joint limit stops are resolved as constraint
    impulses through it: zeroing a single joint rate in place changes
    the coupled kinetic energy in either direction (off-diagonal mass
    terms), while the impulse u -= M^-1 e_j * lam, sized so the joint
    keeps just the residual rate that parks it exactly on its bound,
    always removes kinetic energy and recoils through the tree.
    """
    nj = qlim.shape[0]
    ndof = 6 + nj
    # velocities first
    if not base_fixed:
        for i in range(3):
            st[e, 7 + i] += dt * udot[i]
            st[e, 10 + i] += dt * udot[3 + i]
    for j in range(nj):
        if not locked[j]:
            st[e, 13 + nj + j] += dt * udot[6 + j]
    # joint stops; an impulse can push another joint outward, so sweep twice
    for _sweep in range(2):
        hit = False
        for j in range(nj):
            if locked[j]:
                continue
            qd = st[e, 13 + nj + j]
            qn = st[e, 13 + j] + dt * qd
            if (qn < qlim[j, 0] and qd < 0.0) or (qn > qlim[j, 1] and qd > 0.0):
                # residual rate that parks the joint exactly on the bound
                # this substep; |qd_stop| < |qd| keeps the impulse dissipative
                if qd < 0.0:
                    qd_stop = (qlim[j, 0] - st[e, 13 + j]) / dt
                else:
                    qd_stop = (qlim[j, 1] - st[e, 13 + j]) / dt
                for i in range(ndof):
                    tmp[i] = 0.0
                tmp[6 + j] = 1.0
                _chol_substitute(M, tmp, ndof)
                sjj = tmp[6 + j]
                if sjj > 1e-12:
                    lam = (qd - qd_stop) / sjj
                    if not base_fixed:
                        for i in range(3):
                            st[e, 7 + i] -= lam * tmp[i]
                            st[e, 10 + i] -= lam * tmp[3 + i]
                    for k in range(nj):
                        if not locked[k]:
                            st[e, 13 + nj + k] -= lam * tmp[6 + k]
                    st[e, 13 + nj + j] = qd_stop
                    hit = True
        if not hit:
            break
    # positions from the new velocities.  While airborne the base drift
    # carries the trapezoidal term -a dt^2/2 (ballistic flight lands on
    # the continuous parabola instead of g dt t/2 low); with any contact
    # active the plain leapfrog drift is kept, because the trapezoidal
    # map has determinant 1 + (w dt)^2/2 > 1 against a penalty spring
    # and would pump it.
    if not base_fixed:
        if airborne:
            hdt2 = 0.5 * dt * dt
            for i in range(3):
                st[e, 0 + i] += dt * st[e, 7 + i] - hdt2 * udot[i]
        else:
            for i in range(3):
                st[e, 0 + i] += dt * st[e, 7 + i]
        # quaternion exponential map on the new angular velocity
        rx = st[e, 10] * dt
        ry = st[e, 11] * dt
        rz = st[e, 12] * dt
        ang = np.sqrt(rx * rx + ry * ry + rz * rz)
        half = 0.5 * ang
        if ang < 1e-12:
            k = 0.5 - ang * ang / 48.0
        else:
            k = np.sin(half) / ang
        dw = np.cos(half)
        dx = rx * k
        dy = ry * k
        dz = rz * k
        qw = st[e, 3]
        qx = st[e, 4]
        qy = st[e, 5]
        qz = st[e, 6]
        nw = dw * qw - dx * qx - dy * qy - dz * qz
        nx = dw * qx + dx * qw + dy * qz - dz * qy
        ny = dw * qy - dx * qz + dy * qw + dz * qx
        nz = dw * qz + dx * qy - dy * qx + dz * qw
        norm = np.sqrt(nw * nw + nx * nx + ny * ny + nz * nz)
        st[e, 3] = nw / norm
        st[e, 4] = nx / norm
        st[e, 5] = ny / norm
        st[e, 6] = nz / norm
    for j in range(nj):
        if locked[j]:
            continue
        st[e, 13 + j] += dt * st[e, 13 + nj + j]
        # position snap only; any leftover outward rate is caught by the
        # impulse sweep on the next substep
        if st[e, 13 + j] < qlim[j, 0]:
            st[e, 13 + j] = qlim[j, 0]
        elif st[e, 13 + j] > qlim[j, 1]:
            st[e, 13 + j] = qlim[j, 1]
    st[e, 13 + 2 * nj] += dt
    ns = 14 + 2 * nj
    for i in range(ns):
        if not np.isfinite(st[e, i]):
            return False
    return True


@njit(cache=True)
def _env_advance(
    e,
    n_sub,
    st,
    targets,
    parent,
    axis,
    origin,
    anc_joints,
    anc_count,
    locked,
    qlim,
    taulim,
    tip_body,
    mid_body,
    mid_local,
    mid_radius,
    corner_local,
    base_fixed,
    gravity,
    dt,
    mass,
    com,
    inertia,
    tip_local,
    tip_radius,
    kp,
    kd,
    mu,
    kn,
    cn,
    eps,
    # outputs
    tip_contact,
    touchdown_vz,
    ncol_out,
    power_out,
    tausq_out,
    fault,
    energy_row,
    contact_row,
    want_energy,
):
    """Advance env e by n_sub substeps, accumulating control-layer outputs.

    `tip_contact[e]` is read as the contact flags at the end of the previous
    call and rewritten to the flags at the last examined substep state, so
    touchdown transitions are counted exactly once across call boundaries.
    When want_energy, energy_row receives the pre-substep energies and
    contact_row the pre-substep contact counts (length n_sub each); the
    caller computes the final boundary state's energy.
    """
    nb = parent.shape[0]
    nj = axis.shape[0]
    ndof = 6 + nj
    maxd = anc_joints.shape[1]
    nt = tip_body.shape[0]

    R = np.empty((nb, 3, 3))
    xw = np.empty((nb, 3))
    ww = np.empty((nb, 3))
    vw = np.empty((nb, 3))
    cw = np.empty((nb, 3))
    Iw = np.empty((nb, 3, 3))
    wd = np.empty((nb, 3))
    aa = np.empty((nb, 3))
    aw = np.empty((max(nj, 1), 3))
    M = np.empty((ndof, ndof))
    Q = np.empty(ndof)
    jv = np.empty((6 + maxd, 3))
    jw = np.empty((6 + maxd, 3))
    iwjw = np.empty((6 + maxd, 3))
    dofl = np.empty(6 + maxd, dtype=np.int64)
    jrow = np.empty(ndof)
    tmp = np.empty(ndof)
    tip_pen = np.empty(max(nt, 1))
    tip_vn = np.empty(max(nt, 1))
    udot = np.empty(ndof)
    tau = np.empty(max(nj, 1))
    ext_body = np.empty(0, dtype=np.int64)
    ext_vec = np.empty((0, 3))

    for t in range(nt):
        touchdown_vz[e, t] = 0.0
    power = 0.0
    tausq = 0.0
    ncol = 0

    for s in range(n_sub):
        if fault[e]:
            break
        _pd_tau(e, st, targets, kp, kd, taulim, locked, tau)
        ncol, ntip, ok, energy = _solve_udot(
            e, st, tau, ext_body, ext_vec, ext_vec,
            parent, axis, origin, anc_joints, anc_count, locked,
            tip_body, mid_body, mid_local, mid_radius, corner_local,
            base_fixed, gravity, dt,
            mass, com, inertia, tip_local, tip_radius, mu, kn, cn, eps,
            R, xw, ww, vw, cw, Iw, wd, aa, aw, M, Q, jv, jw, iwjw, dofl,
            jrow, tmp, tip_pen, tip_vn, udot, want_energy,
        )
        if want_energy:
            energy_row[s] = energy
            contact_row[s] = ncol + ntip
        if not ok:
            fault[e] = 1
            break
        for j in range(nj):
            qd = st[e, 13 + nj + j]
            w = tau[j] * qd
            if w > 0.0:
                power += w
            tausq += tau[j] * tau[j]
        # touchdown bookkeeping on the pre-integrate state
        for t in range(nt):
            now = tip_pen[t] > 0.0
            if now and tip_contact[e, t] == 0 and touchdown_vz[e, t] == 0.0:
                touchdown_vz[e, t] = tip_vn[t]
            tip_contact[e, t] = 1 if now else 0
        if not _integrate(e, st, udot, dt, qlim, locked, base_fixed,
                          ncol + ntip == 0, M, tmp):
            fault[e] = 1
            break

    power_out[e] = power / n_sub
    tausq_out[e] = tausq / n_sub
    ncol_out[e] = ncol


@njit(cache=True, parallel=True)
def step_batch(
    idx,
    n_sub,
    st,
    targets,
    parent,
    axis,
    origin,
    anc_joints,
    anc_count,
    locked,
    qlim,
    taulim,
    tip_body,
    mid_body,
    mid_local,
    mid_radius,
    corner_local,
    base_fixed,
    gravity,
    dt,
    mass,
    com,
    inertia,
    tip_local,
    tip_radius,
    kp,
    kd,
    mu,
    kn,
    cn,
    eps,
    tip_contact,
    touchdown_vz,
    ncol_out,
    power_out,
    tausq_out,
    fault,
):
    dummy = np.empty(0)
    dummy_i = np.empty(0, dtype=np.int64)
    for k in prange(idx.shape[0]):
        _env_advance(
            idx[k], n_sub, st, targets,
            parent, axis, origin, anc_joints, anc_count, locked, qlim, taulim,
            tip_body, mid_body, mid_local, mid_radius, corner_local,
            base_fixed, gravity, dt,
            mass, com, inertia, tip_local, tip_radius, kp, kd, mu, kn, cn, eps,
            tip_contact, touchdown_vz, ncol_out, power_out, tausq_out, fault,
            dummy, dummy_i, False,
        )


@njit(cache=True, parallel=True)
def step_energy_batch(
    idx,
    n_sub,
    st,
    targets,
    parent,
    axis,
    origin,
    anc_joints,
    anc_count,
    locked,
    qlim,
    taulim,
    tip_body,
    mid_body,
    mid_local,
    mid_radius,
    corner_local,
    base_fixed,
    gravity,
    dt,
    mass,
    com,
    inertia,
    tip_local,
    tip_radius,
    kp,
    kd,
    mu,
    kn,
    cn,
    eps,
    tip_contact,
    touchdown_vz,
    ncol_out,
    power_out,
    tausq_out,
    fault,
    energies,  # (len(idx), n_sub) pre-substep energies incl. contact spring
    contacts,  # (len(idx), n_sub) pre-substep contact counts
):
    for k in prange(idx.shape[0]):
        _env_advance(
            idx[k], n_sub, st, targets,
            parent, axis, origin, anc_joints, anc_count, locked, qlim, taulim,
            tip_body, mid_body, mid_local, mid_radius, corner_local,
            base_fixed, gravity, dt,
            mass, com, inertia, tip_local, tip_radius, kp, kd, mu, kn, cn, eps,
            tip_contact, touchdown_vz, ncol_out, power_out, tausq_out, fault,
            energies[k], contacts[k], True,
        )


@njit(cache=True)
def eval_dynamics(
    e,
    st,
    tau_in,
    ext_body,
    ext_point,
    ext_force,
    parent,
    axis,
    origin,
    anc_joints,
    anc_count,
    locked,
    tip_body,
    mid_body,
    mid_local,
    mid_radius,
    corner_local,
    base_fixed,
    gravity,
    dt,
    mass,
    com,
    inertia,
    tip_local,
    tip_radius,
    mu,
    kn,
    cn,
    eps,
    udot,
    want_energy,
):
    """One forward-dynamics evaluation (no integration) for env e.

    Returns (n_non_tip_contacts, n_tip_contacts, ok, energy). Used by the
    single-robot API so every consumer shares the stepping kernel's
    arithmetic exactly.
    """
    nb = parent.shape[0]
    nj = axis.shape[0]
    ndof = 6 + nj
    maxd = anc_joints.shape[1]
    nt = tip_body.shape[0]
    R = np.empty((nb, 3, 3))
    xw = np.empty((nb, 3))
    ww = np.empty((nb, 3))
    vw = np.empty((nb, 3))
    cw = np.empty((nb, 3))
    Iw = np.empty((nb, 3, 3))
    wd = np.empty((nb, 3))
    aa = np.empty((nb, 3))
    aw = np.empty((max(nj, 1), 3))
    M = np.empty((ndof, ndof))
    Q = np.empty(ndof)
    jv = np.empty((6 + maxd, 3))
    jw = np.empty((6 + maxd, 3))
    iwjw = np.empty((6 + maxd, 3))
    dofl = np.empty(6 + maxd, dtype=np.int64)
    jrow = np.empty(ndof)
    tmp = np.empty(ndof)
    tip_pen = np.empty(max(nt, 1))
    tip_vn = np.empty(max(nt, 1))
    return _solve_udot(
        e, st, tau_in, ext_body, ext_point, ext_force,
        parent, axis, origin, anc_joints, anc_count, locked,
        tip_body, mid_body, mid_local, mid_radius, corner_local,
        base_fixed, gravity, dt,
        mass, com, inertia, tip_local, tip_radius, mu, kn, cn, eps,
        R, xw, ww, vw, cw, Iw, wd, aa, aw, M, Q, jv, jw, iwjw, dofl,
        jrow, tmp, tip_pen, tip_vn, udot, want_energy,
    )


@njit(cache=True)
def tip_states(
    e,
    st,
    parent,
    axis,
    origin,
    tip_body,
    tip_local,
    tip_pos,
    tip_vel,
):
    """World tip positions and velocities at the current state of env e."""
    nb = parent.shape[0]
    nj = axis.shape[0]
    R = np.empty((nb, 3, 3))
    xw = np.empty((nb, 3))
    ww = np.empty((nb, 3))
    vw = np.empty((nb, 3))
    Rj = np.empty((3, 3))
    _quat_to_mat(st[e, 3], st[e, 4], st[e, 5], st[e, 6], R, 0)
    for i in range(3):
        xw[0, i] = st[e, 0 + i]
        vw[0, i] = st[e, 7 + i]
        ww[0, i] = st[e, 10 + i]
    for b in range(1, nb):
        j = b - 1
        p = parent[b]
        awx = R[p, 0, 0] * axis[j, 0] + R[p, 0, 1] * axis[j, 1] + R[p, 0, 2] * axis[j, 2]
        awy = R[p, 1, 0] * axis[j, 0] + R[p, 1, 1] * axis[j, 1] + R[p, 1, 2] * axis[j, 2]
        awz = R[p, 2, 0] * axis[j, 0] + R[p, 2, 1] * axis[j, 1] + R[p, 2, 2] * axis[j, 2]
        for i in range(3):
            xw[b, i] = (
                xw[p, i]
                + R[p, i, 0] * origin[j, 0]
                + R[p, i, 1] * origin[j, 1]
                + R[p, i, 2] * origin[j, 2]
            )
        _rot_axis_angle(axis[j, 0], axis[j, 1], axis[j, 2], st[e, 13 + j], Rj)
        for i in range(3):
            for k in range(3):
                s = 0.0
                for l in range(3):
                    s += R[p, i, l] * Rj[l, k]
                R[b, i, k] = s
        qd = st[e, 13 + nj + j]
        rx = xw[b, 0] - xw[p, 0]
        ry = xw[b, 1] - xw[p, 1]
        rz = xw[b, 2] - xw[p, 2]
        ww[b, 0] = ww[p, 0] + awx * qd
        ww[b, 1] = ww[p, 1] + awy * qd
        ww[b, 2] = ww[p, 2] + awz * qd
        vw[b, 0] = vw[p, 0] + ww[p, 1] * rz - ww[p, 2] * ry
        vw[b, 1] = vw[p, 1] + ww[p, 2] * rx - ww[p, 0] * rz
        vw[b, 2] = vw[p, 2] + ww[p, 0] * ry - ww[p, 1] * rx
    for t in range(tip_body.shape[0]):
        b = tip_body[t]
        lx = tip_local[e, t, 0]
        ly = tip_local[e, t, 1]
        lz = tip_local[e, t, 2]
        dx = R[b, 0, 0] * lx + R[b, 0, 1] * ly + R[b, 0, 2] * lz
        dy = R[b, 1, 0] * lx + R[b, 1, 1] * ly + R[b, 1, 2] * lz
        dz = R[b, 2, 0] * lx + R[b, 2, 1] * ly + R[b, 2, 2] * lz
        tip_pos[e, t, 0] = xw[b, 0] + dx
        tip_pos[e, t, 1] = xw[b, 1] + dy
        tip_pos[e, t, 2] = xw[b, 2] + dz
        tip_vel[e, t, 0] = vw[b, 0] + ww[b, 1] * dz - ww[b, 2] * dy
        tip_vel[e, t, 1] = vw[b, 1] + ww[b, 2] * dx - ww[b, 0] * dz
        tip_vel[e, t, 2] = vw[b, 2] + ww[b, 0] * dy - ww[b, 1] * dx


@njit(cache=True, parallel=True)
def tip_states_batch(idx, st, parent, axis, origin, tip_body, tip_local, tip_pos, tip_vel):
    for k in prange(idx.shape[0]):
        tip_states(idx[k], st, parent, axis, origin, tip_body, tip_local, tip_pos, tip_vel)
