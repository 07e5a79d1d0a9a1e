"""Vectorized element kernels for the space-time weak forms (pure backend).

Every function here computes dense per-element blocks for one slab in a
single vectorized sweep over all elements.  The compiled backend
(``granst.kernels._fast``) mirrors the four block builders exactly; this
module is the always-available fallback and the definition of correct
output for the parity tests.

Conventions
-----------
Degrees of freedom are interleaved per space-time node: (u_x, u_y, p),
so a prism element yields an 18 x 18 block and a tetrahedron a 12 x 12
block.  ``eta_q`` holds viscosity per quadrature point with shape
``(n_qp, n_elements)``; geometry arrays come straight from
:func:`granst.fem.prism_geometry` / :func:`granst.fem.tet_geometry`.
"""
from __future__ import annotations

import numpy as np

from .. import fem, rheology

__all__ = [
    "ns_prism_blocks",
    "ns_tet_blocks",
    "ls_prism_blocks",
    "ls_tet_blocks",
    "viscosity_qp_prism",
    "viscosity_qp_tet",
    "tri_mass_blocks",
]

# exact integrals of N_a N_b N_c over the reference triangle (unit area)
_TRI3 = np.zeros((3, 3, 3))
for _a in range(3):
    for _b in range(3):
        for _c in range(3):
            n_eq = (_a == _b) + (_b == _c) + (_a == _c)
            _TRI3[_a, _b, _c] = {3: 1.0 / 10.0, 1: 1.0 / 30.0, 0: 1.0 / 60.0}[n_eq]


def _prism_qp_arrays(tri_grads, dts, pt):
    """Basis derivative arrays (E, 6) at one prism reference point."""
    r1, r2, s = pt
    tri = np.array([1.0 - r1 - r2, r1, r2])
    gx = np.concatenate([tri_grads[:, :, 0] * (1.0 - s), tri_grads[:, :, 0] * s], axis=1)
    gy = np.concatenate([tri_grads[:, :, 1] * (1.0 - s), tri_grads[:, :, 1] * s], axis=1)
    gt = np.empty_like(gx)
    gt[:, :3] = -tri[None, :] / dts[:, None]
    gt[:, 3:] = tri[None, :] / dts[:, None]
    return gx, gy, gt


def _outer(w, a, b):
    """(E, k, k) blocks w_e * a_ea * b_eb."""
    return np.einsum("e,ea,eb->eab", w, a, b, optimize=True)


def _ns_qp(K, R, N, gx, gy, gt, wq, u_q, rho_q, eta, tau_m, tau_c, fx, fy):
    """Accumulate one quadrature point of the flow weak form into K, R.

    Galerkin transient + convection + viscous + pressure coupling, GLS
    momentum/continuity residual terms (the P1 viscous residual
    contribution vanishes element-wise and is dropped), grad-div with
    stabilizing sign, and the body-force load with its GLS counterpart.
    """
    D = gt + u_q[:, 0:1] * gx + u_q[:, 1:2] * gy
    adv = wq * rho_q
    we = wq * eta
    sm = wq * tau_m            # (tau_M / rho) * rho: velocity test vs pressure trial
    rr = wq * tau_m * rho_q    # (tau_M / rho) * rho^2: velocity test vs velocity trial
    spp = wq * tau_m / rho_q   # pressure test vs pressure trial
    gd = wq * rho_q * tau_c

    Kxx = K[:, 0::3, 0::3]
    Kxy = K[:, 0::3, 1::3]
    Kxp = K[:, 0::3, 2::3]
    Kyx = K[:, 1::3, 0::3]
    Kyy = K[:, 1::3, 1::3]
    Kyp = K[:, 1::3, 2::3]
    Kpx = K[:, 2::3, 0::3]
    Kpy = K[:, 2::3, 1::3]
    Kpp = K[:, 2::3, 2::3]

    both = np.einsum("e,a,eb->eab", adv, N, D, optimize=True) + _outer(rr, D, D)
    Kxx += both
    Kyy += both

    gxgx = _outer(we, gx, gx)
    gygy = _outer(we, gy, gy)
    Kxx += 2.0 * gxgx + gygy
    Kyy += 2.0 * gygy + gxgx
    Kxy += _outer(we, gy, gx)
    Kyx += _outer(we, gx, gy)

    Kxx += _outer(gd, gx, gx)
    Kxy += _outer(gd, gx, gy)
    Kyx += _outer(gd, gy, gx)
    Kyy += _outer(gd, gy, gy)

    Kxp += np.einsum("e,ea,b->eab", -wq, gx, N, optimize=True) + _outer(sm, D, gx)
    Kyp += np.einsum("e,ea,b->eab", -wq, gy, N, optimize=True) + _outer(sm, D, gy)
    Kpx += np.einsum("e,a,eb->eab", wq, N, gx, optimize=True) + _outer(sm, gx, D)
    Kpy += np.einsum("e,a,eb->eab", wq, N, gy, optimize=True) + _outer(sm, gy, D)
    Kpp += _outer(spp, gx, gx) + _outer(spp, gy, gy)

    fx = np.broadcast_to(np.asarray(fx, dtype=float), rho_q.shape)
    fy = np.broadcast_to(np.asarray(fy, dtype=float), rho_q.shape)
    R[:, 0::3] += (adv * fx)[:, None] * N[None, :] + (rr * fx)[:, None] * D
    R[:, 1::3] += (adv * fy)[:, None] * N[None, :] + (rr * fy)[:, None] * D
    R[:, 2::3] += sm[:, None] * (gx * fx[:, None] + gy * fy[:, None])


def ns_prism_blocks(tri_grads, areas, dts, u_el, rho_el, eta_q, tau_m, tau_c, fx, fy):
    """Flow blocks for all prisms of an FST slab.

    Parameters
    ----------
    tri_grads : ndarray, shape (E, 3, 2)
        Spatial gradients of the P1 triangle basis.
    areas, dts : ndarray, shape (E,)
        Triangle areas and slab heights.
    u_el : ndarray, shape (E, 6, 2)
        Frozen convection velocity at element nodes (zeros for Stokes).
    rho_el : ndarray, shape (E, 6)
        Nodal density.
    eta_q : ndarray, shape (6, E)
        Viscosity at each quadrature point.
    tau_m, tau_c : ndarray, shape (E,)
        Stabilization parameters.
    fx, fy : float or ndarray, shape (Q, E)
        Body force per unit mass, constant or per quadrature point.

    Returns
    -------
    (K, R) : per-element blocks, shapes (E, 18, 18) and (E, 18).
    """
    E = areas.shape[0]
    K = np.zeros((E, 18, 18))
    R = np.zeros((E, 18))
    basis = fem.PrismBasis()
    jac = 2.0 * areas * dts
    fx = np.asarray(fx, dtype=float)
    fy = np.asarray(fy, dtype=float)
    for q, (pt, w) in enumerate(basis.quadrature):
        N = basis.eval(pt)
        gx, gy, gt = _prism_qp_arrays(tri_grads, dts, pt)
        u_q = np.einsum("ekc,k->ec", u_el, N, optimize=True)
        rho_q = rho_el @ N
        _ns_qp(K, R, N, gx, gy, gt, w * jac, u_q, rho_q, eta_q[q], tau_m, tau_c,
               fx if fx.ndim == 0 else fx[q], fy if fy.ndim == 0 else fy[q])
    return K, R


def ns_tet_blocks(grads, vols, u_el, rho_el, eta_q, tau_m, tau_c, fx, fy):
    """Flow blocks for all tetrahedra of an SST slab (shapes as in the prism
    variant with k = 4; ``grads`` is (E, 4, 3) with the temporal derivative
    in the last column)."""
    E = vols.shape[0]
    K = np.zeros((E, 12, 12))
    R = np.zeros((E, 12))
    basis = fem.TetBasis()
    gx, gy, gt = grads[:, :, 0], grads[:, :, 1], grads[:, :, 2]
    jac = 6.0 * vols
    fx = np.asarray(fx, dtype=float)
    fy = np.asarray(fy, dtype=float)
    for q, (pt, w) in enumerate(basis.quadrature):
        N = basis.eval(pt)
        u_q = np.einsum("ekc,k->ec", u_el, N, optimize=True)
        rho_q = rho_el @ N
        _ns_qp(K, R, N, gx, gy, gt, w * jac, u_q, rho_q, eta_q[q], tau_m, tau_c,
               fx if fx.ndim == 0 else fx[q], fy if fy.ndim == 0 else fy[q])
    return K, R


def _ls_qp(K, N, gx, gy, gt, wq, u_q, tau_l):
    D = gt + u_q[:, 0:1] * gx + u_q[:, 1:2] * gy
    test = N[None, :] + tau_l[:, None] * D
    K += np.einsum("e,ea,eb->eab", wq, test, D, optimize=True)


def ls_prism_blocks(tri_grads, areas, dts, u_el, tau_l):
    """Level-set advection blocks (E, 6, 6) for an FST slab."""
    E = areas.shape[0]
    K = np.zeros((E, 6, 6))
    basis = fem.PrismBasis()
    jac = 2.0 * areas * dts
    for pt, w in basis.quadrature:
        N = basis.eval(pt)
        gx, gy, gt = _prism_qp_arrays(tri_grads, dts, pt)
        u_q = np.einsum("ekc,k->ec", u_el, N, optimize=True)
        _ls_qp(K, N, gx, gy, gt, w * jac, u_q, tau_l)
    return K


def ls_tet_blocks(grads, vols, u_el, tau_l):
    """Level-set advection blocks (E, 4, 4) for an SST slab."""
    E = vols.shape[0]
    K = np.zeros((E, 4, 4))
    basis = fem.TetBasis()
    gx, gy, gt = grads[:, :, 0], grads[:, :, 1], grads[:, :, 2]
    jac = 6.0 * vols
    for pt, w in basis.quadrature:
        N = basis.eval(pt)
        u_q = np.einsum("ekc,k->ec", u_el, N, optimize=True)
        _ls_qp(K, N, gx, gy, gt, w * jac, u_q, tau_l)
    return K


def _viscosity_qp(N, gx, gy, u_el, p_el, phi_el, params, eta_light):
    dudx = np.einsum("ek,ek->e", gx, u_el[:, :, 0], optimize=True)
    dudy = np.einsum("ek,ek->e", gy, u_el[:, :, 0], optimize=True)
    dvdx = np.einsum("ek,ek->e", gx, u_el[:, :, 1], optimize=True)
    dvdy = np.einsum("ek,ek->e", gy, u_el[:, :, 1], optimize=True)
    exy = 0.5 * (dudy + dvdx)
    gd = np.sqrt(0.5 * (dudx * dudx + dvdy * dvdy + 2.0 * exy * exy))
    p_q = p_el @ N
    phi_q = phi_el @ N
    heavy = phi_q < 0.0
    eta = np.full(gd.shape, eta_light)
    if np.any(heavy):
        eta[heavy] = rheology.viscosity_gp(gd[heavy], p_q[heavy], params)
    return eta


def viscosity_qp_prism(tri_grads, dts, u_el, p_el, phi_el, params, eta_light):
    """Viscosity at every prism quadrature point.

    The heavy phase (phi < 0 at the quadrature point) is evaluated through
    the granular rheology at the local shear rate and pressure; the light
    phase uses the constant Newtonian value.  Returns shape (6, E).
    """
    basis = fem.PrismBasis()
    out = np.empty((len(basis.quadrature), tri_grads.shape[0]))
    for q, (pt, _) in enumerate(basis.quadrature):
        N = basis.eval(pt)
        gx, gy, _ = _prism_qp_arrays(tri_grads, dts, pt)
        out[q] = _viscosity_qp(N, gx, gy, u_el, p_el, phi_el, params, eta_light)
    return out


def viscosity_qp_tet(grads, u_el, p_el, phi_el, params, eta_light):
    """Viscosity at every tetrahedron quadrature point, shape (4, E)."""
    basis = fem.TetBasis()
    gx, gy = grads[:, :, 0], grads[:, :, 1]
    out = np.empty((len(basis.quadrature), grads.shape[0]))
    for q, (pt, _) in enumerate(basis.quadrature):
        N = basis.eval(pt)
        out[q] = _viscosity_qp(N, gx, gy, u_el, p_el, phi_el, params, eta_light)
    return out


def tri_mass_blocks(areas, coeff_nodes=None):
    """Consistent P1 mass blocks (T, 3, 3) over spatial triangles.

    With ``coeff_nodes`` (T, 3) the integrand carries the P1-interpolated
    nodal coefficient (density for the momentum jump term); otherwise the
    plain mass matrix.
    """
    if coeff_nodes is None:
        m = np.full((3, 3), 1.0 / 12.0)
        np.fill_diagonal(m, 1.0 / 6.0)
        return areas[:, None, None] * m[None]
    return np.einsum("t,tc,abc->tab", areas, coeff_nodes, _TRI3, optimize=True)
