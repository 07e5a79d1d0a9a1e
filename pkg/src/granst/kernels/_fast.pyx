# cython: language_level=3
"""Compiled assembly kernels.

Loop-for-loop mirrors of the numpy reference kernels, hand-specialized for
the two element types. Selected via GRANST_KERNELS=fast (or automatically
when built); the reference module remains the behavioral oracle and the
parity tests hold both within 1e-12.
"""

import numpy as np

cimport cython

from granst import fem

__all__ = ["ns_prism_blocks", "ns_tet_blocks", "ls_prism_blocks",
           "ls_tet_blocks"]


def _tables(basis):
    pts = np.array([p for p, _ in basis.quadrature], dtype=np.float64)
    w = np.array([wq for _, wq in basis.quadrature], dtype=np.float64)
    n = np.array([basis.eval(p) for p, _ in basis.quadrature], dtype=np.float64)
    return pts, w, n


_P_PTS, _P_W, _P_N = _tables(fem.PrismBasis())
_P_NTRI = np.ascontiguousarray(np.column_stack(
    [1.0 - _P_PTS[:, 0] - _P_PTS[:, 1], _P_PTS[:, 0], _P_PTS[:, 1]]))
_P_S = np.ascontiguousarray(_P_PTS[:, 2])
_T_PTS, _T_W, _T_N = _tables(fem.TetBasis())


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _force_qp(f, Py_ssize_t nq, Py_ssize_t ne):
    return _c(np.broadcast_to(np.asarray(f, dtype=np.float64), (nq, ne)))


# ---------------------------------------------------------------------------
# momentum/continuity kernels

@cython.boundscheck(False)
@cython.wraparound(False)
@cython.cdivision(True)
cdef void _ns_prism(const double[:, :, ::1] tg, const double[::1] areas, const double[::1] dts,
                    const double[:, :, ::1] u_el, const double[:, ::1] rho_el,
                    const double[:, ::1] eta_q, const double[::1] tau_m, const double[::1] tau_c,
                    const double[:, ::1] fxq, const double[:, ::1] fyq,
                    const double[:, ::1] ntri, const double[::1] sv, const double[::1] wq,
                    const double[:, ::1] nsh, double[:, :, ::1] K,
                    double[:, ::1] R) noexcept nogil:
    cdef Py_ssize_t E = areas.shape[0]
    cdef Py_ssize_t e, q, a, b, k
    cdef double jac, w, s, one_s, dt, uqx, uqy, rq
    cdef double adv, we, sm, rr, spp, gd, fx, fy
    cdef double na, da, gxa, gya, common
    cdef double N[6]
    cdef double gx[6]
    cdef double gy[6]
    cdef double gt[6]
    cdef double D[6]
    for e in range(E):
        dt = dts[e]
        jac = 2.0 * areas[e] * dt
        for q in range(6):
            s = sv[q]
            one_s = 1.0 - s
            w = wq[q] * jac
            uqx = 0.0
            uqy = 0.0
            rq = 0.0
            for k in range(6):
                N[k] = nsh[q, k]
                uqx += N[k] * u_el[e, k, 0]
                uqy += N[k] * u_el[e, k, 1]
                rq += N[k] * rho_el[e, k]
            for k in range(3):
                gx[k] = tg[e, k, 0] * one_s
                gx[k + 3] = tg[e, k, 0] * s
                gy[k] = tg[e, k, 1] * one_s
                gy[k + 3] = tg[e, k, 1] * s
                gt[k] = -ntri[q, k] / dt
                gt[k + 3] = ntri[q, k] / dt
            for k in range(6):
                D[k] = gt[k] + uqx * gx[k] + uqy * gy[k]
            adv = w * rq
            we = w * eta_q[q, e]
            sm = w * tau_m[e]
            rr = sm * rq
            spp = sm / rq
            gd = w * rq * tau_c[e]
            fx = fxq[q, e]
            fy = fyq[q, e]
            for a in range(6):
                na = N[a]
                da = D[a]
                gxa = gx[a]
                gya = gy[a]
                R[e, 3 * a] += adv * fx * na + rr * fx * da
                R[e, 3 * a + 1] += adv * fy * na + rr * fy * da
                R[e, 3 * a + 2] += sm * (gxa * fx + gya * fy)
                for b in range(6):
                    common = adv * na * D[b] + rr * da * D[b]
                    K[e, 3 * a, 3 * b] += common \
                        + we * (2.0 * gxa * gx[b] + gya * gy[b]) \
                        + gd * gxa * gx[b]
                    K[e, 3 * a + 1, 3 * b + 1] += common \
                        + we * (2.0 * gya * gy[b] + gxa * gx[b]) \
                        + gd * gya * gy[b]
                    K[e, 3 * a, 3 * b + 1] += we * gya * gx[b] + gd * gxa * gy[b]
                    K[e, 3 * a + 1, 3 * b] += we * gxa * gy[b] + gd * gya * gx[b]
                    K[e, 3 * a, 3 * b + 2] += -w * gxa * N[b] + sm * da * gx[b]
                    K[e, 3 * a + 1, 3 * b + 2] += -w * gya * N[b] + sm * da * gy[b]
                    K[e, 3 * a + 2, 3 * b] += w * na * gx[b] + sm * gxa * D[b]
                    K[e, 3 * a + 2, 3 * b + 1] += w * na * gy[b] + sm * gya * D[b]
                    K[e, 3 * a + 2, 3 * b + 2] += spp * (gxa * gx[b] + gya * gy[b])


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.cdivision(True)
cdef void _ns_tet(const double[:, :, ::1] grads, const double[::1] vols,
                  const double[:, :, ::1] u_el, const double[:, ::1] rho_el,
                  const double[:, ::1] eta_q, const double[::1] tau_m, const double[::1] tau_c,
                  const double[:, ::1] fxq, const double[:, ::1] fyq,
                  const double[::1] wq, const double[:, ::1] nsh,
                  double[:, :, ::1] K, double[:, ::1] R) noexcept nogil:
    cdef Py_ssize_t E = vols.shape[0]
    cdef Py_ssize_t e, q, a, b, k
    cdef double jac, w, uqx, uqy, rq
    cdef double adv, we, sm, rr, spp, gd, fx, fy
    cdef double na, da, gxa, gya, common
    cdef double N[4]
    cdef double gx[4]
    cdef double gy[4]
    cdef double D[4]
    for e in range(E):
        jac = 6.0 * vols[e]
        for k in range(4):
            gx[k] = grads[e, k, 0]
            gy[k] = grads[e, k, 1]
        for q in range(4):
            w = wq[q] * jac
            uqx = 0.0
            uqy = 0.0
            rq = 0.0
            for k in range(4):
                N[k] = nsh[q, k]
                uqx += N[k] * u_el[e, k, 0]
                uqy += N[k] * u_el[e, k, 1]
                rq += N[k] * rho_el[e, k]
            for k in range(4):
                D[k] = grads[e, k, 2] + uqx * gx[k] + uqy * gy[k]
            adv = w * rq
            we = w * eta_q[q, e]
            sm = w * tau_m[e]
            rr = sm * rq
            spp = sm / rq
            gd = w * rq * tau_c[e]
            fx = fxq[q, e]
            fy = fyq[q, e]
            for a in range(4):
                na = N[a]
                da = D[a]
                gxa = gx[a]
                gya = gy[a]
                R[e, 3 * a] += adv * fx * na + rr * fx * da
                R[e, 3 * a + 1] += adv * fy * na + rr * fy * da
                R[e, 3 * a + 2] += sm * (gxa * fx + gya * fy)
                for b in range(4):
                    common = adv * na * D[b] + rr * da * D[b]
                    K[e, 3 * a, 3 * b] += common \
                        + we * (2.0 * gxa * gx[b] + gya * gy[b]) \
                        + gd * gxa * gx[b]
                    K[e, 3 * a + 1, 3 * b + 1] += common \
                        + we * (2.0 * gya * gy[b] + gxa * gx[b]) \
                        + gd * gya * gy[b]
                    K[e, 3 * a, 3 * b + 1] += we * gya * gx[b] + gd * gxa * gy[b]
                    K[e, 3 * a + 1, 3 * b] += we * gxa * gy[b] + gd * gya * gx[b]
                    K[e, 3 * a, 3 * b + 2] += -w * gxa * N[b] + sm * da * gx[b]
                    K[e, 3 * a + 1, 3 * b + 2] += -w * gya * N[b] + sm * da * gy[b]
                    K[e, 3 * a + 2, 3 * b] += w * na * gx[b] + sm * gxa * D[b]
                    K[e, 3 * a + 2, 3 * b + 1] += w * na * gy[b] + sm * gya * D[b]
                    K[e, 3 * a + 2, 3 * b + 2] += spp * (gxa * gx[b] + gya * gy[b])


def ns_prism_blocks(tri_grads, areas, dts, u_el, rho_el, eta_q, tau_m, tau_c,
                    fx, fy):
    """Flow blocks for all prisms of an FST slab; see the reference kernel
    for the parameter documentation."""
    areas = _c(areas)
    cdef Py_ssize_t E = areas.shape[0]
    K = np.zeros((E, 18, 18))
    R = np.zeros((E, 18))
    _ns_prism(_c(tri_grads), areas, _c(dts), _c(u_el), _c(rho_el), _c(eta_q),
              _c(tau_m), _c(tau_c), _force_qp(fx, 6, E), _force_qp(fy, 6, E),
              _P_NTRI, _P_S, _P_W, _P_N, K, R)
    return K, R


def ns_tet_blocks(grads, vols, u_el, rho_el, eta_q, tau_m, tau_c, fx, fy):
    """Flow blocks for all tetrahedra of an SST slab; see the reference
    kernel for the parameter documentation."""
    vols = _c(vols)
    cdef Py_ssize_t E = vols.shape[0]
    K = np.zeros((E, 12, 12))
    R = np.zeros((E, 12))
    _ns_tet(_c(grads), vols, _c(u_el), _c(rho_el), _c(eta_q), _c(tau_m),
            _c(tau_c), _force_qp(fx, 4, E), _force_qp(fy, 4, E), _T_W, _T_N,
            K, R)
    return K, R


# ---------------------------------------------------------------------------
# level-set kernels

@cython.boundscheck(False)
@cython.wraparound(False)
@cython.cdivision(True)
cdef void _ls_prism(const double[:, :, ::1] tg, const double[::1] areas, const double[::1] dts,
                    const double[:, :, ::1] u_el, const double[::1] tau_l,
                    const double[:, ::1] ntri, const double[::1] sv, const double[::1] wq,
                    const double[:, ::1] nsh, double[:, :, ::1] K) noexcept nogil:
    cdef Py_ssize_t E = areas.shape[0]
    cdef Py_ssize_t e, q, a, b, k
    cdef double jac, w, s, one_s, dt, uqx, uqy, tl, ta
    cdef double N[6]
    cdef double gx[6]
    cdef double gy[6]
    cdef double gt[6]
    cdef double D[6]
    for e in range(E):
        dt = dts[e]
        jac = 2.0 * areas[e] * dt
        tl = tau_l[e]
        for q in range(6):
            s = sv[q]
            one_s = 1.0 - s
            w = wq[q] * jac
            uqx = 0.0
            uqy = 0.0
            for k in range(6):
                N[k] = nsh[q, k]
                uqx += N[k] * u_el[e, k, 0]
                uqy += N[k] * u_el[e, k, 1]
            for k in range(3):
                gx[k] = tg[e, k, 0] * one_s
                gx[k + 3] = tg[e, k, 0] * s
                gy[k] = tg[e, k, 1] * one_s
                gy[k + 3] = tg[e, k, 1] * s
                gt[k] = -ntri[q, k] / dt
                gt[k + 3] = ntri[q, k] / dt
            for k in range(6):
                D[k] = gt[k] + uqx * gx[k] + uqy * gy[k]
            for a in range(6):
                ta = w * (N[a] + tl * D[a])
                for b in range(6):
                    K[e, a, b] += ta * D[b]


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.cdivision(True)
cdef void _ls_tet(const double[:, :, ::1] grads, const double[::1] vols,
                  const double[:, :, ::1] u_el, const double[::1] tau_l,
                  const double[::1] wq, const double[:, ::1] nsh,
                  double[:, :, ::1] K) noexcept nogil:
    cdef Py_ssize_t E = vols.shape[0]
    cdef Py_ssize_t e, q, a, b, k
    cdef double jac, w, uqx, uqy, tl, ta
    cdef double N[4]
    cdef double D[4]
    for e in range(E):
        jac = 6.0 * vols[e]
        tl = tau_l[e]
        for q in range(4):
            w = wq[q] * jac
            uqx = 0.0
            uqy = 0.0
            for k in range(4):
                N[k] = nsh[q, k]
                uqx += N[k] * u_el[e, k, 0]
                uqy += N[k] * u_el[e, k, 1]
            for k in range(4):
                D[k] = grads[e, k, 2] + uqx * grads[e, k, 0] + uqy * grads[e, k, 1]
            for a in range(4):
                ta = w * (N[a] + tl * D[a])
                for b in range(4):
                    K[e, a, b] += ta * D[b]


def ls_prism_blocks(tri_grads, areas, dts, u_el, tau_l):
    """Level-set advection blocks (E, 6, 6) for an FST slab."""
    areas = _c(areas)
    cdef Py_ssize_t E = areas.shape[0]
    K = np.zeros((E, 6, 6))
    _ls_prism(_c(tri_grads), areas, _c(dts), _c(u_el), _c(tau_l),
              _P_NTRI, _P_S, _P_W, _P_N, K)
    return K


def ls_tet_blocks(grads, vols, u_el, tau_l):
    """Level-set advection blocks (E, 4, 4) for an SST slab."""
    vols = _c(vols)
    cdef Py_ssize_t E = vols.shape[0]
    K = np.zeros((E, 4, 4))
    _ls_tet(_c(grads), vols, _c(u_el), _c(tau_l), _T_W, _T_N, K)
    return K
