# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: radial backward/forward sweep and the DNP3 CRC-16.

Mirrors :mod:`vvosim._pykernels` operation for operation.
"""

from libc.math cimport sqrt, fabs

cdef unsigned short CRC_TABLE[256]


cdef void _init_table():
    cdef unsigned int i, j, crc
    for i in range(256):
        crc = i
        for j in range(8):
            if crc & 1:
                crc = (crc >> 1) ^ 0xA6BC
            else:
                crc >>= 1
        CRC_TABLE[i] = <unsigned short>crc


_init_table()


def crc16_dnp(const unsigned char[:] data):
    cdef unsigned int crc = 0
    cdef Py_ssize_t k
    for k in range(data.shape[0]):
        crc = (crc >> 8) ^ CRC_TABLE[(crc ^ data[k]) & 0xFF]
    return (~crc) & 0xFFFF


cdef inline double _curve_q(double v, double v1, double v2, double v3, double v4,
                            double qmax_frac, double s, double p):
    cdef double q, cap, circle
    if v <= v1:
        q = qmax_frac
    elif v < v2:
        q = qmax_frac * (v2 - v) / (v2 - v1)
    elif v <= v3:
        q = 0.0
    elif v < v4:
        q = -qmax_frac * (v - v3) / (v4 - v3)
    else:
        q = -qmax_frac
    q = q * s
    circle = s * s - p * p
    cap = 0.6 * s
    if circle < 0.0:
        circle = 0.0
    circle = sqrt(circle)
    if circle < cap:
        cap = circle
    if q > cap:
        q = cap
    elif q < -cap:
        q = -cap
    return q


cdef void _backward(Py_ssize_t n, Py_ssize_t m, const long[:] order, const long[:] parent,
                    const double[:] ratio, const double[:] pz, const double[:] pi, const double[:] pp,
                    const double[:] qz, const double[:] qi, const double[:] qp,
                    const double[:] pg, const double[:] qg,
                    const long[:] inv_bus, const double[:, :] inv_par,
                    double[:] vr, double[:] vi, double[:] jr, double[:] ji,
                    double[:] inv_q, double[:] qinj) noexcept:
    # inverter Q and load currents at the present voltages, summed toward the root
    cdef Py_ssize_t idx, k, b, par
    cdef double vm2, vm, P, Q, a
    for b in range(n):
        qinj[b] = qg[b]
    for k in range(m):
        b = inv_bus[k]
        vm = sqrt(vr[b] * vr[b] + vi[b] * vi[b])
        inv_q[k] = _curve_q(vm, inv_par[k, 2], inv_par[k, 3], inv_par[k, 4], inv_par[k, 5],
                            inv_par[k, 6], inv_par[k, 0], inv_par[k, 1])
        qinj[b] = qinj[b] + inv_q[k]
    for b in range(n):
        vm2 = vr[b] * vr[b] + vi[b] * vi[b]
        vm = sqrt(vm2)
        P = pz[b] * vm2 + pi[b] * vm + pp[b] - pg[b]
        Q = qz[b] * vm2 + qi[b] * vm + qp[b] - qinj[b]
        jr[b] = (P * vr[b] + Q * vi[b]) / vm2
        ji[b] = (P * vi[b] - Q * vr[b]) / vm2
    for idx in range(n - 1, 0, -1):
        k = order[idx]
        par = parent[k]
        a = ratio[k]
        jr[par] = jr[par] + a * jr[k]
        ji[par] = ji[par] + a * ji[k]


def sweep(const long[:] order, const long[:] parent,
          const double[:] zr, const double[:] zx, const double[:] ratio,
          const double[:] pz, const double[:] pi, const double[:] pp,
          const double[:] qz, const double[:] qi, const double[:] qp,
          const double[:] pg, const double[:] qg,
          const long[:] inv_bus, const double[:, :] inv_par,
          double v_source, double tol, long max_iter,
          double[:] vr, double[:] vi, double[:] jr, double[:] ji,
          double[:] inv_q, double[:] history):
    """Run the sweep in place; returns (iterations, converged).

    ``inv_par`` rows are (s, p, v1, v2, v3, v4, q_max_frac) for inverters whose
    reactive output follows their curve; all arrays are in per-unit. On
    convergence the currents and inverter Q are refreshed once more so they
    belong to the returned voltages.
    """
    cdef Py_ssize_t n = order.shape[0]
    cdef Py_ssize_t m = inv_bus.shape[0]
    cdef Py_ssize_t it, idx, k, b, par
    cdef double nvr, nvi, dv, d, a
    cdef double[:] qinj
    cdef bint converged = False
    import numpy as np
    qinj = np.zeros(n)
    it = 0
    while it < max_iter:
        _backward(n, m, order, parent, ratio, pz, pi, pp, qz, qi, qp, pg, qg,
                  inv_bus, inv_par, vr, vi, jr, ji, inv_q, qinj)
        dv = 0.0
        b = order[0]
        d = fabs(v_source - vr[b]) + fabs(vi[b])
        vr[b] = v_source
        vi[b] = 0.0
        if d > dv:
            dv = d
        for idx in range(1, n):
            k = order[idx]
            par = parent[k]
            a = ratio[k]
            nvr = a * vr[par] - (zr[k] * jr[k] - zx[k] * ji[k])
            nvi = a * vi[par] - (zr[k] * ji[k] + zx[k] * jr[k])
            d = sqrt((nvr - vr[k]) * (nvr - vr[k]) + (nvi - vi[k]) * (nvi - vi[k]))
            if d > dv:
                dv = d
            vr[k] = nvr
            vi[k] = nvi
        history[it] = dv
        it += 1
        if dv < tol:
            converged = True
            _backward(n, m, order, parent, ratio, pz, pi, pp, qz, qi, qp, pg, qg,
                      inv_bus, inv_par, vr, vi, jr, ji, inv_q, qinj)
            break
    return it, converged
