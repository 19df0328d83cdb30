"""Pure-Python fallbacks for the compiled kernels in ``_ckernels.pyx``.

Same signatures, same arithmetic order; used when the extension is not built
or ``VVOSIM_PURE_PYTHON=1`` is set.
"""

from math import sqrt


def _make_table():
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ 0xA6BC if crc & 1 else crc >> 1
        table.append(crc)
    return tuple(table)


_CRC_TABLE = _make_table()


def crc16_dnp(data) -> int:
    crc = 0
    table = _CRC_TABLE
    for byte in bytes(data):
        crc = (crc >> 8) ^ table[(crc ^ byte) & 0xFF]
    return ~crc & 0xFFFF


def _curve_q(v, v1, v2, v3, v4, qmax_frac, s, p):
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


def sweep(order, parent, zr, zx, ratio, pz, pi, pp, qz, qi, qp, pg, qg,
          inv_bus, inv_par, v_source, tol, max_iter,
          vr, vi, jr, ji, inv_q, history):
    # plain lists are much faster than numpy scalars in this loop
    n = len(order)
    order, parent = [int(k) for k in order], [int(k) for k in parent]
    zr, zx, ratio = list(zr), list(zx), list(ratio)
    pz, pi, pp, qz, qi, qp, pg, qg = (list(a) for a in (pz, pi, pp, qz, qi, qp, pg, qg))
    inv_bus = [int(b) for b in inv_bus]
    inv_par = [list(row) for row in inv_par]
    Vr, Vi = list(vr), list(vi)
    Jr, Ji = [0.0] * n, [0.0] * n
    Iq = [0.0] * len(inv_bus)
    qinj = [0.0] * n

    def backward():
        # inverter Q and load currents at the present voltages, summed toward the root
        for b in range(n):
            qinj[b] = qg[b]
        for k, b in enumerate(inv_bus):
            s, p, v1, v2, v3, v4, qf = inv_par[k]
            vm = sqrt(Vr[b] * Vr[b] + Vi[b] * Vi[b])
            Iq[k] = _curve_q(vm, v1, v2, v3, v4, qf, s, p)
            qinj[b] = qinj[b] + Iq[k]
        for b in range(n):
            vm2 = Vr[b] * Vr[b] + Vi[b] * Vi[b]
            vm = sqrt(vm2)
            P = pz[b] * vm2 + pi[b] * vm + pp[b] - pg[b]
            Q = qz[b] * vm2 + qi[b] * vm + qp[b] - qinj[b]
            Jr[b] = (P * Vr[b] + Q * Vi[b]) / vm2
            Ji[b] = (P * Vi[b] - Q * Vr[b]) / vm2
        for idx in range(n - 1, 0, -1):
            k = order[idx]
            par = parent[k]
            a = ratio[k]
            Jr[par] = Jr[par] + a * Jr[k]
            Ji[par] = Ji[par] + a * Ji[k]

    converged = False
    it = 0
    while it < max_iter:
        backward()
        b = order[0]
        dv = abs(v_source - Vr[b]) + abs(Vi[b])
        Vr[b] = v_source
        Vi[b] = 0.0
        for idx in range(1, n):
            k = order[idx]
            par = parent[k]
            a = ratio[k]
            nvr = a * Vr[par] - (zr[k] * Jr[k] - zx[k] * Ji[k])
            nvi = a * Vi[par] - (zr[k] * Ji[k] + zx[k] * Jr[k])
            d = sqrt((nvr - Vr[k]) * (nvr - Vr[k]) + (nvi - Vi[k]) * (nvi - Vi[k]))
            if d > dv:
                dv = d
            Vr[k] = nvr
            Vi[k] = nvi
        history[it] = dv
        it += 1
        if dv < tol:
            converged = True
            # currents and inverter Q must belong to the returned voltages
            backward()
            break
    vr[:] = Vr
    vi[:] = Vi
    jr[:] = Jr
    ji[:] = Ji
    if len(Iq):
        inv_q[:] = Iq
    return it, converged
