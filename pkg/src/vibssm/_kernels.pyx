# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled surface kernels (see ``_kernels_py`` for the reference version)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, pow

cnp.import_array()


cdef inline double _ipow(double x, int e) nogil:
    cdef double r = 1.0
    cdef int i
    for i in range(e):
        r *= x
    return r


cdef void _scale(double dx, double dy, double dz, const long[:, :] exps,
                 const double[:] coef, double* s, double* g) nogil:
    cdef Py_ssize_t t, T = exps.shape[0]
    cdef long ex, ey, ez
    cdef double px, py, pz
    s[0] = 1.0
    g[0] = 0.0
    g[1] = 0.0
    g[2] = 0.0
    for t in range(T):
        ex = exps[t, 0]
        ey = exps[t, 1]
        ez = exps[t, 2]
        px = _ipow(dx, ex)
        py = _ipow(dy, ey)
        pz = _ipow(dz, ez)
        s[0] += coef[t] * px * py * pz
        if ex > 0:
            g[0] += coef[t] * ex * _ipow(dx, ex - 1) * py * pz
        if ey > 0:
            g[1] += coef[t] * ey * px * _ipow(dy, ey - 1) * pz
        if ez > 0:
            g[2] += coef[t] * ez * px * py * _ipow(dz, ez - 1)


def implicit_sdf(q, radii, exps, coef):
    cdef double[:, :] qv = np.ascontiguousarray(q, dtype=np.float64)
    cdef double[:] a = np.ascontiguousarray(radii, dtype=np.float64)
    cdef long[:, :] ev = np.ascontiguousarray(exps, dtype=np.int64)
    cdef double[:] cv = np.ascontiguousarray(coef, dtype=np.float64)
    cdef Py_ssize_t n = qv.shape[0], i
    out_arr = np.empty(n)
    cdef double[:] out = out_arr
    cdef double u0, u1, u2, rho, d0, d1, d2, s, gd, gr0, gr1, gr2, amin
    cdef double g[3]
    amin = min(a[0], a[1], a[2])
    with nogil:
        for i in range(n):
            u0 = qv[i, 0] / a[0]
            u1 = qv[i, 1] / a[1]
            u2 = qv[i, 2] / a[2]
            rho = sqrt(u0 * u0 + u1 * u1 + u2 * u2)
            if rho < 1e-12:
                _scale(1.0, 0.0, 0.0, ev, cv, &s, g)
                out[i] = -s * amin
                continue
            d0 = u0 / rho
            d1 = u1 / rho
            d2 = u2 / rho
            _scale(d0, d1, d2, ev, cv, &s, g)
            gd = g[0] * d0 + g[1] * d1 + g[2] * d2
            gr0 = (d0 - (g[0] - gd * d0) / rho) / a[0]
            gr1 = (d1 - (g[1] - gd * d1) / rho) / a[1]
            gr2 = (d2 - (g[2] - gd * d2) / rho) / a[2]
            out[i] = (rho - s) / sqrt(gr0 * gr0 + gr1 * gr1 + gr2 * gr2)
    return out_arr


cdef void _surface(double* d, const double[:] a, const long[:, :] ev,
                   const double[:] cv, double* x, double* jac) nogil:
    cdef double s
    cdef double g[3]
    cdef int i, j
    _scale(d[0], d[1], d[2], ev, cv, &s, g)
    for i in range(3):
        x[i] = s * a[i] * d[i]
        for j in range(3):
            jac[3 * i + j] = a[i] * d[i] * g[j]
        jac[3 * i + i] += s * a[i]


cdef void _tangent(double* d, double* t1, double* t2) nogil:
    cdef double e0 = 1.0, e1 = 0.0, dot, nrm
    if fabs(d[0]) > 0.9:
        e0 = 0.0
        e1 = 1.0
    dot = e0 * d[0] + e1 * d[1]
    t1[0] = e0 - dot * d[0]
    t1[1] = e1 - dot * d[1]
    t1[2] = -dot * d[2]
    nrm = sqrt(t1[0] * t1[0] + t1[1] * t1[1] + t1[2] * t1[2])
    t1[0] /= nrm
    t1[1] /= nrm
    t1[2] /= nrm
    t2[0] = d[1] * t1[2] - d[2] * t1[1]
    t2[1] = d[2] * t1[0] - d[0] * t1[2]
    t2[2] = d[0] * t1[1] - d[1] * t1[0]


def project_to_surface(q, d0, radii, exps, coef, double tol=1e-6, int max_iter=100):
    cdef double[:, :] qv = np.ascontiguousarray(q, dtype=np.float64)
    dirs_arr = np.array(d0, dtype=np.float64, order="C")
    dirs_arr /= np.linalg.norm(dirs_arr, axis=1, keepdims=True)
    cdef double[:, :] dv = dirs_arr
    cdef double[:] a = np.ascontiguousarray(radii, dtype=np.float64)
    cdef long[:, :] ev = np.ascontiguousarray(exps, dtype=np.int64)
    cdef double[:] cv = np.ascontiguousarray(coef, dtype=np.float64)
    cdef Py_ssize_t n = qv.shape[0], i
    dist_arr = np.empty(n)
    conv_arr = np.zeros(n, dtype=np.uint8)
    cdef double[:] dist = dist_arr
    cdef unsigned char[:] conv = conv_arr
    cdef double d[3]
    cdef double cand[3]
    cdef double x[3]
    cdef double xc[3]
    cdef double jac[9]
    cdef double jc[9]
    cdef double t1[3]
    cdef double t2[3]
    cdef double jt[6]
    cdef double r[3]
    cdef double h00, h01, h11, g0, g1, det, s0, s1, lam, energy, ec, moved, nrm, m0, m1, m2, sc
    cdef int it, k, j
    with nogil:
        for i in range(n):
            for k in range(3):
                d[k] = dv[i, k]
            lam = 1e-3
            _surface(d, a, ev, cv, x, jac)
            energy = 0.0
            for k in range(3):
                energy += 0.5 * (x[k] - qv[i, k]) * (x[k] - qv[i, k])
            for it in range(max_iter):
                _tangent(d, t1, t2)
                for k in range(3):
                    jt[2 * k] = 0.0
                    jt[2 * k + 1] = 0.0
                    for j in range(3):
                        jt[2 * k] += jac[3 * k + j] * t1[j]
                        jt[2 * k + 1] += jac[3 * k + j] * t2[j]
                    r[k] = x[k] - qv[i, k]
                g0 = 0.0
                g1 = 0.0
                h00 = 0.0
                h01 = 0.0
                h11 = 0.0
                for k in range(3):
                    g0 += jt[2 * k] * r[k]
                    g1 += jt[2 * k + 1] * r[k]
                    h00 += jt[2 * k] * jt[2 * k]
                    h01 += jt[2 * k] * jt[2 * k + 1]
                    h11 += jt[2 * k + 1] * jt[2 * k + 1]
                sc = (h00 + h11) / 2.0 + 1e-300
                h00 += lam * sc
                h11 += lam * sc
                det = h00 * h11 - h01 * h01
                s0 = -(h11 * g0 - h01 * g1) / det
                s1 = -(h00 * g1 - h01 * g0) / det
                nrm = 0.0
                for k in range(3):
                    cand[k] = d[k] + t1[k] * s0 + t2[k] * s1
                    nrm += cand[k] * cand[k]
                nrm = sqrt(nrm)
                for k in range(3):
                    cand[k] /= nrm
                _surface(cand, a, ev, cv, xc, jc)
                ec = 0.0
                for k in range(3):
                    ec += 0.5 * (xc[k] - qv[i, k]) * (xc[k] - qv[i, k])
                m0 = jt[0] * s0 + jt[1] * s1
                m1 = jt[2] * s0 + jt[3] * s1
                m2 = jt[4] * s0 + jt[5] * s1
                moved = sqrt(m0 * m0 + m1 * m1 + m2 * m2)
                if ec <= energy:
                    for k in range(3):
                        d[k] = cand[k]
                        x[k] = xc[k]
                    for k in range(9):
                        jac[k] = jc[k]
                    energy = ec
                    lam = lam / 3.0
                    if lam < 1e-12:
                        lam = 1e-12
                    if moved < tol:
                        conv[i] = 1
                        break
                else:
                    lam *= 4.0
                    if lam > 1e12:
                        break
            for k in range(3):
                dv[i, k] = d[k]
            dist[i] = sqrt(2.0 * energy)
    return dirs_arr, dist_arr, conv_arr.astype(bool)
