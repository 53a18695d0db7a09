# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled power-flow kernels over a CSR bus admittance pattern."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos

cnp.import_array()


def injections(const cnp.intp_t[::1] indptr, const cnp.intp_t[::1] indices,
               const double[::1] g, const double[::1] b,
               const double[::1] vm, const double[::1] va):
    cdef Py_ssize_t n = vm.shape[0], k, e, l
    cdef double pk, qk, t, c, s, gv, bv
    p_out = np.empty(n)
    q_out = np.empty(n)
    cdef double[::1] p = p_out
    cdef double[::1] q = q_out
    for k in range(n):
        pk = 0.0
        qk = 0.0
        for e in range(indptr[k], indptr[k + 1]):
            l = indices[e]
            t = va[k] - va[l]
            c = cos(t)
            s = sin(t)
            gv = g[e] * vm[l]
            bv = b[e] * vm[l]
            pk += gv * c + bv * s
            qk += gv * s - bv * c
        p[k] = vm[k] * pk
        q[k] = vm[k] * qk
    return p_out, q_out


def jacobian_entries(const cnp.intp_t[::1] indptr, const cnp.intp_t[::1] indices,
                     const double[::1] g, const double[::1] b,
                     const double[::1] vm, const double[::1] va,
                     const double[::1] p, const double[::1] q):
    cdef Py_ssize_t n = vm.shape[0], nnz = indices.shape[0], k, e, l
    cdef double t, c, s, a1, a2
    out = np.empty((4, nnz))
    cdef double[:, ::1] o = out
    for k in range(n):
        for e in range(indptr[k], indptr[k + 1]):
            l = indices[e]
            if l == k:
                o[0, e] = -q[k] - b[e] * vm[k] * vm[k]
                o[1, e] = p[k] / vm[k] + g[e] * vm[k]
                o[2, e] = p[k] - g[e] * vm[k] * vm[k]
                o[3, e] = q[k] / vm[k] - b[e] * vm[k]
            else:
                t = va[k] - va[l]
                c = cos(t)
                s = sin(t)
                a1 = g[e] * s - b[e] * c
                a2 = g[e] * c + b[e] * s
                o[0, e] = vm[k] * vm[l] * a1
                o[1, e] = vm[k] * a2
                o[2, e] = -vm[k] * vm[l] * a2
                o[3, e] = vm[k] * a1
    return out


def jacobian_data(const cnp.intp_t[::1] indptr, const cnp.intp_t[::1] indices,
                  const double[::1] g, const double[::1] b,
                  const double[::1] vm, const double[::1] va,
                  const double[::1] p, const double[::1] q,
                  const cnp.intp_t[:, ::1] dest, Py_ssize_t size):
    """Scatter Jacobian entries straight into CSC storage order.

    ``dest[j, e]`` is the storage slot of block ``j`` for admittance entry
    ``e`` or -1 when that entry does not appear in the reduced Jacobian.
    """
    cdef Py_ssize_t n = vm.shape[0], k, e, l, d
    cdef double t, c, s, a1, a2, v0, v1, v2, v3
    out = np.zeros(size)
    cdef double[::1] o = out
    for k in range(n):
        for e in range(indptr[k], indptr[k + 1]):
            l = indices[e]
            if l == k:
                v0 = -q[k] - b[e] * vm[k] * vm[k]
                v1 = p[k] / vm[k] + g[e] * vm[k]
                v2 = p[k] - g[e] * vm[k] * vm[k]
                v3 = q[k] / vm[k] - b[e] * vm[k]
            else:
                t = va[k] - va[l]
                c = cos(t)
                s = sin(t)
                a1 = g[e] * s - b[e] * c
                a2 = g[e] * c + b[e] * s
                v0 = vm[k] * vm[l] * a1
                v1 = vm[k] * a2
                v2 = -vm[k] * vm[l] * a2
                v3 = vm[k] * a1
            d = dest[0, e]
            if d >= 0:
                o[d] = v0
            d = dest[1, e]
            if d >= 0:
                o[d] = v1
            d = dest[2, e]
            if d >= 0:
                o[d] = v2
            d = dest[3, e]
            if d >= 0:
                o[d] = v3
    return out
