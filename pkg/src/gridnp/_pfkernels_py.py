"""Numpy implementation of the power-flow kernels (fallback backend)."""
import numpy as np


def _rows(indptr):
    return np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))


def injections(indptr, indices, g, b, vm, va):
    rows = _rows(indptr)
    t = va[rows] - va[indices]
    c, s = np.cos(t), np.sin(t)
    gv = g * vm[indices]
    bv = b * vm[indices]
    n = len(vm)
    p = vm * np.bincount(rows, gv * c + bv * s, minlength=n)
    q = vm * np.bincount(rows, gv * s - bv * c, minlength=n)
    return p, q


def jacobian_entries(indptr, indices, g, b, vm, va, p, q):
    rows = _rows(indptr)
    t = va[rows] - va[indices]
    c, s = np.cos(t), np.sin(t)
    a1 = g * s - b * c
    a2 = g * c + b * s
    vk = vm[rows]
    vl = vm[indices]
    out = np.empty((4, len(indices)))
    out[0] = vk * vl * a1
    out[1] = vk * a2
    out[2] = -vk * vl * a2
    out[3] = vk * a1
    d = rows == indices
    k = rows[d]
    out[0, d] = -q[k] - b[d] * vm[k] ** 2
    out[1, d] = p[k] / vm[k] + g[d] * vm[k]
    out[2, d] = p[k] - g[d] * vm[k] ** 2
    out[3, d] = q[k] / vm[k] - b[d] * vm[k]
    return out


def jacobian_data(indptr, indices, g, b, vm, va, p, q, dest, size):
    ent = jacobian_entries(indptr, indices, g, b, vm, va, p, q)
    out = np.zeros(size)
    keep = dest >= 0
    out[dest[keep]] = ent[keep]
    return out
