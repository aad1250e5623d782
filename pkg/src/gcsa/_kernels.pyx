# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sector-overlap kernels.

Mirrors the pure-Python path in :mod:`gcsa.geometry` operation for operation;
both clip the discretized viewing sectors with Sutherland-Hodgman.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, fabs
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef inline double _cross(double ax, double ay, double bx, double by, double px, double py) nogil:
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


cdef void _fill_sector(double x, double y, double heading, double r, double theta,
                       int n_chords, double* out) nogil:
    cdef int k
    cdef double start = heading - 0.5 * theta
    cdef double step = theta / n_chords
    cdef double ang
    out[0] = x
    out[1] = y
    for k in range(n_chords + 1):
        ang = start + k * step
        out[2 * (k + 1)] = x + r * cos(ang)
        out[2 * (k + 1) + 1] = y + r * sin(ang)


cdef double _clip_area(double* subj, int ns, double* clip, int nc,
                       double* buf_a, double* buf_b) nogil:
    """Area of convex ``subj`` clipped by convex CCW ``clip``."""
    cdef int i, j, n_in, n_out
    cdef double ax, ay, bx, by, sx, sy, ex, ey, ds, de, t, area
    cdef double* src = buf_a
    cdef double* dst = buf_b
    cdef double* tmp
    for i in range(2 * ns):
        src[i] = subj[i]
    n_in = ns
    for j in range(nc):
        if n_in < 3:
            return 0.0
        ax = clip[2 * j]
        ay = clip[2 * j + 1]
        bx = clip[2 * ((j + 1) % nc)]
        by = clip[2 * ((j + 1) % nc) + 1]
        n_out = 0
        sx = src[2 * (n_in - 1)]
        sy = src[2 * (n_in - 1) + 1]
        ds = _cross(ax, ay, bx, by, sx, sy)
        for i in range(n_in):
            ex = src[2 * i]
            ey = src[2 * i + 1]
            de = _cross(ax, ay, bx, by, ex, ey)
            if de >= 0.0:
                if ds < 0.0:
                    t = ds / (ds - de)
                    dst[2 * n_out] = sx + t * (ex - sx)
                    dst[2 * n_out + 1] = sy + t * (ey - sy)
                    n_out += 1
                dst[2 * n_out] = ex
                dst[2 * n_out + 1] = ey
                n_out += 1
            elif ds >= 0.0:
                t = ds / (ds - de)
                dst[2 * n_out] = sx + t * (ex - sx)
                dst[2 * n_out + 1] = sy + t * (ey - sy)
                n_out += 1
            sx = ex
            sy = ey
            ds = de
        tmp = src
        src = dst
        dst = tmp
        n_in = n_out
    if n_in < 3:
        return 0.0
    area = 0.0
    for i in range(n_in):
        j = (i + 1) % n_in
        area += src[2 * i] * src[2 * j + 1] - src[2 * j] * src[2 * i + 1]
    return 0.5 * fabs(area)


cdef double _pair(double[:, ::1] a, Py_ssize_t i, double[:, ::1] b, Py_ssize_t j,
                  double r, double theta, int n_chords, double dz_max, double norm,
                  double* pa, double* pb, double* buf_a, double* buf_b) nogil:
    cdef double dx = a[i, 0] - b[j, 0]
    cdef double dy = a[i, 1] - b[j, 1]
    cdef int nv = n_chords + 2
    if fabs(a[i, 2] - b[j, 2]) > dz_max:
        return 0.0
    if dx * dx + dy * dy >= 4.0 * r * r:
        return 0.0
    _fill_sector(a[i, 0], a[i, 1], a[i, 3], r, theta, n_chords, pa)
    _fill_sector(b[j, 0], b[j, 1], b[j, 3], r, theta, n_chords, pb)
    return _clip_area(pa, nv, pb, nv, buf_a, buf_b) / norm


def overlap_matrix(double[:, ::1] a, double[:, ::1] b, double r, double theta,
                   int n_chords, double dz_max):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    cdef int nv = n_chords + 2
    cdef double norm = 0.5 * r * r * n_chords * sin(theta / n_chords)
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double* pa = <double*> malloc(2 * nv * sizeof(double))
    cdef double* pb = <double*> malloc(2 * nv * sizeof(double))
    cdef double* buf_a = <double*> malloc(4 * nv * sizeof(double))
    cdef double* buf_b = <double*> malloc(4 * nv * sizeof(double))
    try:
        with nogil:
            for i in range(n):
                for j in range(m):
                    o[i, j] = _pair(a, i, b, j, r, theta, n_chords, dz_max, norm,
                                    pa, pb, buf_a, buf_b)
    finally:
        free(pa)
        free(pb)
        free(buf_a)
        free(buf_b)
    return out


def overlap_pairs(double[:, ::1] a, double[:, ::1] b, double r, double theta,
                  int n_chords, double dz_max):
    cdef Py_ssize_t n = a.shape[0], i
    cdef int nv = n_chords + 2
    cdef double norm = 0.5 * r * r * n_chords * sin(theta / n_chords)
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double* pa = <double*> malloc(2 * nv * sizeof(double))
    cdef double* pb = <double*> malloc(2 * nv * sizeof(double))
    cdef double* buf_a = <double*> malloc(4 * nv * sizeof(double))
    cdef double* buf_b = <double*> malloc(4 * nv * sizeof(double))
    try:
        with nogil:
            for i in range(n):
                o[i] = _pair(a, i, b, i, r, theta, n_chords, dz_max, norm,
                             pa, pb, buf_a, buf_b)
    finally:
        free(pa)
        free(pb)
        free(buf_a)
        free(buf_b)
    return out
