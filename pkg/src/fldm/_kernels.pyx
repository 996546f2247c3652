# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled elementwise kernels for DDIM steps, guidance and fusion.

Mirrors ``_kernels_py`` operation-for-operation.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef cnp.ndarray _c64(object a):
    # skip the conversion calls when the input is already usable
    if cnp.PyArray_Check(a):
        arr = <cnp.ndarray>a
        if cnp.PyArray_TYPE(arr) == cnp.NPY_DOUBLE and cnp.PyArray_IS_C_CONTIGUOUS(arr):
            return arr
    return np.ascontiguousarray(a, dtype=np.float64)


cdef cnp.ndarray _like(object b, cnp.ndarray x):
    """``b`` as a C-contiguous float64 array with the shape of ``x``."""
    cdef cnp.ndarray y = _c64(b)
    if cnp.PyArray_SAMESHAPE(x, y):
        return y
    return np.ascontiguousarray(np.broadcast_to(b, np.shape(x)), dtype=np.float64)


cdef inline cnp.ndarray _empty_like(cnp.ndarray a):
    return cnp.PyArray_EMPTY(a.ndim, a.shape, cnp.NPY_DOUBLE, 0)


def ddim_step(z, eps, double ab_t, double ab_prev):
    cdef cnp.ndarray zz = _c64(z)
    cdef cnp.ndarray ee = _like(eps, zz)
    cdef cnp.ndarray out = _empty_like(zz)
    cdef const double *zv = <const double *>cnp.PyArray_DATA(zz)
    cdef const double *ev = <const double *>cnp.PyArray_DATA(ee)
    cdef double *ov = <double *>cnp.PyArray_DATA(out)
    cdef double sa_t = sqrt(ab_t), s1_t = sqrt(1.0 - ab_t)
    cdef double sa_p = sqrt(ab_prev), s1_p = sqrt(1.0 - ab_prev)
    cdef Py_ssize_t i, n = cnp.PyArray_SIZE(zz)
    for i in range(n):
        ov[i] = sa_p * ((zv[i] - s1_t * ev[i]) / sa_t) + s1_p * ev[i]
    return out


def ddim_invert(z, eps, double ab_t, double ab_prev):
    cdef cnp.ndarray zz = _c64(z)
    cdef cnp.ndarray ee = _like(eps, zz)
    cdef cnp.ndarray out = _empty_like(zz)
    cdef const double *zv = <const double *>cnp.PyArray_DATA(zz)
    cdef const double *ev = <const double *>cnp.PyArray_DATA(ee)
    cdef double *ov = <double *>cnp.PyArray_DATA(out)
    cdef double sa_t = sqrt(ab_t), s1_t = sqrt(1.0 - ab_t)
    cdef double sa_p = sqrt(ab_prev), s1_p = sqrt(1.0 - ab_prev)
    cdef Py_ssize_t i, n = cnp.PyArray_SIZE(zz)
    for i in range(n):
        ov[i] = sa_t * ((zv[i] - s1_p * ev[i]) / sa_p) + s1_t * ev[i]
    return out


def fuse(z_video, z_image, double alpha):
    cdef cnp.ndarray a = _c64(z_video)
    cdef cnp.ndarray b = _like(z_image, a)
    cdef cnp.ndarray out = _empty_like(a)
    cdef const double *av = <const double *>cnp.PyArray_DATA(a)
    cdef const double *bv = <const double *>cnp.PyArray_DATA(b)
    cdef double *ov = <double *>cnp.PyArray_DATA(out)
    cdef double beta = 1.0 - alpha
    cdef Py_ssize_t i, n = cnp.PyArray_SIZE(a)
    for i in range(n):
        ov[i] = alpha * av[i] + beta * bv[i]
    return out


def cfg(eps_uncond, eps_cond, double scale):
    cdef cnp.ndarray a = _c64(eps_uncond)
    cdef cnp.ndarray b = _like(eps_cond, a)
    cdef cnp.ndarray out = _empty_like(a)
    cdef const double *av = <const double *>cnp.PyArray_DATA(a)
    cdef const double *bv = <const double *>cnp.PyArray_DATA(b)
    cdef double *ov = <double *>cnp.PyArray_DATA(out)
    cdef Py_ssize_t i, n = cnp.PyArray_SIZE(a)
    for i in range(n):
        ov[i] = av[i] + scale * (bv[i] - av[i])
    return out


def mean_pairwise_cosine(features):
    cdef const double[:, ::1] f = np.ascontiguousarray(features, dtype=np.float64)
    cdef Py_ssize_t n = f.shape[0], k = f.shape[1]
    cdef Py_ssize_t i, j, c
    cdef double total = 0.0, dot
    cdef Py_ssize_t pairs = n * (n - 1) // 2
    for i in range(n):
        for j in range(i + 1, n):
            dot = 0.0
            for c in range(k):
                dot += f[i, c] * f[j, c]
            total += dot
    return total / pairs
