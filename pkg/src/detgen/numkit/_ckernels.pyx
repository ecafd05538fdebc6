# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Dense products for the MLP hot path.

Every output element is accumulated in a fixed sequential order over the
reduced index, so a row's result never depends on batch size or on which
other rows share the call. ``_pykernels`` implements the same order in numpy;
the two backends agree bit for bit.
"""
import numpy as np


def affine(const double[:, ::1] x, const double[:, ::1] w, const double[::1] b):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t n_in = x.shape[1]
    cdef Py_ssize_t n_out = w.shape[1]
    cdef Py_ssize_t i, k, j
    cdef double xv
    if w.shape[0] != n_in or b.shape[0] != n_out:
        raise ValueError("affine: shape mismatch")
    out = np.zeros((n, n_out))
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for k in range(n_in):
                xv = x[i, k]
                for j in range(n_out):
                    o[i, j] += xv * w[k, j]
            for j in range(n_out):
                o[i, j] += b[j]
    return out


def grad_weight(const double[:, ::1] a, const double[:, ::1] d):
    """sum_i outer(a[i], d[i]), rows accumulated in order."""
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t n_in = a.shape[1]
    cdef Py_ssize_t n_out = d.shape[1]
    cdef Py_ssize_t i, k, j
    cdef double av
    if d.shape[0] != n:
        raise ValueError("grad_weight: shape mismatch")
    out = np.zeros((n_in, n_out))
    cdef double[:, ::1] g = out
    with nogil:
        for i in range(n):
            for k in range(n_in):
                av = a[i, k]
                for j in range(n_out):
                    g[k, j] += av * d[i, j]
    return out


def grad_input(const double[:, ::1] d, const double[:, ::1] wt):
    """d @ wt, with ``wt`` the transposed weight (n_out, n_in)."""
    cdef Py_ssize_t n = d.shape[0]
    cdef Py_ssize_t n_out = d.shape[1]
    cdef Py_ssize_t n_in = wt.shape[1]
    cdef Py_ssize_t i, k, j
    cdef double dv
    if wt.shape[0] != n_out:
        raise ValueError("grad_input: shape mismatch")
    out = np.zeros((n, n_in))
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(n_out):
                dv = d[i, j]
                for k in range(n_in):
                    o[i, k] += dv * wt[j, k]
    return out
