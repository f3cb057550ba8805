# cython: language_level=3
"""Compiled versions of the hot kernels (see _pure.py for the reference
implementations and the input contracts)."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, log1p

cnp.import_array()


def cox_breslow_terms(double[:, ::1] X, cnp.int64_t[::1] ages,
                      cnp.uint8_t[::1] events, double[::1] w, double[::1] lps):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t p = X.shape[1]
    grad_arr = np.zeros(p)
    hess_arr = np.zeros((p, p))
    s1_arr = np.zeros(p)
    s2_arr = np.zeros((p, p))
    ex_arr = np.zeros(p)
    cdef double[::1] grad = grad_arr
    cdef double[:, ::1] hess = hess_arr
    cdef double[::1] s1 = s1_arr
    cdef double[:, ::1] s2 = s2_arr
    cdef double[::1] ex = ex_arr

    cdef double nll = 0.0
    cdef double s0 = 0.0
    cdef double wi, d, sum_lp, mk, ml, inv_s0
    cdef Py_ssize_t i = 0, j, r, k, l
    cdef cnp.int64_t a

    while i < n:
        a = ages[i]
        j = i
        while j < n and ages[j] == a:
            wi = w[j]
            s0 += wi
            for k in range(p):
                s1[k] += wi * X[j, k]
                for l in range(p):
                    s2[k, l] += wi * X[j, k] * X[j, l]
            j += 1
        d = 0.0
        sum_lp = 0.0
        for k in range(p):
            ex[k] = 0.0
        for r in range(i, j):
            if events[r]:
                d += 1.0
                sum_lp += lps[r]
                for k in range(p):
                    ex[k] += X[r, k]
        if d > 0.0:
            nll -= sum_lp - d * log(s0)
            inv_s0 = 1.0 / s0
            for k in range(p):
                mk = s1[k] * inv_s0
                grad[k] -= ex[k] - d * mk
                for l in range(p):
                    ml = s1[l] * inv_s0
                    hess[k, l] += d * (s2[k, l] * inv_s0 - mk * ml)
        i = j

    if not np.isfinite(nll):
        raise FloatingPointError("partial likelihood overflow; rescale covariates")
    return nll, grad_arr, hess_arr


def mf_epoch(double[:, ::1] user_vecs, double[:, ::1] item_vecs, double[::1] item_bias,
             cnp.int64_t[::1] users, cnp.int64_t[::1] pos, cnp.int64_t[::1] neg,
             double lr, double reg):
    cdef Py_ssize_t n = users.shape[0]
    cdef Py_ssize_t dim = user_vecs.shape[1]
    buf = np.empty((3, dim))
    cdef double[:, ::1] tmp = buf
    cdef double total = 0.0
    cdef double s, e, g
    cdef Py_ssize_t t, k
    cdef cnp.int64_t u, i, j

    for t in range(n):
        u = users[t]
        i = pos[t]
        j = neg[t]
        s = item_bias[i] - item_bias[j]
        for k in range(dim):
            tmp[0, k] = user_vecs[u, k]
            tmp[1, k] = item_vecs[i, k]
            tmp[2, k] = item_vecs[j, k]
            s += tmp[0, k] * (tmp[1, k] - tmp[2, k])
        if s > 0.0:
            e = exp(-s)
            total += log1p(e)
            g = e / (1.0 + e)
        else:
            e = exp(s)
            total += -s + log1p(e)
            g = 1.0 / (1.0 + e)
        for k in range(dim):
            user_vecs[u, k] += lr * (g * (tmp[1, k] - tmp[2, k]) - reg * tmp[0, k])
            item_vecs[i, k] += lr * (g * tmp[0, k] - reg * tmp[1, k])
            item_vecs[j, k] += lr * (-g * tmp[0, k] - reg * tmp[2, k])
        item_bias[i] += lr * (g - reg * item_bias[i])
        item_bias[j] += lr * (-g - reg * item_bias[j])
    return total
