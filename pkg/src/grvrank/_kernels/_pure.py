"""Numpy implementations of the hot kernels.

These are the reference/fallback versions of the compiled routines in
``_speedups.pyx``; both backends take identical, pre-sorted inputs and
produce the same results up to floating-point associativity.
"""

from __future__ import annotations

import numpy as np


def cox_breslow_terms(X, ages, events, w, lps):
    """Unpenalized Breslow negative log partial likelihood with gradient and Hessian.

    Inputs must be sorted by observed age DESCENDING (ties contiguous):
    X (n,p) covariates, ages (n,) int, events (n,) uint8, w = exp(shifted lp),
    lps = shifted lp. The shift cancels in every term, so no correction is
    needed. Risk sets accumulate as a running sum over age groups: the risk
    set of an event at age a is every item with observed age >= a.
    """
    n, p = X.shape
    nll = 0.0
    grad = np.zeros(p)
    hess = np.zeros((p, p))

    starts = np.concatenate(([0], 1 + np.nonzero(np.diff(ages))[0]))
    ends = np.concatenate((starts[1:], [n]))

    s0 = 0.0
    s1 = np.zeros(p)
    s2 = np.zeros((p, p))
    for a, b in zip(starts, ends):
        wg = w[a:b]
        Xg = X[a:b]
        s0 += float(wg.sum())
        s1 += wg @ Xg
        s2 += (wg[:, None] * Xg).T @ Xg
        ev = events[a:b].astype(bool)
        d = int(np.count_nonzero(ev))
        if d == 0:
            continue
        nll -= float(lps[a:b][ev].sum()) - d * np.log(s0)
        m = s1 / s0
        grad -= Xg[ev].sum(axis=0) - d * m
        hess += d * (s2 / s0 - np.outer(m, m))
    if not np.isfinite(nll):
        raise FloatingPointError("partial likelihood overflow; rescale covariates")
    return nll, grad, hess


def mf_epoch(user_vecs, item_vecs, item_bias, users, pos, neg, lr, reg):
    """One in-place epoch of pairwise-ranking SGD over (user, pos, neg) triples.

    Updates run strictly in triple order so results are reproducible for a
    fixed sampling sequence. Returns the summed pairwise loss -log(sigmoid(s))
    evaluated before each update.
    """
    total = 0.0
    for u, i, j in zip(users, pos, neg):
        pu = user_vecs[u].copy()
        qi = item_vecs[i].copy()
        qj = item_vecs[j].copy()
        s = item_bias[i] - item_bias[j] + float(pu @ (qi - qj))
        if s > 0:
            total += np.log1p(np.exp(-s))
            g = np.exp(-s) / (1.0 + np.exp(-s))
        else:
            total += -s + np.log1p(np.exp(s))
            g = 1.0 / (1.0 + np.exp(s))
        user_vecs[u] += lr * (g * (qi - qj) - reg * pu)
        item_vecs[i] += lr * (g * pu - reg * qi)
        item_vecs[j] += lr * (-g * pu - reg * qj)
        item_bias[i] += lr * (g - reg * item_bias[i])
        item_bias[j] += lr * (-g - reg * item_bias[j])
    return total
