"""Numba-compiled inner loops for the local calibration equations.

The logistic local moment at each evaluation point is a monotone scalar
equation; solving it per point with a bracketed Newton in compiled code
avoids materialising sigmoid matrices per iteration.  The sigmoid is
evaluated in odds form, ``g = 1 - 1 / (1 + t * exp(offset))`` with
``t = exp(r)``, so the inner loop is a single division per element.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def newton_r_logit(w_mat, exp_off, y, r0, tol, max_iter, bracket):
    """Row-wise bracketed Newton for sum_i w_ji (y_i - expit(off_i + r_j)) = 0.

    ``w_mat`` rows must be sign-normalised (nonnegative) and ``exp_off``
    holds ``exp(offsets)``.  Returns ``(r, status, abs_f)`` with status
    0 ok, 1 no root (responses one-sided), 2 iteration exhaustion.
    """
    m, s = w_mat.shape
    r = np.empty(m)
    status = np.zeros(m, dtype=np.int64)
    abs_f = np.zeros(m)
    for j in range(m):
        swy = 0.0
        sw = 0.0
        for i in range(s):
            swy += w_mat[j, i] * y[i]
            sw += w_mat[j, i]
        if not (swy > 0.0 and swy < sw):
            r[j] = np.nan
            status[j] = 1
            continue
        base = swy - sw
        lo = -bracket
        hi = bracket
        rj = r0[j]
        if rj <= lo or rj >= hi:
            rj = 0.0
        ok = False
        f = 0.0
        for _ in range(max_iter):
            t = math.exp(rj)
            f = base
            fp = 0.0
            for i in range(s):
                d = 1.0 / (1.0 + t * exp_off[i])
                w = w_mat[j, i]
                wd = w * d
                f += wd
                fp -= wd * (1.0 - d)
            if abs(f) <= tol:
                ok = True
                break
            if f > 0.0:
                lo = rj
            else:
                hi = rj
            if fp != 0.0:
                rn = rj - f / fp
            else:
                rn = 0.5 * (lo + hi)
            if not (lo < rn < hi):
                rn = 0.5 * (lo + hi)
            rj = rn
        r[j] = rj
        abs_f[j] = abs(f)
        if not ok:
            status[j] = 2
    return r, status, abs_f
