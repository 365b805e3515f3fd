# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled register-machine backend.

Point-major scalar loops over the flattened program; semantics (including the
sticky per-row validity rule) mirror ``pybackend`` exactly.
"""

from libc.math cimport cos, exp, fabs, isfinite, log, sin, sqrt
from libc.stdlib cimport free, malloc

import numpy as np

cdef double TRIG_ARG_MAX = 1e8  # beyond this the phase of sin/cos is unresolvable

cdef enum:
    OP_CONST = 0
    OP_VAR = 1
    OP_ADD = 2
    OP_SUB = 3
    OP_MUL = 4
    OP_DIV = 5
    OP_SIN = 6
    OP_COS = 7
    OP_EXP = 8
    OP_LOG = 9
    OP_SQRT = 10


cdef inline bint _forward_point(const int* ops, const int* arg1, const int* arg2,
                                Py_ssize_t n_steps, const double* consts,
                                const double* row, double* regs) noexcept nogil:
    cdef Py_ssize_t i
    cdef int op
    cdef double r
    cdef bint good = True
    for i in range(n_steps):
        op = ops[i]
        if op == OP_CONST:
            regs[i] = consts[arg1[i]]
            continue
        elif op == OP_VAR:
            r = row[arg1[i]]
        elif op == OP_ADD:
            r = regs[arg1[i]] + regs[arg2[i]]
        elif op == OP_SUB:
            r = regs[arg1[i]] - regs[arg2[i]]
        elif op == OP_MUL:
            r = regs[arg1[i]] * regs[arg2[i]]
        elif op == OP_DIV:
            r = regs[arg1[i]] / regs[arg2[i]]
        elif op == OP_SIN:
            if fabs(regs[arg1[i]]) > TRIG_ARG_MAX:
                good = False
            r = sin(regs[arg1[i]])
        elif op == OP_COS:
            if fabs(regs[arg1[i]]) > TRIG_ARG_MAX:
                good = False
            r = cos(regs[arg1[i]])
        elif op == OP_EXP:
            r = exp(regs[arg1[i]])
        elif op == OP_LOG:
            r = log(regs[arg1[i]])
        else:  # OP_SQRT
            r = sqrt(regs[arg1[i]])
        regs[i] = r
        if not isfinite(r):
            good = False
    return good


def evaluate(const int[::1] ops, const int[::1] arg1, const int[::1] arg2,
             const double[::1] consts, const double[:, ::1] X):
    """Program values on each row of X and the per-row validity mask."""
    cdef Py_ssize_t n_steps = ops.shape[0]
    cdef Py_ssize_t n = X.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    valid_arr = np.ones(n, dtype=np.uint8)
    cdef double[::1] out = out_arr
    cdef unsigned char[::1] valid = valid_arr
    cdef double* regs = <double*> malloc(n_steps * sizeof(double))
    if regs == NULL:
        raise MemoryError()
    cdef Py_ssize_t p
    try:
        with nogil:
            for p in range(n):
                if not _forward_point(&ops[0], &arg1[0], &arg2[0], n_steps,
                                      &consts[0] if consts.shape[0] else NULL,
                                      &X[p, 0] if X.shape[1] else NULL, regs):
                    valid[p] = 0
                out[p] = regs[n_steps - 1]
    finally:
        free(regs)
    return out_arr, valid_arr.view(np.bool_)


def mse_and_grad(const int[::1] ops, const int[::1] arg1, const int[::1] arg2,
                 const double[::1] consts, const double[:, ::1] X,
                 const double[::1] y):
    """MSE against y and its gradient w.r.t. each constant slot."""
    cdef Py_ssize_t n_steps = ops.shape[0]
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t n_slots = consts.shape[0]
    grad_arr = np.zeros(n_slots, dtype=np.float64)
    cdef double[::1] grad = grad_arr
    cdef double* regs = <double*> malloc(2 * n_steps * sizeof(double))
    if regs == NULL:
        raise MemoryError()
    cdef double* adj = regs + n_steps
    cdef Py_ssize_t p, i
    cdef int op
    cdef double g, resid, mse
    cdef double sse = 0.0
    cdef bint all_ok = True
    try:
        with nogil:
            for p in range(n):
                if not _forward_point(&ops[0], &arg1[0], &arg2[0], n_steps,
                                      &consts[0] if n_slots else NULL,
                                      &X[p, 0] if X.shape[1] else NULL, regs):
                    all_ok = False
                resid = regs[n_steps - 1] - y[p]
                sse += resid * resid
                for i in range(n_steps):
                    adj[i] = 0.0
                adj[n_steps - 1] = (2.0 / n) * resid
                for i in range(n_steps - 1, -1, -1):
                    op = ops[i]
                    g = adj[i]
                    if op == OP_CONST:
                        grad[arg1[i]] += g
                    elif op == OP_VAR:
                        pass
                    elif op == OP_ADD:
                        adj[arg1[i]] += g
                        adj[arg2[i]] += g
                    elif op == OP_SUB:
                        adj[arg1[i]] += g
                        adj[arg2[i]] -= g
                    elif op == OP_MUL:
                        adj[arg1[i]] += g * regs[arg2[i]]
                        adj[arg2[i]] += g * regs[arg1[i]]
                    elif op == OP_DIV:
                        adj[arg1[i]] += g / regs[arg2[i]]
                        adj[arg2[i]] -= g * regs[i] / regs[arg2[i]]
                    elif op == OP_SIN:
                        adj[arg1[i]] += g * cos(regs[arg1[i]])
                    elif op == OP_COS:
                        adj[arg1[i]] -= g * sin(regs[arg1[i]])
                    elif op == OP_EXP:
                        adj[arg1[i]] += g * regs[i]
                    elif op == OP_LOG:
                        adj[arg1[i]] += g / regs[arg1[i]]
                    else:  # OP_SQRT
                        adj[arg1[i]] += g * 0.5 / regs[i]
    finally:
        free(regs)
    mse = sse / n
    cdef bint ok = all_ok and isfinite(mse)
    if ok:
        for i in range(n_slots):
            if not isfinite(grad[i]):
                ok = False
                break
    return mse, grad_arr, bool(ok)
