# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled CTC recursion and edit-distance alignment."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

from .fallback import CTCLengthError, ctc_required_frames

cnp.import_array()


cdef inline double lse2(double a, double b) nogil:
    cdef double m
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    m = a if a > b else b
    return m + log(exp(a - m) + exp(b - m))


def ctc_forward_backward(log_probs, target, long blank=0):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] lp = np.ascontiguousarray(log_probs, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] tgt = np.ascontiguousarray(target, dtype=np.int64)
    cdef Py_ssize_t t_len = lp.shape[0], n_sym = lp.shape[1]
    cdef Py_ssize_t n_lab = tgt.shape[0], s_len = 2 * n_lab + 1
    cdef Py_ssize_t t, s
    need = ctc_required_frames(tgt)
    if t_len < max(need, 1):
        raise CTCLengthError(f"target of length {n_lab} needs {max(need, 1)} frames, got {t_len}")
    cdef cnp.ndarray[cnp.int64_t, ndim=1] ext = np.full(s_len, blank, dtype=np.int64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] skip = np.zeros(s_len, dtype=np.uint8)
    for s in range(n_lab):
        ext[2 * s + 1] = tgt[s]
    for s in range(2, s_len):
        skip[s] = ext[s] != blank and ext[s] != ext[s - 2]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] alpha = np.full((t_len, s_len), -np.inf)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] beta = np.full((t_len, s_len), -np.inf)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] grad = np.zeros((t_len, n_sym))
    cdef double acc, log_p, nxt
    with nogil:
        alpha[0, 0] = lp[0, ext[0]]
        if s_len > 1:
            alpha[0, 1] = lp[0, ext[1]]
        for t in range(1, t_len):
            for s in range(s_len):
                acc = alpha[t - 1, s]
                if s >= 1:
                    acc = lse2(acc, alpha[t - 1, s - 1])
                if s >= 2 and skip[s]:
                    acc = lse2(acc, alpha[t - 1, s - 2])
                if acc != -INFINITY:
                    alpha[t, s] = acc + lp[t, ext[s]]
        beta[t_len - 1, s_len - 1] = 0.0
        if s_len > 1:
            beta[t_len - 1, s_len - 2] = 0.0
        for t in range(t_len - 2, -1, -1):
            for s in range(s_len):
                acc = beta[t + 1, s] + lp[t + 1, ext[s]]
                if s + 1 < s_len:
                    acc = lse2(acc, beta[t + 1, s + 1] + lp[t + 1, ext[s + 1]])
                if s + 2 < s_len and skip[s + 2]:
                    acc = lse2(acc, beta[t + 1, s + 2] + lp[t + 1, ext[s + 2]])
                beta[t, s] = acc
        log_p = alpha[t_len - 1, s_len - 1]
        if s_len > 1:
            log_p = lse2(log_p, alpha[t_len - 1, s_len - 2])
        if log_p != -INFINITY:
            for t in range(t_len):
                for s in range(s_len):
                    nxt = alpha[t, s] + beta[t, s]
                    if nxt != -INFINITY:
                        grad[t, ext[s]] -= exp(nxt - log_p)
    if log_p == -INFINITY:
        return float("inf"), grad
    return -log_p, grad


def edit_alignment(hyp, ref):
    cdef cnp.ndarray[cnp.int64_t, ndim=1] h = np.ascontiguousarray(hyp, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] r = np.ascontiguousarray(ref, dtype=np.int64)
    cdef Py_ssize_t nh = h.shape[0], nr = r.shape[0], i, j
    cdef cnp.ndarray[cnp.int64_t, ndim=2] d = np.zeros((nh + 1, nr + 1), dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] link = np.full(nh, -1, dtype=np.int64)
    cdef long best, sub
    with nogil:
        for i in range(nh + 1):
            d[i, 0] = i
        for j in range(nr + 1):
            d[0, j] = j
        for i in range(1, nh + 1):
            for j in range(1, nr + 1):
                sub = d[i - 1, j - 1] + (h[i - 1] != r[j - 1])
                best = d[i - 1, j] + 1
                if d[i, j - 1] + 1 < best:
                    best = d[i, j - 1] + 1
                if sub < best:
                    best = sub
                d[i, j] = best
        i = nh
        j = nr
        while i > 0 or j > 0:
            if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (h[i - 1] != r[j - 1]):
                link[i - 1] = j - 1
                i -= 1
                j -= 1
            elif j > 0 and d[i, j] == d[i, j - 1] + 1:
                j -= 1
            else:
                i -= 1
    return int(d[nh, nr]), link
