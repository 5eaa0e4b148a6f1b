# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; same contracts as ``vguide.kernels._pure``."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, uint32_t

cnp.import_array()

DEF PAIR_SHIFT = 32


def count_pairs(const int64_t[::1] seq):
    cdef Py_ssize_t i, n = seq.shape[0]
    cdef int64_t prev = -1, tok, key
    cdef dict counts = {}
    for i in range(n):
        tok = seq[i]
        if tok >= 0 and prev >= 0:
            key = (prev << PAIR_SHIFT) | tok
            counts[key] = counts.get(key, 0) + 1
        prev = tok
    return counts


def merge_pair(const int64_t[::1] seq, int64_t a, int64_t b, int64_t new_id):
    cdef Py_ssize_t n = seq.shape[0]
    out_arr = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] out = out_arr
    cdef Py_ssize_t i = 0, j = 0
    while i < n:
        if i + 1 < n and seq[i] == a and seq[i + 1] == b:
            out[j] = new_id
            i += 2
        else:
            out[j] = seq[i]
            i += 1
        j += 1
    return out_arr[:j].copy()


def apply_merges(const int64_t[::1] seq, dict ranks):
    cdef Py_ssize_t n = seq.shape[0]
    buf_arr = np.array(seq, dtype=np.int64, copy=True)
    cdef int64_t[::1] buf = buf_arr
    cdef Py_ssize_t i, j
    cdef int64_t best_rank, best_a = 0, best_b = 0, best_new = 0, rank
    cdef object hit
    while n >= 2:
        best_rank = -1
        for i in range(n - 1):
            hit = ranks.get((buf[i] << PAIR_SHIFT) | buf[i + 1])
            if hit is not None:
                rank = hit[0]
                if best_rank < 0 or rank < best_rank:
                    best_rank = rank
                    best_new = hit[1]
                    best_a = buf[i]
                    best_b = buf[i + 1]
        if best_rank < 0:
            break
        i = 0
        j = 0
        while i < n:
            if i + 1 < n and buf[i] == best_a and buf[i + 1] == best_b:
                buf[j] = best_new
                i += 2
            else:
                buf[j] = buf[i]
                i += 1
            j += 1
        n = j
    return buf_arr[:n].copy()


def strip_comments(str text):
    cdef cnp.ndarray[uint32_t, ndim=1] src = np.frombuffer(
        text.encode("utf-32-le"), dtype=np.uint32).copy()
    cdef uint32_t[::1] c = src
    cdef Py_ssize_t i = 0, n = c.shape[0]
    cdef uint32_t SP = 32, NL = 10, SL = 47, ST = 42, DQ = 34, BS = 92
    while i < n:
        if c[i] == SL and i + 1 < n and c[i + 1] == SL:
            while i < n and c[i] != NL:
                c[i] = SP
                i += 1
        elif c[i] == SL and i + 1 < n and c[i + 1] == ST:
            c[i] = SP
            c[i + 1] = SP
            i += 2
            while i < n:
                if c[i] == ST and i + 1 < n and c[i + 1] == SL:
                    c[i] = SP
                    c[i + 1] = SP
                    i += 2
                    break
                if c[i] != NL:
                    c[i] = SP
                i += 1
        elif c[i] == DQ:
            c[i] = SP
            i += 1
            while i < n and c[i] != NL:
                if c[i] == BS and i + 1 < n:
                    c[i] = SP
                    if c[i + 1] != NL:
                        c[i + 1] = SP
                    i += 2
                    continue
                if c[i] == DQ:
                    c[i] = SP
                    i += 1
                    break
                c[i] = SP
                i += 1
        else:
            i += 1
    return src.tobytes().decode("utf-32-le")
