# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled shortest augmenting path solver. See ``_lsa_py`` for the tie rule."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def solve_min(cost_in):
    cdef double[:, ::1] cost = np.ascontiguousarray(cost_in, dtype=np.float64)
    cdef Py_ssize_t n = cost.shape[0]
    cdef double[::1] u = np.zeros(n)
    cdef double[::1] v = np.zeros(n)
    cdef double[::1] shortest = np.empty(n)
    out = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] col4row = out
    cdef cnp.int64_t[::1] row4col = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] path = np.full(n, -1, dtype=np.int64)
    cdef unsigned char[::1] sr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] sc = np.zeros(n, dtype=np.uint8)
    cdef Py_ssize_t cur_row, i, j, jbest, sink, k, tmp
    cdef double min_val, lowest, r, s

    with nogil:
        for cur_row in range(n):
            for k in range(n):
                shortest[k] = INFINITY
                sr[k] = 0
                sc[k] = 0
            min_val = 0.0
            i = cur_row
            sink = -1
            while sink < 0:
                sr[i] = 1
                lowest = INFINITY
                jbest = -1
                for j in range(n):
                    if sc[j]:
                        continue
                    r = min_val + cost[i, j] - u[i] - v[j]
                    if r < shortest[j]:
                        path[j] = i
                        shortest[j] = r
                    s = shortest[j]
                    if jbest < 0 or s < lowest:
                        lowest = s
                        jbest = j
                    elif s == lowest and row4col[j] < 0 and row4col[jbest] >= 0:
                        jbest = j
                min_val = lowest
                sc[jbest] = 1
                if row4col[jbest] < 0:
                    sink = jbest
                else:
                    i = row4col[jbest]

            u[cur_row] += min_val
            for k in range(n):
                if sr[k] and k != cur_row:
                    u[k] += min_val - shortest[col4row[k]]
            for k in range(n):
                if sc[k]:
                    v[k] -= min_val - shortest[k]

            j = sink
            while True:
                i = path[j]
                row4col[j] = i
                tmp = col4row[i]
                col4row[i] = j
                j = tmp
                if i == cur_row:
                    break
    return out
