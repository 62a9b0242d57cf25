"""Pure-Python shortest augmenting path solver (fallback backend).

Mirrors ``_lsa_ext.pyx`` operation for operation so both backends return
the same assignment, including on ties: the column chosen at each Dijkstra
step is the lowest-index column of minimal reduced distance, preferring an
unassigned column when several tie.
"""

import numpy as np


def solve_min(cost: np.ndarray) -> np.ndarray:
    """Return ``col4row`` minimising ``sum(cost[i, col4row[i]])``."""
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n = cost.shape[0]
    u = np.zeros(n)
    v = np.zeros(n)
    col4row = np.full(n, -1, dtype=np.int64)
    row4col = np.full(n, -1, dtype=np.int64)
    path = np.full(n, -1, dtype=np.int64)
    shortest = np.empty(n)
    sr = np.zeros(n, dtype=bool)
    sc = np.zeros(n, dtype=bool)
    inf = np.inf

    for cur_row in range(n):
        shortest.fill(inf)
        sr.fill(False)
        sc.fill(False)
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink < 0:
            sr[i] = True
            free = ~sc
            r = min_val + cost[i] - u[i] - v
            upd = free & (r < shortest)
            path[upd] = i
            shortest[upd] = r[upd]
            lowest = np.min(shortest[free])
            ties = np.flatnonzero(free & (shortest == lowest))
            unassigned = ties[row4col[ties] < 0]
            j = int(unassigned[0]) if unassigned.size else int(ties[0])
            min_val = float(lowest)
            sc[j] = True
            if row4col[j] < 0:
                sink = j
            else:
                i = int(row4col[j])

        u[cur_row] += min_val
        rows = np.flatnonzero(sr)
        rows = rows[rows != cur_row]
        u[rows] += min_val - shortest[col4row[rows]]
        cols = np.flatnonzero(sc)
        v[cols] -= min_val - shortest[cols]

        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, int(col4row[i])
            if i == cur_row:
                break
    return col4row
