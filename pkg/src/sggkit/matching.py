"""Minimum-cost bipartite assignment (Kuhn-Munkres / shortest augmenting path).

Rectangular matrices are padded to square with a large finite sentinel so
exactly min(n, m) real pairs are always matched.  Among equal-cost optima
the lexicographically smallest pair list is returned; ambiguity is detected
through the reduced-cost zero structure, so the canonicalization pass only
runs when ties actually exist.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import UsageError


@dataclass
class AssignmentResult:
    pairs: list          # [(row, col)] sorted by row
    total_cost: float


def _jv_rect(a: np.ndarray):
    """LSAP on an n <= m matrix: every row matched, shortest augmenting paths.

    Returns (col_of_row, u, v).  The duals satisfy c - u - v >= 0 with
    matched edges tight, v <= 0, and v = 0 on unmatched columns.
    """
    n, m = a.shape
    INF = np.inf
    u = np.zeros(n)
    v = np.zeros(m)
    p = np.full(m, -1, dtype=np.intp)       # col -> matched row
    for i in range(n):
        minv = a[i] - u[i] - v
        way = np.full(m, -1, dtype=np.intp)
        used = np.zeros(m, dtype=bool)
        tree_rows = [i]
        tree_cols = []
        while True:
            masked = np.where(used, INF, minv)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            if delta != 0.0:
                u[tree_rows] += delta
                v[tree_cols] -= delta
                minv -= delta               # used entries are masked out later
            used[j1] = True
            tree_cols.append(j1)
            r = p[j1]
            if r == -1:
                sink = j1
                break
            tree_rows.append(r)
            cand = a[r] - u[r] - v
            better = ~used & (cand < minv)
            minv = np.where(better, cand, minv)
            way[better] = j1
        j = sink
        while True:
            prev = way[j]
            p[j] = i if prev == -1 else p[prev]
            if prev == -1:
                break
            j = prev
    col_of_row = np.empty(n, dtype=np.intp)
    for j in range(m):
        if p[j] != -1:
            col_of_row[p[j]] = j
    return col_of_row, u, v


def _jv_total(a: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    col_of_row, _, _ = _jv_rect(a)
    return float(a[np.arange(a.shape[0]), col_of_row].sum())


def _solve_padded(c: np.ndarray, sentinel: float):
    """Solve on the small side, then extend to the sentinel-padded square.

    Returns (pad, col_of_row, u, v): a square cost matrix, a full square
    assignment, and duals that certify it (zero reduced cost on matched
    edges, non-negative reduced cost everywhere).
    """
    n, m = c.shape
    size = max(n, m)
    pad = np.full((size, size), sentinel, dtype=np.float64)
    pad[:n, :m] = c
    if n <= m:
        col_of_row_r, u_r, v_r = _jv_rect(c)
        # pad rows take the unmatched columns; v = 0 there keeps edges tight
        u = np.concatenate([u_r, np.full(size - n, sentinel)])
        v = v_r
        col_of_row = np.empty(size, dtype=np.intp)
        col_of_row[:n] = col_of_row_r
        col_of_row[n:] = np.setdiff1d(np.arange(m), col_of_row_r)
    else:
        row_of_col_r, u_r, v_r = _jv_rect(np.ascontiguousarray(c.T))
        u = v_r
        v = np.concatenate([u_r, np.full(size - m, sentinel)])
        col_of_row = np.full(size, -1, dtype=np.intp)
        for j, r in enumerate(row_of_col_r):
            col_of_row[r] = j
        pad_col = m
        for i in range(size):
            if col_of_row[i] == -1:
                col_of_row[i] = pad_col
                pad_col += 1
    return pad, col_of_row, u, v


def _scc(adj: list) -> list:
    """Component id per node (iterative Tarjan)."""
    n = len(adj)
    index = [-1] * n
    low = [0] * n
    on_stack = [False] * n
    comp = [-1] * n
    stack = []
    counter = 0
    n_comp = 0
    for root in range(n):
        if index[root] != -1:
            continue
        work = [(root, 0)]
        while work:
            node, ei = work[-1]
            if ei == 0:
                index[node] = low[node] = counter
                counter += 1
                stack.append(node)
                on_stack[node] = True
            advanced = False
            while ei < len(adj[node]):
                nxt = adj[node][ei]
                ei += 1
                if index[nxt] == -1:
                    work[-1] = (node, ei)
                    work.append((nxt, 0))
                    advanced = True
                    break
                if on_stack[nxt]:
                    low[node] = min(low[node], index[nxt])
            if advanced:
                continue
            work.pop()
            if low[node] == index[node]:
                while True:
                    x = stack.pop()
                    on_stack[x] = False
                    comp[x] = n_comp
                    if x == node:
                        break
                n_comp += 1
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
    return comp


def _real_assignment_ambiguous(reduced: np.ndarray, tol: float, col_of_row,
                               n: int, m: int) -> bool:
    """True iff some optimal assignment differs from the found one on real pairs.

    By complementary slackness every optimum lives on tight (zero reduced
    cost) edges; a non-matched tight real edge can enter an optimal
    matching iff its endpoints share a strongly connected component of the
    alternating digraph (tight edges row->col, matched edges col->row).
    """
    size = reduced.shape[0]
    rs, cs = np.nonzero(reduced <= tol)
    adj = [[] for _ in range(2 * size)]
    real_candidates = []
    for r, c in zip(rs.tolist(), cs.tolist()):
        if col_of_row[r] == c:
            adj[size + c].append(r)
        else:
            adj[r].append(size + c)
            if r < n and c < m:
                real_candidates.append((r, c))
    if not real_candidates:
        return False
    comp = _scc(adj)
    return any(comp[r] == comp[size + c] for r, c in real_candidates)


def _lex_canonical(pad: np.ndarray, n: int, m: int, c_star: float) -> list:
    """Lexicographically smallest real-pair list among optimal assignments.

    Greedy over real rows: fix the smallest real column whose forced
    completion still reaches the optimal total (re-solved exactly).
    """
    size = pad.shape[0]
    tol = 1e-6 * max(1.0, float(np.abs(pad).max()))
    remaining_rows = list(range(size))
    remaining_cols = list(range(size))
    fixed_cost = 0.0
    result = []
    for i in range(n):
        remaining_rows.remove(i)
        chosen = None
        for j in (c for c in remaining_cols if c < m):
            rest_cols = [c for c in remaining_cols if c != j]
            rem = pad[np.ix_(remaining_rows, rest_cols)]
            total = fixed_cost + pad[i, j] + _jv_total(rem)
            if abs(total - c_star) <= tol:
                chosen = j
                break
        if chosen is None:
            # row is unmatched in every optimum; pad columns are identical,
            # so consuming any one of them is equivalent
            chosen = max(c for c in remaining_cols if c >= m)
        fixed_cost += pad[i, chosen]
        remaining_cols.remove(chosen)
        if chosen < m:
            result.append((i, chosen))
    return result


def hungarian(cost) -> AssignmentResult:
    """Minimum-total-cost assignment of rows to columns."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] == 0 or c.shape[1] == 0:
        raise UsageError(f"cost matrix must be non-empty 2-D, got shape {c.shape}")
    if np.isnan(c).any():
        raise UsageError("cost matrix contains NaN")
    if not np.isfinite(c).all():
        raise UsageError("cost matrix contains non-finite entries")
    n, m = c.shape
    size = max(n, m)
    scale = max(1.0, float(np.abs(c).max()))
    sentinel = 4.0 * (size + 1) * scale
    pad, col_of_row, u, v = _solve_padded(c, sentinel)
    pairs = sorted((i, int(col_of_row[i])) for i in range(n) if col_of_row[i] < m)

    reduced = pad - u[:, None] - v[None, :]
    tol = 1e-9 * scale
    if _real_assignment_ambiguous(reduced, tol, col_of_row, n, m):
        c_star = float(pad[np.arange(size), col_of_row].sum())
        pairs = _lex_canonical(pad, n, m, c_star)

    # fsum gives the correctly rounded total, independent of pair order
    total = math.fsum(c[i, j] for i, j in pairs)
    return AssignmentResult(pairs=pairs, total_cost=total)
