"""Network simplex for the dense transportation problem.

Sources ``0..n-1`` ship ``supply`` to sinks ``n..n+m-1`` over every arc
``(i, j)`` with cost ``cost[i, j]``. An artificial root ``n+m`` carries the
initial basis (supplies route up to the root, demands route down from it).
The spanning tree is stored with parent pointers, first-child/sibling lists
and per-node flow on the arc to the parent. Entering arcs come from block
pricing; the leaving arc is the last blocking arc along the cycle oriented
from the apex, which keeps the tree strongly feasible and rules out cycling.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _detach(u, parent, first_child, next_sib, prev_sib):
    p = parent[u]
    if prev_sib[u] >= 0:
        next_sib[prev_sib[u]] = next_sib[u]
    else:
        first_child[p] = next_sib[u]
    if next_sib[u] >= 0:
        prev_sib[next_sib[u]] = prev_sib[u]
    next_sib[u] = -1
    prev_sib[u] = -1


@njit(cache=True)
def _attach(u, p, parent, first_child, next_sib, prev_sib):
    parent[u] = p
    prev_sib[u] = -1
    next_sib[u] = first_child[p]
    if first_child[p] >= 0:
        prev_sib[first_child[p]] = u
    first_child[p] = u


@njit(cache=True)
def _network_simplex(cost, supply, demand, tol, max_iter):
    n, m = cost.shape
    E = n * m
    V = n + m + 1
    root = n + m

    max_cost = 0.0
    for i in range(n):
        for j in range(m):
            if cost[i, j] > max_cost:
                max_cost = cost[i, j]
    art_cost = (max_cost + 1.0) * V

    parent = np.full(V, -1, np.int64)
    pred = np.full(V, -1, np.int64)  # arc id; >= E means artificial arc of node (id - E)
    pred_dir = np.zeros(V, np.int64)  # +1: arc points u -> parent, -1: parent -> u
    depth = np.zeros(V, np.int64)
    flow = np.zeros(V, np.float64)  # flow on pred[u]
    pi = np.zeros(V, np.float64)
    first_child = np.full(V, -1, np.int64)
    next_sib = np.full(V, -1, np.int64)
    prev_sib = np.full(V, -1, np.int64)
    in_tree = np.zeros(E, np.bool_)

    for u in range(n + m):
        _attach(u, root, parent, first_child, next_sib, prev_sib)
        pred[u] = E + u
        depth[u] = 1
        if u < n:
            pred_dir[u] = 1
            flow[u] = supply[u]
            pi[u] = 0.0
        else:
            pred_dir[u] = -1
            flow[u] = demand[u - n]
            pi[u] = art_cost

    block = max(int(np.sqrt(E)), 10)
    next_arc = 0
    path_s = np.empty(V, np.int64)
    stack = np.empty(V, np.int64)
    it = 0
    while it < max_iter:
        # block pricing: reduced cost of (i, j) is cost + pi[i] - pi[n + j]
        best = -tol
        in_arc = -1
        cnt = block
        e = next_arc
        for _k in range(E):
            if not in_tree[e]:
                i = e // m
                j = e - i * m
                rc = cost[i, j] + pi[i] - pi[n + j]
                if rc < best:
                    best = rc
                    in_arc = e
            cnt -= 1
            e += 1
            if e == E:
                e = 0
            if cnt == 0:
                if in_arc >= 0:
                    break
                cnt = block
        if in_arc < 0:
            break
        next_arc = e
        it += 1

        s = in_arc // m
        t = n + (in_arc - s * m)

        # apex of the cycle
        a, b = s, t
        while a != b:
            if depth[a] > depth[b]:
                a = parent[a]
            elif depth[b] > depth[a]:
                b = parent[b]
            else:
                a = parent[a]
                b = parent[b]
        join = a

        # leaving arc: path s -> join carries flow downward, path t -> join upward
        delta = np.inf
        u_out = -1
        side = 0
        u = s
        while u != join:
            if pred_dir[u] == 1 and flow[u] < delta:
                delta = flow[u]
                u_out = u
                side = 1
            u = parent[u]
        u = t
        while u != join:
            if pred_dir[u] == -1 and flow[u] <= delta:
                delta = flow[u]
                u_out = u
                side = 2
            u = parent[u]
        if u_out < 0:
            raise RuntimeError("unbounded transport problem")

        if delta > 0.0:
            u = s
            while u != join:
                flow[u] -= pred_dir[u] * delta
                u = parent[u]
            u = t
            while u != join:
                flow[u] += pred_dir[u] * delta
                u = parent[u]

        if side == 1:
            u_in, v_in = s, t
        else:
            u_in, v_in = t, s

        leave = pred[u_out]

        # re-hang the stem u_in .. u_out below v_in
        k = 0
        u = u_in
        while True:
            path_s[k] = u
            k += 1
            if u == u_out:
                break
            u = parent[u]
        for r in range(k):
            _detach(path_s[r], parent, first_child, next_sib, prev_sib)
        for r in range(k - 1, 0, -1):
            x = path_s[r]
            y = path_s[r - 1]
            pred[x] = pred[y]
            pred_dir[x] = -pred_dir[y]
            flow[x] = flow[y]
            _attach(x, y, parent, first_child, next_sib, prev_sib)
        pred[u_in] = in_arc
        pred_dir[u_in] = 1 if u_in == s else -1
        flow[u_in] = delta
        _attach(u_in, v_in, parent, first_child, next_sib, prev_sib)

        in_tree[in_arc] = True
        if leave < E:
            in_tree[leave] = False

        # potentials and depths on the moved subtree
        if u_in == s:
            sigma = pi[v_in] - cost[s, t - n] - pi[u_in]
        else:
            sigma = pi[v_in] + cost[s, t - n] - pi[u_in]
        top = 0
        stack[top] = u_in
        top += 1
        while top > 0:
            top -= 1
            x = stack[top]
            pi[x] += sigma
            depth[x] = depth[parent[x]] + 1
            c = first_child[x]
            while c >= 0:
                stack[top] = c
                top += 1
                c = next_sib[c]
    return parent, pred, flow, pi, in_tree, it


def transport(cost: np.ndarray, supply: np.ndarray, demand: np.ndarray, tol: float = 1e-12, max_iter: int | None = None):
    """Solve min <cost, P> s.t. P 1 = supply, P^T 1 = demand, P >= 0.

    Returns ``(rows, cols, mass, total_cost, pivots)`` for the basic arcs with
    positive flow.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    supply = np.ascontiguousarray(supply, dtype=np.float64)
    demand = np.ascontiguousarray(demand, dtype=np.float64)
    n, m = cost.shape
    if max_iter is None:
        max_iter = 100 * (n + m) * max(n, m) + 1000
    scale = max(1.0, float(cost.max(initial=0.0)) + 1.0) * (n + m + 1)
    parent, pred, flow, pi, in_tree, pivots = _network_simplex(
        cost, supply, demand, tol * scale, max_iter
    )
    if pivots >= max_iter:
        raise RuntimeError(f"network simplex hit the pivot limit ({max_iter})")
    E = n * m
    nodes = np.arange(n + m)
    real = (pred[nodes] < E) & (flow[nodes] > 0.0)
    arcs = pred[nodes][real]
    mass = flow[nodes][real]
    rows = arcs // m
    cols = arcs % m
    total = float(np.sum(mass * cost[rows, cols]))
    return rows, cols, mass, total, int(pivots)
