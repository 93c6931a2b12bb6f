"""Compiled inner loops for tree training and prediction."""

import numba
import numpy as np


@numba.njit(cache=True)
def level_histograms(flat, rows, loc, g, n_nodes, total_bins):
    """Gradient sums and counts per (node, global bin) for the active rows."""
    G = np.zeros((n_nodes, total_bins))
    N = np.zeros((n_nodes, total_bins))
    F = flat.shape[1]
    for i in range(rows.shape[0]):
        r = rows[i]
        j = loc[i]
        gr = g[r]
        for f in range(F):
            b = flat[r, f]
            G[j, b] += gr
            N[j, b] += 1.0
    return G, N


@numba.njit(cache=True)
def predict_forest(X, feature, threshold, left, right, value):
    """Sum of leaf values over all trees; tree arrays are row-padded to equal width."""
    n = X.shape[0]
    T = feature.shape[0]
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for t in range(T):
            k = 0
            while feature[t, k] >= 0:
                if X[i, feature[t, k]] <= threshold[t, k]:
                    k = left[t, k]
                else:
                    k = right[t, k]
            acc += value[t, k]
        out[i] = acc
    return out


@numba.njit(cache=True)
def best_splits(G, N, offsets, g_sum, n_sum, min_leaf):
    """Best (gain, global bin) per node; a split at bin b sends bins <= b left.

    Ties keep the first (lowest feature, lowest bin) candidate.
    """
    L = G.shape[0]
    F = offsets.shape[0] - 1
    gains = np.full(L, -np.inf)
    where = np.full(L, -1, dtype=np.int64)
    for j in range(L):
        tg = g_sum[j]
        tn = n_sum[j]
        parent = tg * tg / tn
        for f in range(F):
            gl = 0.0
            nl = 0.0
            for b in range(offsets[f], offsets[f + 1] - 1):
                gl += G[j, b]
                nl += N[j, b]
                nr = tn - nl
                if nl < min_leaf:
                    continue
                if nr < min_leaf:
                    break
                gr = tg - gl
                gain = gl * gl / nl + gr * gr / nr - parent
                if gain > gains[j]:
                    gains[j] = gain
                    where[j] = b
    return gains, where


@numba.njit(cache=True)
def tree_coalitions(x, B, bitpos, feature, threshold, left, right, value, m):
    """Sum over trees and background rows of the leaf value reached by every
    hybrid row, for all 2**m coalitions at once.

    A coalition mask takes the features whose bit is set from ``x`` and the
    rest of the subset from the background row; features with ``bitpos < 0``
    always come from ``x``. Each leaf adds its value to exactly the masks
    consistent with the branch choices on its path.
    """
    nm = 1 << m
    full = nm - 1
    g = np.zeros(nm)
    T = feature.shape[0]
    cap = 2 * feature.shape[1] + 2
    st_node = np.empty(cap, dtype=np.int64)
    st_in = np.empty(cap, dtype=np.int64)
    st_out = np.empty(cap, dtype=np.int64)
    for t in range(T):
        for r in range(B.shape[0]):
            sp = 1
            st_node[0] = 0
            st_in[0] = 0
            st_out[0] = 0
            while sp > 0:
                sp -= 1
                node = st_node[sp]
                a = st_in[sp]
                b = st_out[sp]
                f = feature[t, node]
                if f < 0:
                    v = value[t, node]
                    free = full & ~(a | b)
                    sub = free
                    while True:
                        g[a | sub] += v
                        if sub == 0:
                            break
                        sub = (sub - 1) & free
                    continue
                th = threshold[t, node]
                xn = left[t, node] if x[f] <= th else right[t, node]
                bn = left[t, node] if B[r, f] <= th else right[t, node]
                k = bitpos[f]
                if k < 0 or xn == bn:
                    st_node[sp] = xn
                    st_in[sp] = a
                    st_out[sp] = b
                    sp += 1
                    continue
                bit = 1 << k
                if a & bit:
                    st_node[sp] = xn
                    st_in[sp] = a
                    st_out[sp] = b
                    sp += 1
                elif b & bit:
                    st_node[sp] = bn
                    st_in[sp] = a
                    st_out[sp] = b
                    sp += 1
                else:
                    st_node[sp] = xn
                    st_in[sp] = a | bit
                    st_out[sp] = b
                    st_node[sp + 1] = bn
                    st_in[sp + 1] = a
                    st_out[sp + 1] = b | bit
                    sp += 2
    return g


@numba.njit(cache=True)
def node_sums(rows, loc, g, n_nodes):
    """Per-node gradient sum, count and sum of squares."""
    gs = np.zeros(n_nodes)
    ns = np.zeros(n_nodes)
    g2 = np.zeros(n_nodes)
    for i in range(rows.shape[0]):
        j = loc[i]
        v = g[rows[i]]
        gs[j] += v
        ns[j] += 1.0
        g2[j] += v * v
    return gs, ns, g2


@numba.njit(cache=True)
def route_rows(flat, rows, loc, best, bin_feature, split, new_left, level_ids, node_of_row, leaf_of_row):
    """Send active rows to their child, or settle them in their leaf."""
    for i in range(rows.shape[0]):
        r = rows[i]
        j = loc[i]
        if split[j]:
            b = best[j]
            node_of_row[r] = new_left[j] + (0 if flat[r, bin_feature[b]] <= b else 1)
        else:
            node_of_row[r] = -1
            leaf_of_row[r] = level_ids[j]
