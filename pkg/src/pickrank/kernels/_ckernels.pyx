# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for boosted trees and heightmap geometry.

Every function mirrors ``_pykernels`` operation for operation, so the two
backends agree bit for bit.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, floor, isnan
from libc.stdlib cimport free, malloc

cnp.import_array()


cdef struct RowStat:
    double g
    double h
    double w
    cnp.int32_t node


def best_splits(const double[:, ::1] sorted_vals,
                const cnp.int32_t[:, ::1] sorted_idx,
                const cnp.int32_t[::1] node_of,
                const double[::1] gw,
                const double[::1] hw,
                const double[::1] w,
                const double[::1] G,
                const double[::1] H,
                const double[::1] W,
                double l2,
                double min_leaf_weight):
    """Best (feature, threshold, gain) per open node; feature -1 when no split helps."""
    cdef Py_ssize_t n_features = sorted_vals.shape[0]
    cdef Py_ssize_t n_rows = sorted_vals.shape[1]
    cdef Py_ssize_t n_nodes = G.shape[0]
    cdef Py_ssize_t f, k, nd
    cdef cnp.int32_t r
    cdef double x, wl, wr, gl, hl, gr, hr, gain, thr, prev
    cdef RowStat* rows
    cdef RowStat* rs

    best_gain_arr = np.zeros(n_nodes, dtype=np.float64)
    best_feat_arr = np.full(n_nodes, -1, dtype=np.int32)
    best_thr_arr = np.zeros(n_nodes, dtype=np.float64)
    cdef double[::1] best_gain = best_gain_arr
    cdef cnp.int32_t[::1] best_feat = best_feat_arr
    cdef double[::1] best_thr = best_thr_arr

    parent_arr = np.empty(n_nodes, dtype=np.float64)
    cdef double[::1] parent = parent_arr
    for nd in range(n_nodes):
        parent[nd] = G[nd] * G[nd] / (H[nd] + l2)

    GL_arr = np.empty(n_nodes, dtype=np.float64)
    HL_arr = np.empty(n_nodes, dtype=np.float64)
    WL_arr = np.empty(n_nodes, dtype=np.float64)
    last_arr = np.empty(n_nodes, dtype=np.float64)
    seen_arr = np.empty(n_nodes, dtype=np.uint8)
    cdef double[::1] GL = GL_arr
    cdef double[::1] HL = HL_arr
    cdef double[::1] WL = WL_arr
    cdef double[::1] last = last_arr
    cdef unsigned char[::1] seen = seen_arr

    # One contiguous record per row keeps the random access to a single cache line.
    rows = <RowStat*>malloc(max(n_rows, 1) * sizeof(RowStat))
    if rows == NULL:
        raise MemoryError()
    try:
        for k in range(n_rows):
            rows[k].g = gw[k]
            rows[k].h = hw[k]
            rows[k].w = w[k]
            rows[k].node = node_of[k] if w[k] != 0.0 else -1
        for f in range(n_features):
            if n_rows == 0 or sorted_vals[f, 0] == sorted_vals[f, n_rows - 1]:
                continue  # constant feature, no split point
            for nd in range(n_nodes):
                GL[nd] = 0.0
                HL[nd] = 0.0
                WL[nd] = 0.0
                seen[nd] = 0
            for k in range(n_rows):
                r = sorted_idx[f, k]
                rs = &rows[r]
                nd = rs.node
                if nd < 0:
                    continue
                x = sorted_vals[f, k]
                if isnan(x):
                    continue
                if seen[nd] and x > last[nd]:
                    wl = WL[nd]
                    wr = W[nd] - wl
                    if wl >= min_leaf_weight and wr >= min_leaf_weight:
                        gl = GL[nd]
                        hl = HL[nd]
                        gr = G[nd] - gl
                        hr = H[nd] - hl
                        gain = 0.5 * (gl * gl / (hl + l2) + gr * gr / (hr + l2) - parent[nd])
                        if gain > best_gain[nd]:
                            prev = last[nd]
                            thr = prev + (x - prev) * 0.5
                            if thr >= x:
                                thr = prev
                            best_gain[nd] = gain
                            best_feat[nd] = <cnp.int32_t>f
                            best_thr[nd] = thr
                GL[nd] += rs.g
                HL[nd] += rs.h
                WL[nd] += rs.w
                last[nd] = x
                seen[nd] = 1
    finally:
        free(rows)

    return best_feat_arr, best_thr_arr, best_gain_arr


def predict_forest(const double[:, ::1] X,
                   const cnp.int32_t[::1] feature,
                   const double[::1] threshold,
                   const cnp.int32_t[::1] left,
                   const cnp.int32_t[::1] right,
                   const unsigned char[::1] default_left,
                   const double[::1] value,
                   const cnp.int32_t[::1] roots,
                   double[::1] out):
    """Add the leaf value of every tree to ``out`` (trees in order, per row)."""
    cdef Py_ssize_t n_rows = X.shape[0]
    cdef Py_ssize_t n_trees = roots.shape[0]
    cdef Py_ssize_t r, t
    cdef cnp.int32_t node, f, go
    cdef double x
    for r in range(n_rows):
        for t in range(n_trees):
            node = roots[t]
            f = feature[node]
            while f >= 0:
                x = X[r, f]
                # Arithmetic select instead of a branch: the direction is data dependent.
                go = (x <= threshold[node]) | (isnan(x) & (default_left[node] != 0))
                node = right[node] + go * (left[node] - right[node])
                f = feature[node]
            out[r] += value[node]


def neighbor_pairs(const cnp.int32_t[:, ::1] owner, int radius, int n_ids):
    """Boolean (n_ids, n_ids) matrix: owners with cells within ``radius`` (Chebyshev)."""
    cdef Py_ssize_t nx = owner.shape[0]
    cdef Py_ssize_t ny = owner.shape[1]
    cdef Py_ssize_t i, j, di, dj, i2, j2, j_lo
    cdef cnp.int32_t a, b
    adj_arr = np.zeros((n_ids, n_ids), dtype=np.uint8)
    cdef unsigned char[:, ::1] adj = adj_arr
    for i in range(nx):
        for j in range(ny):
            a = owner[i, j]
            if a < 0:
                continue
            for di in range(0, radius + 1):
                i2 = i + di
                if i2 >= nx:
                    break
                j_lo = 1 if di == 0 else -radius
                for dj in range(j_lo, radius + 1):
                    j2 = j + dj
                    if j2 < 0 or j2 >= ny:
                        continue
                    b = owner[i2, j2]
                    if b >= 0 and b != a:
                        adj[a, b] = 1
                        adj[b, a] = 1
    return adj_arr


def plate_blocked(const double[:, ::1] top,
                  const cnp.int32_t[:, ::1] owner,
                  double res,
                  const double[::1] px,
                  const double[::1] py,
                  const double[::1] pz,
                  const double[::1] e1x,
                  const double[::1] e1y,
                  const double[::1] e2x,
                  const double[::1] e2y,
                  const cnp.int32_t[::1] pkg,
                  double clearance):
    """1 where another package rises above pz + clearance under the plate parallelogram."""
    cdef Py_ssize_t nx = top.shape[0]
    cdef Py_ssize_t ny = top.shape[1]
    cdef Py_ssize_t n = px.shape[0]
    cdef Py_ssize_t p, i, j, i0, i1, j0, j1
    cdef double ext_x, ext_y, det, gx, gy, s, t, limit
    out_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] out = out_arr
    for p in range(n):
        ext_x = fabs(e1x[p]) + fabs(e2x[p])
        ext_y = fabs(e1y[p]) + fabs(e2y[p])
        i0 = <Py_ssize_t>floor((px[p] - ext_x) / res)
        i1 = <Py_ssize_t>floor((px[p] + ext_x) / res)
        j0 = <Py_ssize_t>floor((py[p] - ext_y) / res)
        j1 = <Py_ssize_t>floor((py[p] + ext_y) / res)
        if i0 < 0:
            i0 = 0
        if j0 < 0:
            j0 = 0
        if i1 > nx - 1:
            i1 = nx - 1
        if j1 > ny - 1:
            j1 = ny - 1
        det = e1x[p] * e2y[p] - e2x[p] * e1y[p]
        if det == 0.0:
            continue
        limit = pz[p] + clearance
        for i in range(i0, i1 + 1):
            gx = (i + 0.5) * res - px[p]
            for j in range(j0, j1 + 1):
                if owner[i, j] == pkg[p] or not top[i, j] > limit:
                    continue
                gy = (j + 0.5) * res - py[p]
                s = (e2y[p] * gx - e2x[p] * gy) / det
                t = (-e1y[p] * gx + e1x[p] * gy) / det
                if fabs(s) <= 1.0 and fabs(t) <= 1.0:
                    out[p] = 1
                    break
            if out[p]:
                break
    return out_arr


def partition_rows(const double[:, ::1] X,
                   const cnp.int32_t[::1] node_of,
                   const cnp.int32_t[::1] split_feat,
                   const double[::1] split_thr,
                   const cnp.int32_t[::1] child,
                   const double[::1] gw,
                   const double[::1] hw,
                   const double[::1] w,
                   Py_ssize_t n_children):
    """Route rows of split nodes to their children; returns (node_of, G, H, W) of the children."""
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t r
    cdef cnp.int32_t nd, f, c
    new_arr = np.full(n, -1, dtype=np.int32)
    G_arr = np.zeros(n_children, dtype=np.float64)
    H_arr = np.zeros(n_children, dtype=np.float64)
    W_arr = np.zeros(n_children, dtype=np.float64)
    cdef cnp.int32_t[::1] new = new_arr
    cdef double[::1] G = G_arr
    cdef double[::1] H = H_arr
    cdef double[::1] W = W_arr
    for r in range(n):
        nd = node_of[r]
        if nd < 0:
            continue
        f = split_feat[nd]
        if f < 0:
            continue
        if X[r, f] <= split_thr[nd]:
            c = child[2 * nd]
        else:
            c = child[2 * nd + 1]
        new[r] = c
        G[c] += gw[r]
        H[c] += hw[r]
        W[c] += w[r]
    return new_arr, G_arr, H_arr, W_arr
