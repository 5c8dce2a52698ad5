"""Pure-numpy reference versions of the compiled kernels.

Summation order follows ``_ckernels.pyx`` exactly (sequential prefix sums
per node, trees accumulated in order), so results are bitwise identical.
The geometry kernels use the same arithmetic expressions per cell.
"""

import numpy as np


def best_splits(sorted_vals, sorted_idx, node_of, gw, hw, w, G, H, W, l2, min_leaf_weight):
    n_features = sorted_vals.shape[0]
    n_nodes = G.shape[0]
    best_gain = np.zeros(n_nodes, dtype=np.float64)
    best_feat = np.full(n_nodes, -1, dtype=np.int32)
    best_thr = np.zeros(n_nodes, dtype=np.float64)
    parent = G * G / (H + l2)

    for f in range(n_features):
        idx = sorted_idx[f]
        vals = sorted_vals[f]
        if vals.size == 0 or vals[0] == vals[-1]:
            continue
        nodes = node_of[idx]
        keep = (nodes >= 0) & (w[idx] != 0.0) & ~np.isnan(vals)
        idx, vals, nodes = idx[keep], vals[keep], nodes[keep]
        order = np.argsort(nodes, kind="stable")
        idx, vals, nodes = idx[order], vals[order], nodes[order]
        bounds = np.searchsorted(nodes, np.arange(n_nodes + 1))
        for nd in range(n_nodes):
            lo, hi = bounds[nd], bounds[nd + 1]
            if hi - lo < 2:
                continue
            v = vals[lo:hi]
            rows = idx[lo:hi]
            cand = np.nonzero(v[1:] > v[:-1])[0]
            if cand.size == 0:
                continue
            cw = np.cumsum(w[rows])
            wl = cw[cand]
            wr = W[nd] - wl
            ok = (wl >= min_leaf_weight) & (wr >= min_leaf_weight)
            cand = cand[ok]
            if cand.size == 0:
                continue
            cg = np.cumsum(gw[rows])
            ch = np.cumsum(hw[rows])
            gl = cg[cand]
            hl = ch[cand]
            gr = G[nd] - gl
            hr = H[nd] - hl
            gain = 0.5 * (gl * gl / (hl + l2) + gr * gr / (hr + l2) - parent[nd])
            j = int(np.argmax(gain))
            if gain[j] > best_gain[nd]:
                prev = v[cand[j]]
                x = v[cand[j] + 1]
                thr = prev + (x - prev) * 0.5
                if thr >= x:
                    thr = prev
                best_gain[nd] = gain[j]
                best_feat[nd] = f
                best_thr[nd] = thr
    return best_feat, best_thr, best_gain


def predict_forest(X, feature, threshold, left, right, default_left, value, roots, out):
    n_rows = X.shape[0]
    n_trees = roots.shape[0]
    if n_rows == 0 or n_trees == 0:
        return
    # Rows are processed in blocks to bound the (trees, rows) working set.
    block = max(1, 2_000_000 // n_trees)
    for start in range(0, n_rows, block):
        Xb = X[start:start + block]
        cols = np.arange(Xb.shape[0])[None, :]
        nodes = np.repeat(roots[:, None], Xb.shape[0], axis=1)
        while True:
            f = feature[nodes]
            active = f >= 0
            if not active.any():
                break
            x = Xb[cols, np.where(active, f, 0)]
            go_left = np.where(np.isnan(x), default_left[nodes].astype(bool), x <= threshold[nodes])
            nxt = np.where(go_left, left[nodes], right[nodes])
            nodes = np.where(active, nxt, nodes)
        leaf = value[nodes]
        acc = out[start:start + block]
        for t in range(n_trees):
            acc += leaf[t]


def neighbor_pairs(owner, radius, n_ids):
    nx, ny = owner.shape
    adj = np.zeros((n_ids, n_ids), dtype=np.uint8)
    for di in range(0, radius + 1):
        for dj in range(-radius, radius + 1):
            if di == 0 and dj <= 0:
                continue
            a = owner[0:nx - di, max(0, -dj):ny - max(0, dj)]
            b = owner[di:nx, max(0, dj):ny - max(0, -dj)]
            hit = (a >= 0) & (b >= 0) & (a != b)
            if hit.any():
                adj[a[hit], b[hit]] = 1
                adj[b[hit], a[hit]] = 1
    return adj


def plate_blocked(top, owner, res, px, py, pz, e1x, e1y, e2x, e2y, pkg, clearance):
    nx, ny = top.shape
    out = np.zeros(px.shape[0], dtype=np.uint8)
    for p in range(px.shape[0]):
        ext_x = abs(e1x[p]) + abs(e2x[p])
        ext_y = abs(e1y[p]) + abs(e2y[p])
        i0 = max(0, int(np.floor((px[p] - ext_x) / res)))
        i1 = min(nx - 1, int(np.floor((px[p] + ext_x) / res)))
        j0 = max(0, int(np.floor((py[p] - ext_y) / res)))
        j1 = min(ny - 1, int(np.floor((py[p] + ext_y) / res)))
        det = e1x[p] * e2y[p] - e2x[p] * e1y[p]
        if det == 0.0 or i1 < i0 or j1 < j0:
            continue
        gx = (np.arange(i0, i1 + 1) + 0.5) * res - px[p]
        gy = (np.arange(j0, j1 + 1) + 0.5) * res - py[p]
        s = (e2y[p] * gx[:, None] - e2x[p] * gy[None, :]) / det
        t = (-e1y[p] * gx[:, None] + e1x[p] * gy[None, :]) / det
        under = (np.abs(s) <= 1.0) & (np.abs(t) <= 1.0)
        high = (owner[i0:i1 + 1, j0:j1 + 1] != pkg[p]) & (top[i0:i1 + 1, j0:j1 + 1] > pz[p] + clearance)
        out[p] = bool((under & high).any())
    return out


def partition_rows(X, node_of, split_feat, split_thr, child, gw, hw, w, n_children):
    n = X.shape[0]
    new = np.full(n, -1, dtype=np.int32)
    r = np.flatnonzero(node_of >= 0)
    nd = node_of[r]
    keep = split_feat[nd] >= 0
    r, nd = r[keep], nd[keep]
    go_left = X[r, split_feat[nd]] <= split_thr[nd]
    new[r] = np.where(go_left, child[2 * nd], child[2 * nd + 1])
    c = new[r]
    # bincount adds weights in row order, like the compiled loop.
    G = np.bincount(c, weights=gw[r], minlength=n_children)
    H = np.bincount(c, weights=hw[r], minlength=n_children)
    W = np.bincount(c, weights=w[r], minlength=n_children)
    return new, G, H, W
