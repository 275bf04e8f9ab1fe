"""Compiled (numba) kernels for tree building and forest prediction.

The RNG helpers here mirror parforest.rng bit-for-bit (tests cross-check
them); duplicating the ~30 lines keeps rng.py dependency-free while letting
the tree builder run in nopython mode. All kernels are nogil so a thread
pool gets real CPU parallelism on shared read-only arrays.

uint64 discipline: numba promotes uint64 op int64 to float64, so every
constant and intermediate in the RNG path is an explicit uint64.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_U32MASK = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_SHIFT32 = np.uint64(32)
_ZERO = np.uint64(0)
_ONE = np.uint64(1)


@njit(cache=True, nogil=True)
def philox_u64(seed, keyword, counter):
    c0 = counter & _U32MASK
    c1 = (counter >> _SHIFT32) & _U32MASK
    c2 = keyword & _U32MASK
    c3 = (keyword >> _SHIFT32) & _U32MASK
    k0 = seed & _U32MASK
    k1 = (seed >> _SHIFT32) & _U32MASK
    for _ in range(10):
        p0 = c0 * _M0
        p1 = c2 * _M1
        hi0 = p0 >> _SHIFT32
        lo0 = p0 & _U32MASK
        hi1 = p1 >> _SHIFT32
        lo1 = p1 & _U32MASK
        c0 = hi1 ^ c1 ^ k0
        c1 = lo1
        c2 = hi0 ^ c3 ^ k1
        c3 = lo0
        k0 = (k0 + _W0) & _U32MASK
        k1 = (k1 + _W1) & _U32MASK
    return (c1 << _SHIFT32) | c0


@njit(cache=True, nogil=True)
def rand_below(seed, keyword, counter, m):
    """Unbiased draw in [0, m) by rejection; returns (value, new counter)."""
    r = (_ZERO - m) % m  # 2**64 mod m in wrapping arithmetic
    while True:
        u = philox_u64(seed, keyword, counter)
        counter = counter + _ONE
        if u >= r:
            return (u - r) % m, counter


@njit(cache=True, nogil=True)
def _sample_features(seed, keyword, counter, scratch, p, mtry):
    """Partial Fisher-Yates into scratch[:p]; the drawn mtry features end up
    in scratch[:mtry]. Returns the new counter."""
    for j in range(p):
        scratch[j] = j
    for i in range(mtry):
        v, counter = rand_below(seed, keyword, counter, np.uint64(p - i))
        j = i + int(v)
        tmp = scratch[i]
        scratch[i] = scratch[j]
        scratch[j] = tmp
    return counter


@njit(cache=True, nogil=True)
def build_tree_arrays(X, y, n_classes, mtry, min_node_size, max_depth,
                      bootstrap_size, seed, keyword):
    """Grow one CART tree and return it as preorder arrays.

    Draw order on the (seed, keyword) stream: bootstrap_size bag draws, then
    per node (in preorder) the mtry feature draws. Splits maximize Gini
    impurity decrease over all midpoints between consecutive distinct sorted
    values of each candidate feature; ties break toward the lowest feature
    index, then the lowest threshold.

    Returns (kind, feature, threshold, left_size, leaf_counts, node_count):
    preorder node arrays (kind 0=leaf 1=internal; left child of internal i is
    i+1, right child is i+1+left_size[i]) and per-leaf class counts in
    preorder leaf order.
    """
    n = X.shape[0]
    p = X.shape[1]
    counter = np.uint64(0)

    bag = np.empty(bootstrap_size, np.int64)
    for i in range(bootstrap_size):
        v, counter = rand_below(seed, keyword, counter, np.uint64(n))
        bag[i] = int(v)

    max_nodes = 2 * bootstrap_size - 1
    kind = np.zeros(max_nodes, np.uint8)
    feature = np.zeros(max_nodes, np.int64)
    threshold = np.zeros(max_nodes, np.float64)
    left_size = np.zeros(max_nodes, np.int64)
    counts_buf = np.zeros((max_nodes, n_classes), np.int64)

    # DFS stack rows: (start, end, depth, parent, is_right)
    stack = np.empty((max_nodes + 1, 5), np.int64)
    sp = 0
    stack[sp, 0] = 0
    stack[sp, 1] = bootstrap_size
    stack[sp, 2] = 0
    stack[sp, 3] = -1
    stack[sp, 4] = 0
    sp += 1

    cls_node = np.zeros(n_classes, np.int64)
    cls_left = np.zeros(n_classes, np.int64)
    feat_scratch = np.empty(p, np.int64)
    vals = np.empty(bootstrap_size, np.float64)

    node_count = 0
    n_leaves = 0
    while sp > 0:
        sp -= 1
        start = stack[sp, 0]
        end = stack[sp, 1]
        depth = stack[sp, 2]
        parent = stack[sp, 3]
        is_right = stack[sp, 4]

        idx = node_count
        node_count += 1
        if is_right == 1:
            left_size[parent] = idx - parent - 1

        m = end - start
        for c in range(n_classes):
            cls_node[c] = 0
        for i in range(start, end):
            cls_node[y[bag[i]]] += 1
        sum_sq_total = 0
        top = 0
        for c in range(n_classes):
            sum_sq_total += cls_node[c] * cls_node[c]
            if cls_node[c] > top:
                top = cls_node[c]

        pure = top == m
        stop = pure or m < 2 * min_node_size or depth >= max_depth

        best_dec = 0.0
        best_f = -1
        best_t = 0.0
        if not stop:
            counter = _sample_features(seed, keyword, counter, feat_scratch, p, mtry)
            cand = np.sort(feat_scratch[:mtry])  # ascending for tie-breaking
            mf = float(m)
            gp = 1.0 - float(sum_sq_total) / (mf * mf)
            for ci in range(mtry):
                f = cand[ci]
                for i in range(m):
                    vals[i] = X[bag[start + i], f]
                order = np.argsort(vals[:m])
                for c in range(n_classes):
                    cls_left[c] = 0
                sum_sq_l = 0
                sum_sq_r = sum_sq_total
                for i in range(m - 1):
                    c = y[bag[start + order[i]]]
                    k = cls_left[c]
                    cls_left[c] = k + 1
                    sum_sq_l += 2 * k + 1
                    sum_sq_r += 1 - 2 * (cls_node[c] - k)
                    v_lo = vals[order[i]]
                    v_hi = vals[order[i + 1]]
                    if v_lo != v_hi:
                        thr = 0.5 * (v_lo + v_hi)
                        if thr >= v_hi:
                            # adjacent floats: midpoint rounded up; fall back
                            # so rows == v_lo still route left
                            thr = v_lo
                        nl = float(i + 1)
                        nr = mf - nl
                        gl = 1.0 - float(sum_sq_l) / (nl * nl)
                        gr = 1.0 - float(sum_sq_r) / (nr * nr)
                        dec = gp - (nl / mf) * gl - (nr / mf) * gr
                        if dec > best_dec:
                            best_dec = dec
                            best_f = f
                            best_t = thr

        if stop or best_f < 0:
            kind[idx] = 0
            for c in range(n_classes):
                counts_buf[idx, c] = cls_node[c]
            n_leaves += 1
        else:
            kind[idx] = 1
            feature[idx] = best_f
            threshold[idx] = best_t
            # partition bag[start:end): rows with value <= threshold first
            i = start
            for k2 in range(start, end):
                if X[bag[k2], best_f] <= best_t:
                    tmp = bag[i]
                    bag[i] = bag[k2]
                    bag[k2] = tmp
                    i += 1
            # right child pushed first so the left subtree is emitted next
            stack[sp, 0] = i
            stack[sp, 1] = end
            stack[sp, 2] = depth + 1
            stack[sp, 3] = idx
            stack[sp, 4] = 1
            sp += 1
            stack[sp, 0] = start
            stack[sp, 1] = i
            stack[sp, 2] = depth + 1
            stack[sp, 3] = idx
            stack[sp, 4] = 0
            sp += 1

    leaf_counts = np.empty((n_leaves, n_classes), np.int64)
    li = 0
    for i in range(node_count):
        if kind[i] == 0:
            for c in range(n_classes):
                leaf_counts[li, c] = counts_buf[i, c]
            li += 1
    return (kind[:node_count].copy(), feature[:node_count].copy(),
            threshold[:node_count].copy(), left_size[:node_count].copy(),
            leaf_counts, node_count)


@njit(cache=True, nogil=True)
def predict_rows(Xq, row_start, row_end, tree_ofs, feat, thr, right, leafclass,
                 n_classes, out):
    """Majority vote of all trees for rows [row_start, row_end).

    Concatenated-forest arrays: tree t occupies nodes starting at tree_ofs[t];
    leafclass >= 0 marks a leaf (holding its majority class), internal nodes
    hold -1. Vote ties break toward the lowest class index. Writes out[i] for
    the slice only, so concurrent callers on disjoint slices never collide.
    """
    n_trees = tree_ofs.shape[0]
    votes = np.zeros(n_classes, np.int64)
    for i in range(row_start, row_end):
        for c in range(n_classes):
            votes[c] = 0
        for t in range(n_trees):
            node = tree_ofs[t]
            while leafclass[node] < 0:
                if Xq[i, feat[node]] <= thr[node]:
                    node = node + 1
                else:
                    node = right[node]
            votes[leafclass[node]] += 1
        best = 0
        for c in range(1, n_classes):
            if votes[c] > votes[best]:
                best = c
        out[i] = best
    return 0


def warmup():
    """Force-compile (or load from cache) every kernel on a tiny input."""
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    y = np.array([0, 0, 1, 1], dtype=np.int32)
    res = build_tree_arrays(X, y, 2, 1, 1, 1 << 60, 4, np.uint64(1), np.uint64(2))
    kind, feature, threshold, left_size, leaf_counts, nc = res
    leafclass = np.full(nc, -1, np.int64)
    li = 0
    for i in range(nc):
        if kind[i] == 0:
            leafclass[i] = int(np.argmax(leaf_counts[li]))
            li += 1
    right = np.arange(nc, dtype=np.int64) + 1 + left_size
    out = np.empty(4, np.int32)
    predict_rows(X, 0, 4, np.zeros(1, np.int64), feature, threshold, right,
                 leafclass, 2, out)
