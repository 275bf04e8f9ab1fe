"""CART decision trees with Gini splits, bagged forests, and the portable
tree wire format.

A tree is a pure function of (training data, params, seed, global tree
index): the bootstrap bag and every node's feature sample come from the
stream keyed by the tree's global index, never from shared generator state.
Any partition of the index range over workers or ranks therefore produces
the same trees, and combine() is exactly transparent.

Trees are stored as preorder arrays (the in-memory twin of the wire format):
the left child of internal node i is i+1, the right child i+1+left_size[i].
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .data import Dataset
from .rng import StreamKey

_MASK64 = 0xFFFFFFFFFFFFFFFF
_NO_DEPTH_CAP = 1 << 60

_MAGIC = b"RFT1"
_HEADER = struct.Struct("<4sQHHI")  # magic, global_index, n_classes, n_features, node_count
_INTERNAL = struct.Struct("<HdI")   # feature, threshold, left_subtree_node_count
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")


class TreeDecodeError(ValueError):
    """Raised when a serialized tree buffer is truncated or malformed."""


@dataclass(frozen=True)
class ForestParams:
    """Forest hyperparameters. mtry defaults to floor(sqrt(p)) and
    bootstrap_size to the training-set size; both resolve against the
    training data at build time. max_depth None means unlimited."""

    n_trees: int = 500
    mtry: int | None = None
    min_node_size: int = 1
    max_depth: int | None = None
    bootstrap_size: int | None = None

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.min_node_size < 1:
            raise ValueError(f"min_node_size must be >= 1, got {self.min_node_size}")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError(f"mtry must be >= 1, got {self.mtry}")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError(f"max_depth must be >= 0, got {self.max_depth}")
        if self.bootstrap_size is not None and self.bootstrap_size < 1:
            raise ValueError(f"bootstrap_size must be >= 1, got {self.bootstrap_size}")

    def resolved(self, train: Dataset) -> "ForestParams":
        """Fill data-dependent defaults for a concrete training set."""
        mtry = self.mtry if self.mtry is not None else max(1, int(math.isqrt(train.p)))
        if mtry > train.p:
            raise ValueError(f"mtry {mtry} exceeds feature count {train.p}")
        bootstrap = self.bootstrap_size if self.bootstrap_size is not None else train.n
        return replace(self, mtry=mtry, bootstrap_size=bootstrap)


class TreeNode:
    """Read-only view of one node of a DecisionTree.

    Internal nodes expose feature/threshold/left/right (rows with
    feature value <= threshold route left); leaves expose class_counts.
    """

    __slots__ = ("_tree", "index")

    def __init__(self, tree: "DecisionTree", index: int):
        self._tree = tree
        self.index = index

    @property
    def is_leaf(self) -> bool:
        return self._tree.kind[self.index] == 0

    @property
    def feature(self) -> int:
        if self.is_leaf:
            raise ValueError("leaf nodes have no split feature")
        return int(self._tree.feature[self.index])

    @property
    def threshold(self) -> float:
        if self.is_leaf:
            raise ValueError("leaf nodes have no threshold")
        return float(self._tree.threshold[self.index])

    @property
    def left(self) -> "TreeNode":
        if self.is_leaf:
            raise ValueError("leaf nodes have no children")
        return TreeNode(self._tree, self.index + 1)

    @property
    def right(self) -> "TreeNode":
        if self.is_leaf:
            raise ValueError("leaf nodes have no children")
        return TreeNode(self._tree, self.index + 1 + int(self._tree.left_size[self.index]))

    @property
    def class_counts(self) -> np.ndarray:
        if not self.is_leaf:
            raise ValueError("internal nodes carry no class counts")
        return self._tree.leaf_counts[self._tree.leaf_rank[self.index]]


class DecisionTree:
    """One trained tree: preorder node arrays plus identity metadata."""

    __slots__ = ("global_index", "n_classes", "n_features", "kind", "feature",
                 "threshold", "left_size", "leaf_counts", "leaf_rank")

    def __init__(self, global_index, n_classes, n_features, kind, feature,
                 threshold, left_size, leaf_counts):
        self.global_index = int(global_index)
        self.n_classes = int(n_classes)
        self.n_features = int(n_features)
        self.kind = np.ascontiguousarray(kind, dtype=np.uint8)
        self.feature = np.ascontiguousarray(feature, dtype=np.uint16)
        self.threshold = np.ascontiguousarray(threshold, dtype=np.float64)
        self.left_size = np.ascontiguousarray(left_size, dtype=np.uint32)
        self.leaf_counts = np.ascontiguousarray(leaf_counts, dtype=np.uint32)
        # maps a leaf's node index to its row in leaf_counts
        self.leaf_rank = np.cumsum(self.kind == 0) - 1

    @property
    def node_count(self) -> int:
        return len(self.kind)

    @property
    def root(self) -> TreeNode:
        return TreeNode(self, 0)

    def node(self, index: int) -> TreeNode:
        return TreeNode(self, index)

    def equals(self, other: "DecisionTree") -> bool:
        """Exact structural and metadata equality."""
        return (self.global_index == other.global_index
                and self.n_classes == other.n_classes
                and self.n_features == other.n_features
                and np.array_equal(self.kind, other.kind)
                and np.array_equal(self.feature, other.feature)
                and np.array_equal(self.threshold, other.threshold)
                and np.array_equal(self.left_size, other.left_size)
                and np.array_equal(self.leaf_counts, other.leaf_counts))


class Forest:
    """An ordered collection of trees tagged with distinct global indices.

    Trees are kept sorted by global index; all trees must agree on class and
    feature counts. Immutable once built and safe to share across workers.
    """

    def __init__(self, trees: list[DecisionTree], n_classes: int, n_features: int,
                 params: ForestParams):
        trees = sorted(trees, key=lambda t: t.global_index)
        seen = set()
        for t in trees:
            if t.global_index in seen:
                raise ValueError(f"duplicate global tree index {t.global_index}")
            seen.add(t.global_index)
            if t.n_classes != n_classes or t.n_features != n_features:
                raise ValueError(
                    f"tree {t.global_index} shape ({t.n_classes} classes, "
                    f"{t.n_features} features) does not match forest "
                    f"({n_classes}, {n_features})")
        self.trees = trees
        self.n_classes = n_classes
        self.n_features = n_features
        self.params = params
        self._compiled = None

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def equals(self, other: "Forest") -> bool:
        return (self.n_classes == other.n_classes
                and self.n_features == other.n_features
                and self.n_trees == other.n_trees
                and all(a.equals(b) for a, b in zip(self.trees, other.trees)))

    def compiled(self):
        """Concatenated flat arrays for the prediction kernel (cached)."""
        if self._compiled is None:
            ofs = np.empty(len(self.trees), np.int64)
            feats, thrs, rights, leafcls = [], [], [], []
            base = 0
            for t_i, tree in enumerate(self.trees):
                nc = tree.node_count
                ofs[t_i] = base
                feats.append(tree.feature.astype(np.int64))
                thrs.append(tree.threshold)
                rights.append(np.arange(nc, dtype=np.int64) + 1
                              + tree.left_size.astype(np.int64) + base)
                lc = np.full(nc, -1, np.int64)
                leaf_nodes = np.flatnonzero(tree.kind == 0)
                lc[leaf_nodes] = np.argmax(tree.leaf_counts, axis=1)
                leafcls.append(lc)
                base += nc
            self._compiled = (ofs,
                              np.concatenate(feats),
                              np.concatenate(thrs),
                              np.concatenate(rights),
                              np.concatenate(leafcls))
        return self._compiled


def build_tree(train: Dataset, params: ForestParams, seed: int,
               global_index: int) -> DecisionTree:
    """Train one tree on a bootstrap sample of the training view.

    All randomness comes from the stream keyed ("tree", global_index) under
    `seed`, so the result is independent of which worker or rank builds it.
    """
    if train.n < 1:
        raise ValueError("cannot build a tree from an empty training view")
    rp = params.resolved(train)
    if train.p > 0xFFFF or train.n_classes > 0xFFFF:
        raise ValueError("feature or class count exceeds the wire format's u16 range")
    if rp.bootstrap_size > 0xFFFFFFFF:
        raise ValueError("bootstrap_size exceeds the wire format's u32 count range")
    depth_cap = rp.max_depth if rp.max_depth is not None else _NO_DEPTH_CAP
    keyword = StreamKey("tree", global_index).keyword()
    kind, feature, threshold, left_size, leaf_counts, _ = _kernels.build_tree_arrays(
        train.features, train.labels, train.n_classes, rp.mtry,
        rp.min_node_size, depth_cap, rp.bootstrap_size,
        np.uint64(seed & _MASK64), np.uint64(keyword))
    return DecisionTree(global_index, train.n_classes, train.p,
                        kind, feature, threshold, left_size, leaf_counts)


def build_forest_block(train: Dataset, params: ForestParams,
                       tree_indices, seed: int) -> Forest:
    """Build one forest block holding exactly the listed global tree indices.

    An empty index list yields an empty forest (legal: more workers than
    trees).
    """
    indices = [int(i) for i in tree_indices]
    if len(set(indices)) != len(indices):
        raise ValueError("duplicate global tree indices in block")
    rp = params.resolved(train)
    trees = [build_tree(train, rp, seed, gi) for gi in indices]
    return Forest(trees, train.n_classes, train.p, rp)


def combine(blocks: list[Forest]) -> Forest:
    """Merge forest blocks into one forest sorted by global tree index."""
    if not blocks:
        raise ValueError("combine requires at least one block")
    first = blocks[0]
    trees: list[DecisionTree] = []
    for b in blocks:
        if (b.n_classes, b.n_features) != (first.n_classes, first.n_features):
            raise ValueError("forest blocks disagree on class/feature counts")
        if b.params != first.params:
            raise ValueError("forest blocks disagree on params")
        trees.extend(b.trees)
    return Forest(trees, first.n_classes, first.n_features, first.params)


def predict_forest_slice(forest: Forest, rows: np.ndarray, start: int, end: int,
                         out: np.ndarray) -> None:
    """Predict rows[start:end] into out[start:end] (for chunked workers)."""
    ofs, feat, thr, right, leafcls = forest.compiled()
    _kernels.predict_rows(rows, start, end, ofs, feat, thr, right, leafcls,
                          forest.n_classes, out)


def predict_forest(forest: Forest, rows: np.ndarray) -> np.ndarray:
    """Majority-vote labels for a feature matrix.

    Each tree votes its leaf's majority class (leaf ties break to the lowest
    class index); the forest prediction is the most-voted class, ties again
    to the lowest index. Independent of tree evaluation order.
    """
    if forest.n_trees == 0:
        raise ValueError("cannot predict with an empty forest")
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != forest.n_features:
        raise ValueError(f"rows must be 2-D with {forest.n_features} columns, "
                         f"got shape {rows.shape}")
    out = np.empty(rows.shape[0], np.int32)
    predict_forest_slice(forest, rows, 0, rows.shape[0], out)
    return out


def accuracy(predicted, truth) -> float:
    """Proportion of positions where predicted == truth."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape or predicted.ndim != 1:
        raise ValueError(f"label lists must be 1-D and equal length, "
                         f"got {predicted.shape} vs {truth.shape}")
    if len(predicted) == 0:
        raise ValueError("cannot compute accuracy of empty label lists")
    return float(np.count_nonzero(predicted == truth)) / len(predicted)


def serialize_tree(tree: DecisionTree) -> bytes:
    """Encode a tree in the portable little-endian wire format.

    Layout: header (magic "RFT1", global_index u64, n_classes u16,
    n_features u16, node_count u32) then preorder node records: kind u8,
    followed for leaves by class-count length u16 and that many u32 counts,
    for internal nodes by feature u16, threshold f64, and the node count of
    the left subtree u32 (the right child starts right after it).
    """
    buf = bytearray()
    buf += _HEADER.pack(_MAGIC, tree.global_index, tree.n_classes,
                        tree.n_features, tree.node_count)
    kind = tree.kind
    feature = tree.feature
    threshold = tree.threshold
    left_size = tree.left_size
    leaf_rank = tree.leaf_rank
    counts = tree.leaf_counts
    n_classes = tree.n_classes
    counts_fmt = struct.Struct(f"<{n_classes}I")
    for i in range(tree.node_count):
        if kind[i] == 0:
            buf += _U8.pack(0)
            buf += _U16.pack(n_classes)
            buf += counts_fmt.pack(*counts[leaf_rank[i]])
        else:
            buf += _U8.pack(1)
            buf += _INTERNAL.pack(int(feature[i]), float(threshold[i]),
                                  int(left_size[i]))
    return bytes(buf)


def _check_structure(kind, left_size, node_count):
    """Verify preorder consistency: every internal node's left subtree fits
    and both children exist inside the parent's span."""
    stack = [(0, node_count)]  # (node index, exclusive end of its subtree)
    while stack:
        i, end = stack.pop()
        if i >= end:
            raise TreeDecodeError("node record index escapes its subtree span")
        if kind[i] == 0:
            if end != i + 1:
                raise TreeDecodeError(f"leaf node {i} has a non-empty subtree span")
            continue
        ls = int(left_size[i])
        right = i + 1 + ls
        if ls < 1 or right >= end:
            raise TreeDecodeError(f"internal node {i} has inconsistent subtree sizes")
        stack.append((right, end))
        stack.append((i + 1, right))


def deserialize_tree(buf: bytes) -> DecisionTree:
    """Decode a tree from the wire format; raises TreeDecodeError for any
    truncated or malformed buffer."""
    if len(buf) < _HEADER.size:
        raise TreeDecodeError(f"buffer too short for header: {len(buf)} bytes")
    magic, global_index, n_classes, n_features, node_count = _HEADER.unpack_from(buf, 0)
    if magic != _MAGIC:
        raise TreeDecodeError(f"bad magic {magic!r}")
    if n_classes < 2 or n_features < 1 or node_count < 1:
        raise TreeDecodeError("header fields out of range")

    kind = np.zeros(node_count, np.uint8)
    feature = np.zeros(node_count, np.uint16)
    threshold = np.zeros(node_count, np.float64)
    left_size = np.zeros(node_count, np.uint32)
    leaf_counts = []
    counts_fmt = struct.Struct(f"<{n_classes}I")
    ofs = _HEADER.size
    for i in range(node_count):
        if ofs + 1 > len(buf):
            raise TreeDecodeError(f"truncated at node {i} kind byte")
        k = buf[ofs]
        ofs += 1
        if k == 0:
            if ofs + 2 > len(buf):
                raise TreeDecodeError(f"truncated at node {i} class-count length")
            (clen,) = _U16.unpack_from(buf, ofs)
            ofs += 2
            if clen != n_classes:
                raise TreeDecodeError(
                    f"node {i}: class-count length {clen} != {n_classes} classes")
            if ofs + counts_fmt.size > len(buf):
                raise TreeDecodeError(f"truncated at node {i} class counts")
            row = counts_fmt.unpack_from(buf, ofs)
            ofs += counts_fmt.size
            if sum(row) < 1:
                raise TreeDecodeError(f"node {i}: leaf class counts sum to zero")
            leaf_counts.append(row)
        elif k == 1:
            kind[i] = 1
            if ofs + _INTERNAL.size > len(buf):
                raise TreeDecodeError(f"truncated at node {i} internal record")
            f, thr, ls = _INTERNAL.unpack_from(buf, ofs)
            ofs += _INTERNAL.size
            if f >= n_features:
                raise TreeDecodeError(f"node {i}: feature {f} >= {n_features}")
            if not math.isfinite(thr):
                raise TreeDecodeError(f"node {i}: non-finite threshold")
            feature[i] = f
            threshold[i] = thr
            left_size[i] = ls
        else:
            raise TreeDecodeError(f"node {i}: unknown kind byte {k}")
    if ofs != len(buf):
        raise TreeDecodeError(f"{len(buf) - ofs} trailing bytes after last node")
    _check_structure(kind, left_size, node_count)
    counts_arr = (np.array(leaf_counts, np.uint32) if leaf_counts
                  else np.zeros((0, n_classes), np.uint32))
    return DecisionTree(global_index, n_classes, n_features, kind, feature,
                        threshold, left_size, counts_arr)


def serialize_forest_block(forest: Forest) -> bytes:
    """Pack a forest block as a tree count plus length-prefixed trees
    (the payload shipped through allgather)."""
    buf = bytearray(struct.pack("<I", forest.n_trees))
    for tree in forest.trees:
        tb = serialize_tree(tree)
        buf += struct.pack("<I", len(tb))
        buf += tb
    return bytes(buf)


def deserialize_forest_block(buf: bytes, params: ForestParams, n_classes: int,
                             n_features: int) -> Forest:
    """Decode a serialized forest block (possibly empty, when a rank owned
    no trees); params and shape come from the receiving side's
    (digest-checked) run configuration."""
    if len(buf) < 4:
        raise TreeDecodeError("forest block shorter than its tree count")
    (count,) = struct.unpack_from("<I", buf, 0)
    ofs = 4
    trees = []
    for i in range(count):
        if ofs + 4 > len(buf):
            raise TreeDecodeError(f"forest block truncated at tree {i} length")
        (tlen,) = struct.unpack_from("<I", buf, ofs)
        ofs += 4
        if ofs + tlen > len(buf):
            raise TreeDecodeError(f"forest block truncated inside tree {i}")
        trees.append(deserialize_tree(buf[ofs:ofs + tlen]))
        ofs += tlen
    if ofs != len(buf):
        raise TreeDecodeError(f"{len(buf) - ofs} trailing bytes after last tree")
    return Forest(trees, n_classes, n_features, params)
