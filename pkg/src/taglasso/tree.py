"""Aggregation trees, ancestor matrices and node-aggregation decoding."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class TreeError(ValueError):
    """Structural problem with an aggregation tree."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class StructureError(ValueError):
    """A matrix does not have the block structure implied by a partition."""

    def __init__(self, message, max_deviation):
        super().__init__(message)
        self.max_deviation = max_deviation


@dataclass(frozen=True)
class TreeNode:
    id: str
    parent: str | None = None
    label: str = ""


@dataclass(frozen=True)
class AggregationTree:
    """A rooted tree whose leaves are the variables.

    ``leaf_order`` lists leaf node ids by variable index; when omitted the
    leaves are taken in node order.
    """

    nodes: tuple[TreeNode, ...]
    leaf_order: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if self.leaf_order is not None:
            object.__setattr__(self, "leaf_order", tuple(self.leaf_order))

    @classmethod
    def from_parents(cls, parents, labels=None, leaf_order=None):
        """Build from a ``{node_id: parent_id or None}`` mapping."""
        labels = labels or {}
        nodes = [TreeNode(str(k), None if v is None else str(v), labels.get(k, str(k)))
                 for k, v in parents.items()]
        return cls(tuple(nodes), leaf_order)

    @classmethod
    def star(cls, p: int, names: Sequence[str] | None = None):
        """Root with ``p`` leaf children: the tree for which tag-lasso is the glasso."""
        names = list(names) if names is not None else [f"X{j + 1}" for j in range(p)]
        nodes = [TreeNode(f"leaf{j + 1}", "root", names[j]) for j in range(p)]
        nodes.append(TreeNode("root", None, "root"))
        return cls(tuple(nodes), tuple(n.id for n in nodes[:p]))

    @property
    def by_id(self) -> dict[str, TreeNode]:
        return {n.id: n for n in self.nodes}

    @property
    def children(self) -> dict[str, list[str]]:
        kids: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            if n.parent is not None and n.parent in kids and n.parent != n.id:
                kids[n.parent].append(n.id)
        return kids

    @property
    def roots(self) -> list[str]:
        return [n.id for n in self.nodes if n.parent is None]

    @property
    def leaves(self) -> list[str]:
        """Leaf ids ordered by variable index."""
        if self.leaf_order is not None:
            return list(self.leaf_order)
        kids = self.children
        return [n.id for n in self.nodes if not kids[n.id]]

    @property
    def p(self) -> int:
        return len(self.leaves)

    def leaf_labels(self) -> list[str]:
        nodes = self.by_id
        return [nodes[i].label for i in self.leaves]

    def path_to_root(self, node_id: str) -> list[str]:
        """Node ids from ``node_id`` up to the root, inclusive."""
        nodes = self.by_id
        path, cur = [], node_id
        while cur is not None:
            if cur in path:
                raise TreeError([f"cycle through node {cur!r}"])
            path.append(cur)
            cur = nodes[cur].parent
        return path

    def with_variables(self, var_names: Sequence[str]) -> "AggregationTree":
        """Order leaves to match ``var_names`` by label (case-sensitive)."""
        problems = validate_tree(self, var_names)
        if problems:
            raise TreeError(problems)
        kids = self.children
        by_label = {n.label: n.id for n in self.nodes if not kids[n.id]}
        return AggregationTree(self.nodes, tuple(by_label[v] for v in var_names))

    def descendant_leaves(self) -> dict[str, frozenset[int]]:
        """Variable indices below (or at) every node."""
        out: dict[str, set[int]] = {n.id: set() for n in self.nodes}
        for j, leaf in enumerate(self.leaves):
            for u in self.path_to_root(leaf):
                out[u].add(j)
        return {k: frozenset(v) for k, v in out.items()}


def validate_tree(tree: AggregationTree, var_names: Sequence[str] | None = None) -> list[str]:
    """Return a list of structural violations; empty means the tree is valid."""
    out = []
    ids = [n.id for n in tree.nodes]
    seen = set()
    for i in ids:
        if i in seen:
            out.append(f"duplicate node id {i!r}")
        seen.add(i)
    nodes = {n.id: n for n in tree.nodes}
    for n in tree.nodes:
        if n.parent is not None and n.parent not in nodes:
            out.append(f"node {n.id!r} has unknown parent {n.parent!r}")
    roots = tree.roots
    if len(roots) != 1:
        out.append(f"expected exactly one root, found {len(roots)}")

    reached, on_cycle = set(), set()
    for n in tree.nodes:
        cur, path = n.id, []
        while True:
            if cur is None:
                reached.update(path)
                break
            if cur not in nodes:
                break
            if cur in path:
                on_cycle.update(path[path.index(cur):])
                break
            path.append(cur)
            cur = nodes[cur].parent
    for i in ids:
        if i in on_cycle:
            out.append(f"cycle through node {i!r}")
        elif i not in reached:
            out.append(f"node {i!r} is not reachable from the root")

    kids = tree.children
    leaves = [n.id for n in tree.nodes if not kids[n.id]]
    if var_names is not None:
        names = list(var_names)
        labels = [nodes[i].label for i in leaves]
        if len(labels) != len(names):
            out.append(f"tree has {len(labels)} leaves but there are {len(names)} variables")
        dup = sorted({x for x in labels if labels.count(x) > 1})
        if dup:
            out.append(f"duplicate leaf labels {dup}")
        for name in names:
            if name not in labels:
                out.append(f"variable {name!r} has no matching tree leaf")
        for lab in labels:
            if lab not in names:
                out.append(f"leaf label {lab!r} does not match any variable")
    elif tree.leaf_order is not None:
        if sorted(tree.leaf_order) != sorted(leaves):
            out.append("leaf_order is not a permutation of the tree's leaves")
    return out


@dataclass(frozen=True)
class AncestorMatrix:
    """Binary ``p x |T|`` matrix with ``a[j, k] = 1`` iff node k is on leaf j's root path."""

    a: np.ndarray
    node_order: tuple[str, ...]
    root_column: int
    parents: tuple[int, ...] | None = None

    def parent_columns(self) -> tuple[int, ...]:
        """Parent column of every node (-1 for the root)."""
        if self.parents is not None:
            return self.parents
        # fall back to inclusion of leaf sets; ties (unary chains) need ``parents``
        leafsets = self.a.astype(bool).T
        sizes = leafsets.sum(axis=1)
        out = []
        for k in range(self.n_nodes):
            cands = [v for v in range(self.n_nodes) if v != k and sizes[v] > sizes[k]
                     and np.all(leafsets[v] >= leafsets[k])]
            out.append(min(cands, key=lambda v: sizes[v]) if cands else -1)
        return tuple(out)

    def ancestors(self, k: int) -> list[int]:
        """Columns strictly above node ``k``, nearest first."""
        par = self.parent_columns()
        out, cur = [], par[k]
        while cur != -1:
            out.append(cur)
            cur = par[cur]
        return out

    @property
    def p(self) -> int:
        return self.a.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.a.shape[1]

    def columns(self, ids) -> list[int]:
        index = {u: k for k, u in enumerate(self.node_order)}
        return [index[u] for u in ids]


def ancestor_matrix(tree: AggregationTree) -> AncestorMatrix:
    """Build the leaf-ancestor incidence matrix; columns follow ``tree.nodes`` order."""
    problems = validate_tree(tree)
    if problems:
        raise TreeError(problems)
    order = tuple(n.id for n in tree.nodes)
    col = {u: k for k, u in enumerate(order)}
    leaves = tree.leaves
    a = np.zeros((len(leaves), len(order)))
    for j, leaf in enumerate(leaves):
        for u in tree.path_to_root(leaf):
            a[j, col[u]] = 1.0
    a.setflags(write=False)
    parents = tuple(-1 if n.parent is None else col[n.parent] for n in tree.nodes)
    return AncestorMatrix(a, order, col[tree.roots[0]], parents)


@dataclass(frozen=True)
class Partition:
    """Assignment of ``p`` variables to ``k`` blocks.

    Block ids are 0-based and numbered by first appearance, so two
    partitions with the same blocks compare equal.
    """

    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        raw = np.asarray(self.labels).ravel()
        _, first, inv = np.unique(raw, return_index=True, return_inverse=True)
        rank = np.empty(len(first), dtype=int)
        rank[np.argsort(first)] = np.arange(len(first))
        lab = rank[inv.ravel()]
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    def __eq__(self, other):
        return isinstance(other, Partition) and np.array_equal(self.labels, other.labels)

    def __hash__(self):
        return hash(tuple(self.labels))

    def __repr__(self):
        return f"Partition(k={self.k}, labels={self.labels.tolist()})"

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "Partition":
        return cls(np.repeat(np.arange(len(sizes)), sizes))

    @classmethod
    def singletons(cls, p: int) -> "Partition":
        return cls(np.arange(p))

    @property
    def p(self) -> int:
        return len(self.labels)

    @property
    def k(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def membership(self) -> np.ndarray:
        m = np.zeros((self.p, self.k))
        m[np.arange(self.p), self.labels] = 1.0
        return m

    @property
    def blocks(self) -> list[list[int]]:
        return [np.flatnonzero(self.labels == b).tolist() for b in range(self.k)]


def nonzero_rows(gamma, zero_tol: float = 0.0) -> np.ndarray:
    """Boolean mask of rows whose Euclidean norm exceeds ``zero_tol``."""
    return np.linalg.norm(np.asarray(gamma, dtype=float), axis=-1) > zero_tol


def decode_partition(gamma, a: AncestorMatrix, zero_tol: float = 0.0) -> Partition:
    """Blocks are variables sharing a row of ``A`` restricted to nonzero Gamma rows.

    The root is always retained since its row is not penalised.
    """
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape[0] != a.n_nodes:
        raise ValueError(f"gamma has {gamma.shape[0]} rows but the tree has {a.n_nodes} nodes")
    z = nonzero_rows(gamma, zero_tol)
    z[a.root_column] = True
    return partition_from_support(a, z)


def partition_from_support(a: AncestorMatrix, z) -> Partition:
    """Partition induced by a boolean mask ``z`` of retained tree nodes."""
    az = a.a[:, np.asarray(z, dtype=bool)]
    _, inv = np.unique(az, axis=0, return_inverse=True)
    return Partition(inv.ravel())


@dataclass(frozen=True)
class AggregatedPrecision:
    c: np.ndarray
    omega_agg: np.ndarray
    floored: np.ndarray
    max_deviation: float


def block_means(m, partition: Partition) -> np.ndarray:
    """``K x K`` matrix of block-pair averages of ``m``."""
    mem = partition.membership
    counts = mem.sum(axis=0)
    return mem.T @ np.asarray(m, dtype=float) @ mem / np.outer(counts, counts)


def aggregate_precision(omega, d, partition: Partition, d_floor: float = 1e-8,
                        atol: float = 1e-6) -> AggregatedPrecision:
    """Precision matrix of the block sums of a G-block structured ``omega``.

    ``omega - diag(d)`` must be constant on every block pair (within
    ``atol``). Returns the block core ``C`` and ``C + (M.T D^-1 M)^-1``,
    with entries of ``d`` below ``d_floor`` raised to it and flagged.
    """
    omega = np.asarray(omega, dtype=float)
    d = np.asarray(d, dtype=float)
    if omega.shape != (partition.p, partition.p) or d.shape != (partition.p,):
        raise ValueError("omega, d and partition dimensions disagree")
    core = omega - np.diag(d)
    c = block_means(core, partition)
    lab = partition.labels
    dev = float(np.max(np.abs(core - c[np.ix_(lab, lab)])))
    if dev > atol:
        raise StructureError(
            f"omega - diag(d) is not block constant (max deviation {dev:.3g} > {atol:g})", dev)
    c = (c + c.T) / 2
    floored = d < d_floor
    dd = np.where(floored, d_floor, d)
    d_agg = 1.0 / (partition.membership.T @ (1.0 / dd))
    return AggregatedPrecision(c, c + np.diag(d_agg), floored, dev)


def nonzero_block_edges(c, tol: float = 1e-6) -> list[tuple[int, int]]:
    """Off-diagonal pairs ``(k, l)``, ``k < l``, with ``|c[k, l]| > tol``."""
    c = np.asarray(c)
    k = c.shape[0]
    return [(i, j) for i in range(k) for j in range(i + 1, k) if abs(c[i, j]) > tol]
