"""Simulation designs, tree scenarios, estimators and evaluation metrics.

A study draws Gaussian samples from a block-structured precision matrix,
fits the requested estimators and scores each one against the truth.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.cluster.hierarchy import linkage

from .model import NotPositiveDefiniteError, is_positive_definite, sample_covariance
from .selection import ConstraintSet, cross_validate, lambda_grid, refit
from .solver import Penalties, SolverConfig, fit_glasso, la_admm
from .tree import AggregationTree, Partition, TreeNode, ancestor_matrix

log = logging.getLogger(__name__)

DESIGNS = ("chain", "random", "unbalanced", "unstructured")
ESTIMATORS = ("oracle", "taglasso_ideal", "taglasso_realistic", "glasso")
COLUMNS = ("design", "p", "n", "K_true", "estimator", "rep", "seed",
           "kl", "ri", "ari", "fpr", "fnr")


class DesignError(ValueError):
    """Invalid design parameters or a non positive definite construction."""


# -- designs -----------------------------------------------------------------------

def _default_sizes(kind: str, p: int, k: int) -> tuple[int, ...]:
    if kind == "unstructured":
        return (1,) * p
    if kind == "unbalanced":
        if (p, k) == (15, 3):
            return (8, 4, 3)
        # sizes roughly halving from block to block
        w = 0.5 ** np.arange(k)
        sizes = np.maximum(1, np.floor(p * w / w.sum())).astype(int)
        sizes[0] += p - sizes.sum()
        return tuple(int(v) for v in sizes)
    return tuple(len(b) for b in np.array_split(np.arange(p), k))


@dataclass(frozen=True)
class DesignSpec:
    """Block-structured precision design.

    ``block_sizes`` defaults to ``k`` near-equal blocks (chain, random),
    ``(8, 4, 3)`` for the unbalanced design with ``p = 15`` and singletons
    for the unstructured design, which instead places ``n_edges`` random
    edges.
    """

    kind: str = "chain"
    p: int = 15
    block_sizes: tuple[int, ...] | None = None
    k: int = 3
    n_edges: int = 10
    diag_value: float = 1.0
    within_block: float = 0.5
    cross_block: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DESIGNS:
            raise DesignError(f"unknown design {self.kind!r}; choose from {', '.join(DESIGNS)}")
        if self.p < 2:
            raise DesignError("p must be at least 2")
        sizes = self.block_sizes
        if sizes is None:
            if self.kind != "unstructured" and not 1 <= self.k <= self.p:
                raise DesignError(f"k must be between 1 and p, got {self.k}")
            sizes = _default_sizes(self.kind, self.p, self.k)
        sizes = tuple(int(v) for v in sizes)
        if any(v < 1 for v in sizes):
            raise DesignError("block sizes must be positive")
        if sum(sizes) != self.p:
            raise DesignError(f"block sizes {sizes} do not sum to p={self.p}")
        if self.kind == "unstructured" and any(v != 1 for v in sizes):
            raise DesignError("the unstructured design uses singleton blocks")
        max_edges = self.p * (self.p - 1) // 2
        if self.kind == "unstructured" and not 0 <= self.n_edges <= max_edges:
            raise DesignError(f"n_edges must be between 0 and {max_edges}")
        object.__setattr__(self, "block_sizes", sizes)
        object.__setattr__(self, "k", len(sizes))


@dataclass(frozen=True)
class Design:
    omega: np.ndarray
    partition: Partition
    support: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.linalg.inv(self.omega)


def _block_graph(spec: DesignSpec, rng) -> np.ndarray:
    k = spec.k
    adj = np.zeros((k, k), dtype=bool)
    if spec.kind in ("chain", "unbalanced"):
        i = np.arange(k - 1)
        adj[i, i + 1] = True
    elif spec.kind == "random" and k >= 2:
        pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
        i, j = pairs[rng.integers(len(pairs))]
        adj[i, j] = True
    return adj | adj.T


def design_precision(spec: DesignSpec, max_retries: int = 100) -> Design:
    """True precision matrix, block partition and edge support of a design."""
    partition = Partition.from_sizes(spec.block_sizes)
    rng = np.random.default_rng(spec.seed)
    p = spec.p
    iu = np.triu_indices(p, 1)
    for _ in range(max_retries if spec.kind == "unstructured" else 1):
        if spec.kind == "unstructured":
            omega = np.zeros((p, p))
            pick = rng.choice(len(iu[0]), size=spec.n_edges, replace=False)
            omega[iu[0][pick], iu[1][pick]] = spec.cross_block
            omega = omega + omega.T
        else:
            lab = partition.labels
            adj = _block_graph(spec, rng)
            omega = np.where(lab[:, None] == lab[None, :], spec.within_block,
                             np.where(adj[np.ix_(lab, lab)], spec.cross_block, 0.0))
        np.fill_diagonal(omega, spec.diag_value)
        if is_positive_definite(omega):
            return Design(omega, partition, omega != 0)
    w = np.linalg.eigvalsh(omega)[0]
    raise DesignError(f"design is not positive definite (smallest eigenvalue {w:.4g})")


# -- trees -------------------------------------------------------------------------

def _leaf_nodes(p: int, parents: Sequence[str]) -> list[TreeNode]:
    return [TreeNode(f"X{j + 1}", parents[j], f"X{j + 1}") for j in range(p)]


def ideal_tree(partition: Partition) -> AggregationTree:
    """Root, one node per block, then the leaves: the true grouping as the only level."""
    nodes = [TreeNode("root", None, "root")]
    nodes += [TreeNode(f"G{b + 1}", "root", f"G{b + 1}") for b in range(partition.k)]
    nodes += _leaf_nodes(partition.p, [f"G{b + 1}" for b in partition.labels])
    return AggregationTree(tuple(nodes), tuple(f"X{j + 1}" for j in range(partition.p)))


def latent_points(block_sizes: Sequence[int], seed) -> np.ndarray:
    """Scalar latent positions: block ``i`` scattered around ``1/i`` with spread
    ``0.05`` times the distance to the nearest other block centre."""
    k = len(block_sizes)
    mu = 1.0 / np.arange(1, k + 1)
    gaps = np.abs(mu[:, None] - mu[None, :])
    np.fill_diagonal(gaps, np.inf)
    sd = 0.05 * gaps.min(axis=1)
    rng = np.random.default_rng(seed)
    return np.concatenate([rng.normal(mu[i], sd[i], size=block_sizes[i]) for i in range(k)])


def realistic_tree(block_sizes: Sequence[int], seed, method: str = "average") -> AggregationTree:
    """Full dendrogram of agglomerative clustering on noisy latent positions.

    Leaves are the variables in block order; internal node ``N{m}`` is the
    ``m``-th merge and the last merge is the root.
    """
    block_sizes = [int(v) for v in block_sizes]
    if len(block_sizes) < 2:
        raise DesignError("a realistic tree needs at least two blocks")
    x = latent_points(block_sizes, seed)
    p = len(x)
    merges = linkage(x[:, None], method=method, metric="euclidean")
    parent = {}
    for m, (a, b) in enumerate(merges[:, :2].astype(int)):
        parent[a] = parent[b] = p + m
    root = p + len(merges) - 1

    def node_id(c):
        return f"X{c + 1}" if c < p else ("root" if c == root else f"N{c - p + 1}")

    nodes = _leaf_nodes(p, [node_id(parent[j]) for j in range(p)])
    for c in range(p, root + 1):
        nodes.append(TreeNode(node_id(c), None if c == root else node_id(parent[c]), node_id(c)))
    return AggregationTree(tuple(nodes), tuple(f"X{j + 1}" for j in range(p)))


def contains_partition(tree: AggregationTree, partition: Partition) -> bool:
    """True if every block is exactly the leaf set below some node."""
    branches = set(tree.descendant_leaves().values())
    return all(frozenset(b) in branches for b in partition.blocks)


def true_constraints(tree: AggregationTree, design: Design) -> ConstraintSet:
    """Retained nodes and edge pattern of the truth on its ideal tree."""
    am = ancestor_matrix(tree)
    z = np.zeros(am.n_nodes, dtype=bool)
    z[am.columns(["root"] + [f"G{b + 1}" for b in range(design.partition.k)])] = True
    return ConstraintSet(z, design.support)


# -- sampling and metrics -------------------------------------------------------------

def sample_gaussian(omega, n: int, seed) -> np.ndarray:
    """``n`` draws from ``N(0, omega^-1)``."""
    omega = np.asarray(omega, dtype=float)
    if n < 1:
        raise ValueError("n must be positive")
    if not is_positive_definite(omega):
        raise NotPositiveDefiniteError("omega is not positive definite")
    chol = np.linalg.cholesky(np.linalg.inv(omega))
    z = np.random.default_rng(seed).standard_normal((n, omega.shape[0]))
    return z @ chol.T


def _logdet(m) -> float:
    try:
        return 2.0 * float(np.sum(np.log(np.diag(np.linalg.cholesky(m)))))
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("matrix is not positive definite") from None


def kl_distance(sigma_true, omega_hat) -> float:
    """``-logdet(Sigma Omega) + tr(Sigma Omega) - p``."""
    sigma = np.asarray(sigma_true, dtype=float)
    omega = np.asarray(omega_hat, dtype=float)
    omega = (omega + omega.T) / 2
    ld = _logdet((sigma + sigma.T) / 2) + _logdet(omega)
    return float(-ld + np.sum(sigma * omega) - sigma.shape[0])


@dataclass(frozen=True)
class Similarity:
    ri: float
    ari: float
    ari_defined: bool = True


def _comb2(x):
    x = np.asarray(x, dtype=float)
    return x * (x - 1) / 2


def partition_similarity(truth: Partition, estimate: Partition) -> Similarity:
    """Rand and adjusted Rand index from the contingency table.

    The adjusted index is reported as NaN and flagged undefined when the
    true partition is all singletons.
    """
    a = truth.labels if isinstance(truth, Partition) else Partition(truth).labels
    b = estimate.labels if isinstance(estimate, Partition) else Partition(estimate).labels
    if len(a) != len(b):
        raise ValueError(f"partitions have different lengths ({len(a)} vs {len(b)})")
    n = len(a)
    total = n * (n - 1) / 2
    table = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(table, (a, b), 1)
    both = _comb2(table).sum()
    same_a = _comb2(table.sum(axis=1)).sum()
    same_b = _comb2(table.sum(axis=0)).sum()
    ri = 1.0 if total == 0 else float((total + 2 * both - same_a - same_b) / total)
    if a.max() + 1 == n:
        return Similarity(ri, float("nan"), False)
    expected = same_a * same_b / total
    top = (same_a + same_b) / 2 - expected
    ari = (1.0 if np.array_equal(a, b) else 0.0) if top == 0 else float((both - expected) / top)
    return Similarity(ri, ari, True)


@dataclass(frozen=True)
class ErrorRates:
    fpr: float
    fnr: float
    fpr_defined: bool = True
    fnr_defined: bool = True


def _pair_matrix(support, p):
    if isinstance(support, np.ndarray) and support.ndim == 2:
        m = support.astype(bool)
    else:
        m = np.zeros((p, p), dtype=bool)
        for i, j in support:
            m[i, j] = m[j, i] = True
    return m | m.T


def fpr_fnr(truth_support, estimated_support, p: int | None = None) -> ErrorRates:
    """False positive and negative rates over off-diagonal pairs ``i < j``.

    Supports are boolean matrices or collections of index pairs. An empty
    denominator gives a rate of 0 with its ``defined`` flag cleared.
    """
    if p is None:
        p = np.asarray(truth_support).shape[0]
    t = _pair_matrix(truth_support, p)
    e = _pair_matrix(estimated_support, p)
    iu = np.triu_indices(p, 1)
    t, e = t[iu], e[iu]
    zeros, nonzeros = int((~t).sum()), int(t.sum())
    fpr = float((e & ~t).sum() / zeros) if zeros else 0.0
    fnr = float((~e & t).sum() / nonzeros) if nonzeros else 0.0
    return ErrorRates(fpr, fnr, zeros > 0, nonzeros > 0)


@dataclass(frozen=True)
class StudyMetrics:
    kl: float
    ri: float
    ari: float
    fpr: float
    fnr: float
    ari_defined: bool = True


def evaluate(design: Design, omega_hat, partition: Partition, support) -> StudyMetrics:
    sim = partition_similarity(design.partition, partition)
    rates = fpr_fnr(design.support, support)
    return StudyMetrics(kl_distance(design.sigma, omega_hat), sim.ri, sim.ari,
                        rates.fpr, rates.fnr, sim.ari_defined)


# -- estimators -------------------------------------------------------------------------

@dataclass
class EstimatorResult:
    omega: np.ndarray
    partition: Partition
    support: np.ndarray
    lambda1: float = float("nan")
    lambda2: float = float("nan")
    k: int = 0
    residual: float = float("nan")


def fit_oracle(s, design: Design, config=None) -> EstimatorResult:
    tree = ideal_tree(design.partition)
    est = refit(s, tree, true_constraints(tree, design), config)
    return EstimatorResult(est.omega, est.partition, est.omega != 0, 0.0, 0.0,
                           est.partition.k, est.converged_residual)


def fit_taglasso_cv(x, tree, config=None, folds: int = 5, seed=0, grid_size: int = 10,
                    on_refit=None) -> EstimatorResult:
    """Cross-validated tag-lasso followed by a refit on all the data."""
    s = sample_covariance(x)
    grid = lambda_grid(s, tree, size=grid_size, config=config)
    sel = cross_validate(x, tree, grid, folds=folds, config=config, seed=seed, on_refit=on_refit)
    lam1, lam2 = sel.chosen
    fit = la_admm(s, tree, Penalties(lam1, lam2), config)
    est = refit(s, tree, ConstraintSet.from_fit(fit), config)
    return EstimatorResult(est.omega, est.partition, est.omega != 0, lam1, lam2,
                           fit.k, fit.residual)


def fit_glasso_cv(x, config=None, folds: int = 5, seed=0, grid_size: int = 10) -> EstimatorResult:
    """Graphical lasso with lambda2 chosen by cross-validation over a ``grid_size`` grid."""
    s = sample_covariance(x)
    p = s.p
    tree = AggregationTree.star(p)
    off = np.abs(s.matrix - np.diag(np.diag(s.matrix)))
    top = float(off.max())
    if not top > 0:
        raise ValueError("degenerate grid: the covariance has no nonzero off-diagonal entry")
    lam2 = np.geomspace(top, 1e-3 * top, grid_size)
    sel = cross_validate(x, tree, (np.zeros(1), lam2), folds=folds, config=config, seed=seed,
                         refit=False)
    fit = fit_glasso(s, sel.chosen[1], config)
    return EstimatorResult(fit.omega, fit.partition, fit.support, 0.0, sel.chosen[1],
                           fit.k, fit.residual)


# -- studies ------------------------------------------------------------------------------

@dataclass
class StudyResult:
    """Long-format metrics table plus per-fit diagnostics."""

    rows: list[dict]
    details: list[dict] = field(default_factory=list)

    def column(self, estimator: str, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows if r["estimator"] == estimator], dtype=float)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in COLUMNS])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _fmt(v):
    if isinstance(v, float):
        return "NA" if math.isnan(v) else repr(v)
    return str(v)


def rep_seeds(seed, reps: int) -> list[int]:
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(reps)]


def _run_rep(spec: DesignSpec, n: int, rep: int, rep_seed: int, estimators, config,
             folds: int, grid_size: int, on_refit=None):
    design = design_precision(spec)
    x = sample_gaussian(design.omega, n, rep_seed)
    s = sample_covariance(x)
    rows, details = [], []
    for name in estimators:
        base = {"design": spec.kind, "p": spec.p, "n": n, "K_true": design.partition.k,
                "estimator": name, "rep": rep, "seed": rep_seed}
        try:
            if name == "oracle":
                res = fit_oracle(s, design, config)
            elif name == "taglasso_ideal":
                res = fit_taglasso_cv(x, ideal_tree(design.partition), config, folds, rep_seed,
                                      grid_size, on_refit)
            elif name == "taglasso_realistic":
                if design.partition.k < 2:
                    raise DesignError("a realistic tree needs at least two blocks")
                tree = realistic_tree(spec.block_sizes, rep_seed)
                res = fit_taglasso_cv(x, tree, config, folds, rep_seed, grid_size, on_refit)
            elif name == "glasso":
                res = fit_glasso_cv(x, config, folds, rep_seed, grid_size)
            else:
                raise ValueError(f"unknown estimator {name!r}")
            m = evaluate(design, res.omega, res.partition, res.support)
            rows.append({**base, "kl": m.kl, "ri": m.ri, "ari": m.ari, "fpr": m.fpr, "fnr": m.fnr})
            details.append({"estimator": name, "rep": rep, "lambda1": res.lambda1,
                            "lambda2": res.lambda2, "k": res.k, "k_refit": res.partition.k,
                            "residual": res.residual, "error": ""})
        except Exception as exc:  # a failed cell must not abort the study
            log.warning("rep %d estimator %s failed: %s", rep, name, exc)
            nan = float("nan")
            rows.append({**base, "kl": nan, "ri": nan, "ari": nan, "fpr": nan, "fnr": nan})
            details.append({"estimator": name, "rep": rep, "error": f"{type(exc).__name__}: {exc}"})
    return rows, details


def run_study(spec: DesignSpec, n: int = 120, reps: int = 100,
              estimators: Sequence[str] = ESTIMATORS, config: SolverConfig | None = None,
              seed=0, folds: int = 5, grid_size: int = 10, jobs: int = 1,
              on_refit: Callable | None = None, progress: Callable | None = None) -> StudyResult:
    """Replicate a design ``reps`` times and score every requested estimator.

    Replication ``r`` samples its data (and its realistic tree and CV
    folds) from the ``r``-th child of ``seed``, so the table is a pure
    function of the arguments. ``on_refit(estimate, ancestor)`` is called
    for every refit made during cross-validation (single process only).
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    bad = [e for e in estimators if e not in ESTIMATORS]
    if bad:
        raise ValueError(f"unknown estimators {bad}; valid names are {', '.join(ESTIMATORS)}")
    config = config or SolverConfig()
    design_precision(spec)
    seeds = rep_seeds(seed, reps)
    args = [(spec, n, r, seeds[r], tuple(estimators), config, folds, grid_size) for r in range(reps)]
    out = StudyResult([], [])
    if jobs > 1 and reps > 1:
        if on_refit is not None:
            raise ValueError("on_refit callbacks need jobs=1")
        with ProcessPoolExecutor(jobs) as pool:
            results = pool.map(_run_rep, *zip(*args))
            for r, (rows, details) in enumerate(results):
                out.rows += rows
                out.details += details
                if progress:
                    progress(r)
    else:
        for r, a in enumerate(args):
            rows, details = _run_rep(*a, on_refit=on_refit)
            out.rows += rows
            out.details += details
            if progress:
                progress(r)
    return out


def summarize(result: StudyResult, estimators: Sequence[str] | None = None) -> list[dict]:
    """Per-estimator mean and standard error of every metric (NaNs skipped)."""
    names = estimators or list(dict.fromkeys(r["estimator"] for r in result.rows))
    out = []
    for name in names:
        entry = {"estimator": name}
        for m in ("kl", "ri", "ari", "fpr", "fnr"):
            v = result.column(name, m)
            v = v[np.isfinite(v)]
            entry[m] = float(v.mean()) if v.size else float("nan")
            entry[m + "_se"] = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
        out.append(entry)
    return out


def format_summary(summary: list[dict]) -> str:
    """Table with ``mean (se)`` cells, one row per estimator."""
    def cell(m, se):
        if math.isnan(m):
            return "NA"
        s = "NA" if math.isnan(se) else f"{se:.2f}".lstrip("0") if se < 1 else f"{se:.2f}"
        return f"{m:.2f} ({s})"

    head = f"{'estimator':<20}" + "".join(f"{c:>14}" for c in ("KL", "RI", "ARI", "FPR", "FNR"))
    lines = [head]
    for e in summary:
        lines.append(f"{e['estimator']:<20}" + "".join(
            f"{cell(e[m], e[m + '_se']):>14}" for m in ("kl", "ri", "ari", "fpr", "fnr")))
    return "\n".join(lines)
