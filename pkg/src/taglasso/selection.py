"""Constrained refitting and tuning-parameter selection.

After a penalised fit, the retained tree nodes and the edge pattern are
frozen and the likelihood is maximised again without penalties. Grids
of ``(lambda1, lambda2)`` are scored by K-fold cross-validated negative
log-likelihood of such refitted estimates.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import NotPositiveDefiniteError, PrecisionEstimate, SampleCovariance, neg_log_likelihood, sample_covariance
from .solver import (SolverConfig, StructuredFactor, TagLassoFit, _as_ancestor, la_admm_batch,
                     project_pattern, project_rows, run_la_admm)
from .tree import AncestorMatrix, Partition, block_means, partition_from_support

log = logging.getLogger(__name__)


class SelectionError(ValueError):
    """No grid cell satisfies the selection constraint."""


class FoldError(ValueError):
    """Cross-validation folds are too small."""


@dataclass(frozen=True)
class ConstraintSet:
    """Retained tree nodes ``z`` (boolean per node) and permitted nonzero ``pattern``."""

    z: np.ndarray
    pattern: np.ndarray

    def __post_init__(self):
        pattern = np.array(self.pattern, dtype=bool)
        if pattern.ndim != 2 or pattern.shape[0] != pattern.shape[1]:
            raise ValueError("pattern must be a square boolean matrix")
        if not np.array_equal(pattern, pattern.T):
            raise ValueError("pattern must be symmetric")
        np.fill_diagonal(pattern, True)
        object.__setattr__(self, "pattern", pattern)
        object.__setattr__(self, "z", np.array(self.z, dtype=bool))

    @classmethod
    def from_fit(cls, fit: TagLassoFit) -> "ConstraintSet":
        return cls(fit.z.copy(), fit.support.copy())

    def key(self) -> bytes:
        return np.packbits(self.z).tobytes() + np.packbits(self.pattern).tobytes()


@dataclass(frozen=True)
class RefitEstimate(PrecisionEstimate):
    """Refitted precision matrix with its exact ``A_Z Gamma + D`` representation."""

    gamma: np.ndarray = None
    d: np.ndarray = None
    partition: Partition = None
    constraints: ConstraintSet = None

    @property
    def support(self) -> np.ndarray:
        return self.omega != 0


def _leaf_columns(am: AncestorMatrix) -> np.ndarray:
    par = am.parent_columns()
    has_child = np.zeros(am.n_nodes, dtype=bool)
    for v in par:
        if v >= 0:
            has_child[v] = True
    cols = np.empty(am.p, dtype=int)
    for k in np.flatnonzero(~has_child):
        cols[np.flatnonzero(am.a[:, k])[0]] = k
    return cols


def polish(omega, gamma, d, am: AncestorMatrix, constraints: ConstraintSet):
    """Snap an approximate refit solution onto the constraint set exactly.

    The block core is taken as block-pair means of ``omega - diag(d)``;
    block pairs containing a forbidden edge are zeroed; if some block hangs
    directly under the root its row of the core is made constant. Gamma is
    then rebuilt top-down so that ``A_Z Gamma + D`` reproduces the result.
    """
    z = constraints.z.copy()
    z[am.root_column] = True
    partition = partition_from_support(am, z)
    lab = partition.labels
    mem = partition.membership
    core = block_means((omega + omega.T) / 2 - np.diag(d), partition)
    core = (core + core.T) / 2
    offdiag = ~constraints.pattern
    forced = (mem.T @ offdiag.astype(float) @ mem) > 0
    core[forced] = 0.0

    par = am.parent_columns()
    leaf_col = _leaf_columns(am)
    lowest = np.empty(am.p, dtype=int)
    for j in range(am.p):
        cur = leaf_col[j]
        while not z[cur]:
            cur = par[cur]
        lowest[j] = cur
    root = am.root_column
    under_root = np.flatnonzero(lowest == root)
    new_gamma = np.zeros_like(gamma)
    if under_root.size:
        k0 = lab[under_root[0]]
        level = 0.0 if forced[k0].any() else float(np.mean(core[k0]))
        core[k0, :] = level
        core[:, k0] = level
        new_gamma[root] = level
    else:
        new_gamma[root] = float(np.mean(gamma[root]))

    target = core[np.ix_(lab, lab)]
    order = sorted(np.flatnonzero(z), key=lambda k: len(am.ancestors(k)))
    for u in order:
        if u == root:
            continue
        anc = [v for v in am.ancestors(u) if z[v]]
        members = np.flatnonzero(lowest == u)
        if members.size:
            new_gamma[u] = target[members[0]] - new_gamma[anc].sum(axis=0)
        else:
            new_gamma[u] = gamma[u]
    omega_new = (am.a * z) @ new_gamma + np.diag(d)
    return omega_new, new_gamma, partition


def refit_batch(s, tree, constraints: list[ConstraintSet], config: SolverConfig | None = None,
                polish_result: bool = True) -> list[RefitEstimate]:
    """Constrained maximum likelihood for several constraint sets at once.

    ``s`` is one covariance shared by all problems or a stack aligned with
    ``constraints``. Same splitting as the penalised solver, with the group
    prox replaced by zeroing rows outside ``z`` and the l1 prox by
    projection onto ``pattern``; the structured copy uses ``A`` restricted
    to the retained columns.
    """
    config = config or SolverConfig()
    am = _as_ancestor(tree)
    s = np.asarray(s.matrix if isinstance(s, SampleCovariance) else s, dtype=float)
    nb = len(constraints)
    if nb == 0:
        return []
    s_stack = np.broadcast_to(s, (nb,) + s.shape[-2:])
    z = np.stack([c.z for c in constraints])
    z[:, am.root_column] = True
    pattern = np.stack([c.pattern for c in constraints])
    factor = StructuredFactor.from_ancestor(am, z)

    def omega_prox(target, rho):
        return project_pattern(target, pattern)

    def gamma_prox(target, rho):
        return project_rows(target, z, am.root_column)

    state = run_la_admm(s_stack, factor, omega_prox, gamma_prox, config)
    res = state.residuals()
    out = []
    for b in range(nb):
        om, g1, d = state.omega[b], state.gamma_copies[0][b], state.d[b]
        cons = ConstraintSet(z[b], pattern[b])
        if polish_result:
            om, g1, part = polish(om, g1, d, am, cons)
        else:
            om = (om + om.T) / 2
            part = partition_from_support(am, z[b])
        try:
            obj = neg_log_likelihood(om, s_stack[b])
        except NotPositiveDefiniteError:
            obj = np.inf
        out.append(RefitEstimate(om, obj, float(res[b]), gamma=g1, d=d.copy(),
                                 partition=part, constraints=cons))
    return out


def refit(s, tree, constraints: ConstraintSet, config: SolverConfig | None = None) -> RefitEstimate:
    """Maximise the likelihood subject to the aggregation and sparsity constraints."""
    am = _as_ancestor(tree)
    if constraints.z.shape != (am.n_nodes,) or constraints.pattern.shape != (am.p, am.p):
        raise ValueError("constraint set does not match the tree dimensions")
    return refit_batch(s, am, [constraints], config)[0]


def lambda_grid(s, tree, size: int = 10, eps: float = 1e-3,
                config: SolverConfig | None = None, max_doublings: int = 40):
    """Descending log-spaced grids ``(lambda1_values, lambda2_values)``.

    The top of the lambda2 grid is the largest off-diagonal ``|S|``. The top
    of the lambda1 grid is found by doubling: the smallest tried value whose
    fit (at the median lambda2) aggregates everything into one block.
    """
    s = np.asarray(s.matrix if isinstance(s, SampleCovariance) else s, dtype=float)
    p = s.shape[0]
    if p < 2:
        raise ValueError("need p >= 2")
    off = np.abs(s - np.diag(np.diag(s)))
    lam2_max = float(off.max())
    if not lam2_max > 0:
        raise ValueError("degenerate grid: the covariance has no nonzero off-diagonal entry")
    lam2 = np.geomspace(lam2_max, eps * lam2_max, size)
    lam1_max = lambda1_max(s, tree, float(np.median(lam2)), config, start=lam2_max / 8,
                           max_doublings=max_doublings)
    lam1 = np.geomspace(lam1_max, eps * lam1_max, size)
    return lam1, lam2


def lambda1_max(s, tree, lambda2: float, config: SolverConfig | None = None,
                start: float = 1.0, max_doublings: int = 40, batch: int = 8) -> float:
    """Smallest ``start * 2**k`` whose fit has a single block (doubling search).

    Candidates are evaluated ``batch`` at a time.
    """
    am = _as_ancestor(tree)
    factor = StructuredFactor.from_ancestor(am)
    k = 0
    while k < max_doublings:
        cands = start * 2.0 ** np.arange(k, k + batch)
        fits = la_admm_batch(s, am, cands, lambda2, config, factor=factor)
        for c, f in zip(cands, fits):
            if f.k == 1:
                return float(c)
        k += batch
    raise RuntimeError(f"no lambda1 up to {start * 2.0 ** max_doublings:g} aggregates to one block")


@dataclass
class SelectionGrid:
    lambda1_values: np.ndarray
    lambda2_values: np.ndarray
    cv_scores: np.ndarray
    chosen: tuple[float, float]
    chosen_index: tuple[int, int]
    fits: list[list[TagLassoFit]] | None = field(default=None, repr=False)

    @property
    def ks(self) -> np.ndarray | None:
        if self.fits is None:
            return None
        return np.array([[f.k for f in row] for row in self.fits])


def _argmin_cell(scores, allowed=None):
    """Row-major first minimum; grids are descending so ties go to larger penalties."""
    sc = np.where(np.isfinite(scores), scores, np.inf)
    if allowed is not None:
        sc = np.where(allowed, sc, np.inf)
    best = sc.min()
    if not np.isfinite(best):
        raise SelectionError("no grid cell has a finite cross-validation score")
    i, j = np.argwhere(sc == best)[0]
    return int(i), int(j)


def make_folds(n: int, folds: int, seed) -> list[np.ndarray]:
    if folds < 2 or n < folds:
        raise FoldError(f"need n >= folds >= 2 (n={n}, folds={folds})")
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(perm, folds)
    small = [len(f) for f in parts if len(f) < 2]
    if small:
        raise FoldError(f"every fold needs at least 2 rows; got fold sizes {[len(f) for f in parts]}")
    return parts


def fold_covariances(data, folds):
    """Training covariances and held-out covariances centred by the training mean."""
    x = np.asarray(data, dtype=float)
    train, test = [], []
    for f in folds:
        mask = np.ones(len(x), dtype=bool)
        mask[f] = False
        tr = x[mask]
        train.append(sample_covariance(tr).matrix)
        xc = x[f] - tr.mean(axis=0)
        test.append(xc.T @ xc / len(f))
    return np.stack(train), np.stack(test)


def cross_validate(data, tree, grid, folds: int = 5, config: SolverConfig | None = None,
                   seed=0, refit: bool = True, full_fits: bool = False,
                   on_refit=None, jobs: int = 1) -> SelectionGrid:
    """K-fold cross-validated likelihood score over a ``lambda1 x lambda2`` grid.

    For each cell and fold the tag-lasso is fitted on the training rows,
    refitted under its own constraints (``refit=True``) and scored by
    ``-logdet(Omega) + tr(S_test Omega)`` on the held-out rows; scores are
    averaged over folds. ``full_fits=True`` also fits every cell on all the
    data (needed for block-count constrained selection). ``on_refit`` is
    called as ``on_refit(estimate, ancestor)`` for every distinct refit.
    ``jobs > 1`` spreads the penalised fits over that many processes.
    """
    config = config or SolverConfig()
    am = _as_ancestor(tree)
    x = np.asarray(data, dtype=float)
    lam1_values = np.atleast_1d(np.asarray(grid[0], dtype=float))
    lam2_values = np.atleast_1d(np.asarray(grid[1], dtype=float))
    n1, n2 = len(lam1_values), len(lam2_values)
    parts = make_folds(len(x), folds, seed)
    s_train, s_test = fold_covariances(x, parts)

    l1, l2, fidx = np.meshgrid(lam1_values, lam2_values, np.arange(folds), indexing="ij")
    fidx = fidx.ravel()
    factor = StructuredFactor.from_ancestor(am)
    fits = _fit_cells(s_train[fidx], am, l1.ravel(), l2.ravel(), config, factor, jobs)

    if refit:
        estimates = _dedup_refits(s_train, am, fits, fidx, config, on_refit)
    else:
        estimates = [f.omega for f in fits]
    scores = np.empty(len(fits))
    for b, om in enumerate(estimates):
        try:
            scores[b] = neg_log_likelihood(om, s_test[fidx[b]])
        except NotPositiveDefiniteError:
            scores[b] = np.inf
    cv = scores.reshape(n1, n2, folds).mean(axis=2)
    i, j = _argmin_cell(cv)
    sel = SelectionGrid(lam1_values, lam2_values, cv, (lam1_values[i], lam2_values[j]), (i, j))
    if full_fits:
        s_full = sample_covariance(x).matrix
        ff = la_admm_batch(s_full, am, l1[..., 0].ravel(), l2[..., 0].ravel(), config, factor=factor)
        sel.fits = [ff[r * n2:(r + 1) * n2] for r in range(n1)]
    return sel


def _fit_cells(s, am, lam1, lam2, config, factor, jobs):
    if jobs <= 1 or len(lam1) < 2:
        return la_admm_batch(s, am, lam1, lam2, config, factor=factor)
    chunks = np.array_split(np.arange(len(lam1)), min(jobs, len(lam1)))
    with ProcessPoolExecutor(len(chunks)) as pool:
        parts = pool.map(la_admm_batch, [s[c] for c in chunks], [am] * len(chunks),
                         [lam1[c] for c in chunks], [lam2[c] for c in chunks],
                         [config] * len(chunks))
        return [f for part in parts for f in part]


def _dedup_refits(s_train, am, fits, fidx, config, on_refit=None):
    """Refit each distinct (fold, constraint set) once."""
    keys, jobs, index = {}, [], []
    for f, k in zip(fits, fidx):
        cons = ConstraintSet.from_fit(f)
        key = (int(k), cons.key())
        if key not in keys:
            keys[key] = len(jobs)
            jobs.append((int(k), cons))
        index.append(keys[key])
    log.debug("refitting %d distinct constraint sets for %d cells", len(jobs), len(fits))
    res = refit_batch(s_train[[j[0] for j in jobs]], am, [j[1] for j in jobs], config)
    if on_refit is not None:
        for r in res:
            on_refit(r, am)
    return [res[i].omega for i in index]


def constrained_select(selection: SelectionGrid, fits=None, k_max: int = 10):
    """Best-scoring cell among those whose full-data fit has at most ``k_max`` blocks.

    ``fits`` defaults to ``selection.fits``; a plain ``K`` matrix is accepted too.
    """
    fits = selection.fits if fits is None else fits
    if fits is None:
        raise ValueError("per-cell full-data fits are required (cross_validate(full_fits=True))")
    ks = np.array([[f if isinstance(f, (int, np.integer)) else f.k for f in row] for row in fits])
    allowed = ks <= k_max
    if not allowed.any():
        raise SelectionError(f"no grid cell has K <= {k_max}; the smallest K reached is {ks.min()}")
    i, j = _argmin_cell(selection.cv_scores, allowed)
    return float(selection.lambda1_values[i]), float(selection.lambda2_values[j])
