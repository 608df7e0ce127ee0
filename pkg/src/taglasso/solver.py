"""Locally adaptive ADMM for the tree-aggregated graphical lasso.

The problem is split into three copies of the precision matrix (a
log-determinant copy, a structured copy ``A @ Gamma + D`` and a sparse
copy) and two copies of ``Gamma`` (a group-sparse copy and the
structured one), tied together by consensus variables.

Every routine here accepts a leading batch axis: ``s`` of shape
``(B, p, p)`` and per-problem penalties of shape ``(B,)`` solve ``B``
independent problems in lock-step, which is how cross-validation grids
are evaluated.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .model import SampleCovariance
from .tree import AggregationTree, AncestorMatrix, Partition, ancestor_matrix, partition_from_support

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """An ADMM iterate became non-finite."""

    def __init__(self, iteration, stage=None):
        self.iteration = iteration
        self.stage = stage
        where = f"stage {stage}, " if stage is not None else ""
        super().__init__(f"ADMM diverged ({where}iteration {iteration})")


@dataclass(frozen=True)
class Penalties:
    lambda1: float = 0.0
    lambda2: float = 0.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")


@dataclass(frozen=True)
class SolverConfig:
    """LA-ADMM schedule: ``t_stages`` stages of ``maxit`` iterations, rho multiplied
    by ``rho_factor`` between stages.

    ``dual_init`` controls the duals at the start of each stage: ``"carry"``
    (default) continues from the previous stage's duals, ``"zero"`` resets
    them, ``"warm"`` sets every dual to the warm-start iterate as the
    reference algorithm literally prescribes (this restarts each stage far
    from the previous solution and is kept only for comparison). ``tol``
    enables an optional early exit once every consensus residual falls
    below it.
    """

    rho1: float = 0.01
    t_stages: int = 10
    maxit: int = 100
    rho_factor: float = 2.0
    dual_init: str = "carry"
    tol: float | None = None

    def __post_init__(self):
        if not self.rho1 > 0:
            raise ValueError("rho1 must be positive")
        if self.t_stages < 1 or self.maxit < 1:
            raise ValueError("t_stages and maxit must be at least 1")
        if not self.rho_factor > 1:
            raise ValueError("rho_factor must exceed 1")
        if self.dual_init not in ("warm", "zero", "carry"):
            raise ValueError("dual_init must be 'warm', 'zero' or 'carry'")

    @property
    def rhos(self) -> list[float]:
        return [self.rho1 * self.rho_factor ** t for t in range(self.t_stages)]


def _t(x):
    return np.swapaxes(x, -1, -2)


def _col(v, ndim):
    """Reshape a per-problem scalar/array to broadcast against ``ndim``-d stacks."""
    v = np.asarray(v, dtype=float)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if v.ndim else v


# -- proximal maps -----------------------------------------------------------

def prox_logdet(target, s, rho):
    """Solve ``rho X - X^-1 = target - s`` for symmetric positive definite ``X``.

    ``target`` is the caller-composed ``rho * consensus - dual``. This is the
    proximal map of ``-logdet(X) + tr(s X)`` with step ``1/rho``.
    """
    x = np.asarray(target, dtype=float) - s
    x = (x + _t(x)) / 2
    delta, q = np.linalg.eigh(x)
    rho = _col(rho, delta.ndim)
    root = np.sqrt(delta * delta + 4 * rho)
    # two algebraically equal forms; pick the one without cancellation
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(delta >= 0, (delta + root) / (2 * rho), 2.0 / (root - delta))
    return (q * lam[..., None, :]) @ _t(q)


def prox_group_rows(target, rho, lambda1, root_row: int):
    """Row-wise group soft-thresholding at ``lambda1 / rho``; the root row is
    replaced by its mean repeated (it is unpenalised but constrained constant).

    Killed rows are exactly zero.
    """
    v = np.asarray(target, dtype=float)
    thr = _col(np.asarray(lambda1, dtype=float) / rho, v.ndim - 1)
    norms = np.linalg.norm(v, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > 0, 1.0 - thr / norms, 0.0)
    scale = scale[..., None]
    out = np.where(scale > 0, scale * v, 0.0)
    out[..., root_row, :] = v[..., root_row, :].mean(axis=-1, keepdims=True)
    return out


def prox_l1_offdiag(target, rho, lambda2):
    """Soft-threshold off-diagonal entries at ``lambda2 / rho``; the diagonal passes through."""
    v = np.asarray(target, dtype=float)
    thr = _col(np.asarray(lambda2, dtype=float) / rho, v.ndim)
    mag = np.abs(v) - thr
    out = np.where(mag > 0, np.sign(v) * mag, 0.0)
    idx = np.arange(v.shape[-1])
    out[..., idx, idx] = v[..., idx, idx]
    return out


def project_pattern(target, pattern):
    """Zero every entry outside the boolean ``pattern`` (diagonal always kept)."""
    v = np.asarray(target, dtype=float)
    keep = np.asarray(pattern, dtype=bool) | np.eye(v.shape[-1], dtype=bool)
    return np.where(keep, v, 0.0)


def project_rows(target, keep_rows, root_row: int):
    """Zero rows outside ``keep_rows``; root row replaced by its mean repeated."""
    v = np.asarray(target, dtype=float)
    out = np.where(np.asarray(keep_rows, dtype=bool)[..., None], v, 0.0)
    out[..., root_row, :] = v[..., root_row, :].mean(axis=-1, keepdims=True)
    return out


# -- structured copy -----------------------------------------------------------

class StructuredFactor:
    """Quantities for projecting onto ``{(Omega, Gamma, D): Omega = A Gamma + D, D >= 0}``.

    Depends only on ``A`` (shape ``(p, T)`` or a stack ``(B, p, T)``), never on
    rho or the iterates, so it is built once per fit and shared. With
    ``A~ = [A; I]`` and ``G = (A.T A + I)^-1``, the matrix
    ``C = [I; 0] - A~ G A.T`` is the projection residual of the diagonal
    directions; its squared column norms drive the ``D`` update.
    """

    def __init__(self, a, root_column: int):
        a = np.asarray(a, dtype=float)
        self.a = a
        self.root_column = root_column
        p, t = a.shape[-2:]
        self.p, self.n_nodes = p, t
        at = _t(a)
        self.g = np.linalg.inv(at @ a + np.eye(t))
        gat = self.g @ at
        self.c_top = np.eye(p) - a @ gat
        self.c_bottom = -gat
        self.ctc = (self.c_top ** 2).sum(axis=-2) + (self.c_bottom ** 2).sum(axis=-2)
        self.degenerate = self.ctc <= 1e-14

    @classmethod
    def from_ancestor(cls, am: AncestorMatrix, z=None):
        """Factor for ``A`` or, given a node mask ``z`` (``(T,)`` or ``(B, T)``),
        for ``A`` with columns outside ``z`` zeroed (the restricted problem)."""
        if z is None:
            return cls(am.a, am.root_column)
        z = np.asarray(z, dtype=bool)
        return cls(am.a * z[..., None, :], am.root_column)

    def update(self, target_omega, target_gamma):
        """Exact projection of the stacked targets; returns ``(omega2, gamma2, d)``.

        ``d`` solves the columnwise nonnegative least squares in closed form,
        then ``gamma2 = G (A.T (T_omega - D) + T_gamma)`` and
        ``omega2 = A gamma2 + D``.
        """
        btc = (self.c_top * target_omega).sum(axis=-2) + (self.c_bottom * target_gamma).sum(axis=-2)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(self.degenerate, 0.0, np.maximum(btc / self.ctc, 0.0))
        idx = np.arange(self.p)
        resid = np.array(target_omega, dtype=float, copy=True)
        resid[..., idx, idx] -= d
        gamma2 = self.g @ (_t(self.a) @ resid + target_gamma)
        omega2 = self.a @ gamma2
        omega2[..., idx, idx] += d
        return omega2, gamma2, d


def structured_update(factor: StructuredFactor, target_omega, target_gamma):
    return factor.update(target_omega, target_gamma)


# -- ADMM ------------------------------------------------------------------------

@dataclass
class AdmmState:
    """Iterates of one ADMM stage (all arrays may carry a leading batch axis)."""

    omega_copies: tuple
    gamma_copies: tuple
    d: np.ndarray
    omega: np.ndarray
    gamma: np.ndarray
    duals: tuple
    iterations: int = 0
    trace: list = field(default_factory=list)

    def residuals(self) -> np.ndarray:
        """Largest Frobenius distance of any copy from its consensus, per problem."""
        r = [np.linalg.norm(c - self.omega, axis=(-2, -1)) for c in self.omega_copies]
        r += [np.linalg.norm(c - self.gamma, axis=(-2, -1)) for c in self.gamma_copies]
        return np.max(np.stack(r), axis=0)


OmegaProx = Callable[[np.ndarray, float], np.ndarray]
GammaProx = Callable[[np.ndarray, float], np.ndarray]


def _penalty_proxes(penalties, root_row):
    lam1, lam2 = penalties

    def omega_prox(target, rho):
        return prox_l1_offdiag(target, rho, lam2)

    def gamma_prox(target, rho):
        return prox_group_rows(target, rho, lam1, root_row)

    return omega_prox, gamma_prox


def run_stage(s, factor: StructuredFactor, omega_prox: OmegaProx, gamma_prox: GammaProx,
              rho: float, maxit: int, warm, dual_init="carry",
              tol: float | None = None, record: bool = False) -> AdmmState:
    """One ADMM stage of ``maxit`` sweeps from the warm start ``(omega0, gamma0)``.

    Each sweep updates the log-determinant, sparse, group and structured
    copies, forms the consensus ``mean(copies) + mean(duals) / rho`` and
    takes a dual ascent step. ``dual_init`` is ``"warm"``, ``"zero"`` or a
    tuple of five duals to continue from.

    The dual steps sum to zero whatever the starting duals, so after the
    first sweep the last dual of each group is stored as minus the sum of
    the others: the averaged duals are then exactly zero and the consensus
    is a plain average.
    """
    omega0, gamma0 = (np.asarray(w, dtype=float) for w in warm)
    maxit = max(int(maxit), 1)
    omega_hat, gamma_hat = omega0.copy(), gamma0.copy()
    if isinstance(dual_init, (tuple, list)):
        u = [np.array(x, dtype=float, copy=True) for x in dual_init]
    elif dual_init == "warm":
        u = [omega0.copy() for _ in range(3)] + [gamma0.copy() for _ in range(2)]
    elif dual_init in ("zero", "carry"):
        u = [np.zeros_like(omega0) for _ in range(3)] + [np.zeros_like(gamma0) for _ in range(2)]
    else:
        raise ValueError(f"unknown dual_init {dual_init!r}")
    inv = 1.0 / rho
    mean_zero = not any(np.any(x) for x in u)
    trace = []
    for k in range(1, maxit + 1):
        o1 = prox_logdet(rho * omega_hat - u[0], s, rho)
        o3 = omega_prox(omega_hat - inv * u[2], rho)
        g1 = gamma_prox(gamma_hat - inv * u[3], rho)
        o2, g2, d = factor.update(omega_hat - inv * u[1], gamma_hat - inv * u[4])

        omega_hat = o1 + o2
        omega_hat += o3
        omega_hat /= 3
        gamma_hat = g1 + g2
        gamma_hat /= 2
        if not mean_zero:
            omega_hat += (u[0] + u[1] + u[2]) * (inv / 3)
            gamma_hat += (u[3] + u[4]) * (inv / 2)
        # a non-finite entry anywhere makes the sum non-finite
        if not (np.isfinite(omega_hat.sum()) and np.isfinite(gamma_hat.sum())):
            raise DivergenceError(k)

        u[0] += rho * (o1 - omega_hat)
        u[1] += rho * (o2 - omega_hat)
        u[2] = -(u[0] + u[1])
        u[3] += rho * (g1 - gamma_hat)
        u[4] = -u[3]
        mean_zero = True

        if record or tol is not None:
            state = AdmmState((o1, o2, o3), (g1, g2), d, omega_hat, gamma_hat, tuple(u), k)
            res = state.residuals()
            if record:
                mean_o = np.abs((u[0] + u[1] + u[2]) / 3).max()
                mean_g = np.abs((u[3] + u[4]) / 2).max()
                scale = max(np.abs(u[0]).max(), np.abs(u[1]).max(), np.abs(u[2]).max(),
                            np.abs(u[3]).max(), np.abs(u[4]).max(), 1.0)
                trace.append({"iteration": k, "mean_dual_omega": float(mean_o),
                              "mean_dual_gamma": float(mean_g), "dual_scale": float(scale),
                              "residual": float(np.max(res))})
            if tol is not None and np.all(res <= tol):
                break
    state = AdmmState((o1, o2, o3), (g1, g2), d, omega_hat, gamma_hat, tuple(u), k)
    state.trace = trace
    return state


def admm_stage(s, factor: StructuredFactor, penalties, rho: float, maxit: int, warm,
               dual_init="carry", record: bool = False) -> AdmmState:
    """Penalised ADMM stage; ``penalties`` is a :class:`Penalties` or a pair of
    per-problem arrays ``(lambda1, lambda2)``."""
    if isinstance(penalties, Penalties):
        penalties = (penalties.lambda1, penalties.lambda2)
    s = s.matrix if isinstance(s, SampleCovariance) else np.asarray(s, dtype=float)
    op, gp = _penalty_proxes(penalties, factor.root_column)
    return run_stage(s, factor, op, gp, rho, maxit, warm, dual_init, record=record)


def run_la_admm(s, factor: StructuredFactor, omega_prox, gamma_prox, config: SolverConfig,
                warm=None, record: bool = False):
    """Staged ADMM with rho growing geometrically, each stage warm-started
    from the previous consensus. Returns the final stage's state."""
    batch = s.shape[:-2]
    p, t = factor.p, factor.n_nodes
    if warm is None:
        warm = (np.zeros(batch + (p, p)), np.zeros(batch + (t, p)))
    traces = []
    state = None
    for stage, rho in enumerate(config.rhos, start=1):
        dual = config.dual_init
        if dual == "carry":
            dual = state.duals if state is not None else "zero"
        try:
            state = run_stage(s, factor, omega_prox, gamma_prox, rho, config.maxit, warm,
                              dual, config.tol, record)
        except DivergenceError as exc:
            raise DivergenceError(exc.iteration, stage) from None
        if record:
            traces.append({"stage": stage, "rho": rho, "trace": state.trace})
        warm = (state.omega, state.gamma)
        log.debug("stage %d rho=%.4g residual=%.3g", stage, rho, float(np.max(state.residuals())))
    state.trace = traces
    return state


@dataclass
class TagLassoFit:
    """Solution of one tag-lasso problem.

    ``omega`` is the (symmetrised) consensus, ``gamma`` the group-sparse copy
    with exact zero rows, ``support`` the nonzero pattern of the sparse copy.
    """

    omega: np.ndarray
    gamma: np.ndarray
    d: np.ndarray
    support: np.ndarray
    z: np.ndarray
    partition: Partition
    residual: float
    penalties: Penalties
    config: SolverConfig
    ancestor: AncestorMatrix = field(repr=False)
    omega_logdet: np.ndarray = field(repr=False, default=None)

    @property
    def k(self) -> int:
        return self.partition.k

    @property
    def n_edges(self) -> int:
        return int(np.triu(self.support, 1).sum())

    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.support, 1))
        return list(zip(i.tolist(), j.tolist()))


def _support(o3):
    nz = o3 != 0
    nz = nz | _t(nz)
    idx = np.arange(o3.shape[-1])
    nz[..., idx, idx] = True
    return nz


def _as_ancestor(tree) -> AncestorMatrix:
    if isinstance(tree, AncestorMatrix):
        return tree
    if isinstance(tree, AggregationTree):
        return ancestor_matrix(tree)
    raise TypeError(f"expected an AggregationTree or AncestorMatrix, got {type(tree).__name__}")


def fits_from_state(state: AdmmState, am: AncestorMatrix, lam1, lam2, config) -> list[TagLassoFit]:
    """Unpack a (possibly batched) final state into per-problem fits."""
    omega = state.omega
    batched = omega.ndim == 3
    res = np.atleast_1d(state.residuals())
    lam1 = np.broadcast_to(np.asarray(lam1, dtype=float), res.shape)
    lam2 = np.broadcast_to(np.asarray(lam2, dtype=float), res.shape)
    support = _support(state.omega_copies[2])
    g1 = state.gamma_copies[0]
    fits = []
    for b in range(len(res)):
        pick = (lambda x: x[b]) if batched else (lambda x: x)
        om = pick(omega)
        z = np.linalg.norm(pick(g1), axis=-1) > 0
        z[am.root_column] = True
        fits.append(TagLassoFit(
            omega=(om + om.T) / 2, gamma=pick(g1).copy(), d=pick(state.d).copy(),
            support=pick(support).copy(), z=z, partition=partition_from_support(am, z),
            residual=float(res[b]), penalties=Penalties(float(lam1[b]), float(lam2[b])),
            config=config, ancestor=am, omega_logdet=pick(state.omega_copies[0]).copy()))
    return fits


def la_admm_batch(s, tree, lambda1, lambda2, config: SolverConfig | None = None,
                  factor: StructuredFactor | None = None) -> list[TagLassoFit]:
    """Solve many tag-lasso problems sharing one tree in lock-step.

    ``s`` is ``(p, p)`` or ``(B, p, p)``; ``lambda1``/``lambda2`` broadcast to
    ``(B,)``.
    """
    config = config or SolverConfig()
    am = _as_ancestor(tree)
    s = np.asarray(s.matrix if isinstance(s, SampleCovariance) else s, dtype=float)
    lam1 = np.atleast_1d(np.asarray(lambda1, dtype=float))
    lam2 = np.atleast_1d(np.asarray(lambda2, dtype=float))
    nb = max(len(lam1), len(lam2), s.shape[0] if s.ndim == 3 else 1)
    lam1, lam2 = np.broadcast_to(lam1, (nb,)), np.broadcast_to(lam2, (nb,))
    if np.any(lam1 < 0) or np.any(lam2 < 0):
        raise ValueError("penalties must be nonnegative")
    s = np.broadcast_to(s, (nb,) + s.shape[-2:])
    if s.shape[-1] != am.p:
        raise ValueError(f"tree has {am.p} leaves but the covariance is {s.shape[-1]}-dimensional")
    factor = factor or StructuredFactor.from_ancestor(am)
    op, gp = _penalty_proxes((lam1, lam2), am.root_column)
    state = run_la_admm(s, factor, op, gp, config)
    return fits_from_state(state, am, lam1, lam2, config)


def la_admm(s, tree, penalties: Penalties, config: SolverConfig | None = None,
            factor: StructuredFactor | None = None, record: bool = False) -> TagLassoFit:
    """Fit the tag-lasso at one ``(lambda1, lambda2)``.

    With ``record=True`` the per-iteration trace (mean duals, residuals) is
    attached as ``fit.trace``.
    """
    config = config or SolverConfig()
    am = _as_ancestor(tree)
    s = np.asarray(s.matrix if isinstance(s, SampleCovariance) else s, dtype=float)
    if s.shape != (am.p, am.p):
        raise ValueError(f"tree has {am.p} leaves but the covariance is {s.shape[0]}-dimensional")
    factor = factor or StructuredFactor.from_ancestor(am)
    op, gp = _penalty_proxes((penalties.lambda1, penalties.lambda2), am.root_column)
    state = run_la_admm(s, factor, op, gp, config, record=record)
    fit = fits_from_state(state, am, penalties.lambda1, penalties.lambda2, config)[0]
    if record:
        fit.trace = state.trace
    return fit


def fit_glasso(s, lambda2: float, config: SolverConfig | None = None) -> TagLassoFit:
    """Graphical lasso through the same solver: star tree and ``lambda1 = 0``."""
    s = s.matrix if isinstance(s, SampleCovariance) else np.asarray(s, dtype=float)
    p = s.shape[0]
    if p < 2:
        raise ValueError("need p >= 2")
    fit = la_admm(s, AggregationTree.star(p), Penalties(0.0, lambda2), config)
    return replace(fit, partition=Partition.singletons(p))
