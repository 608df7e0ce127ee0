import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taglasso.solver import (DivergenceError, Penalties, SolverConfig, StructuredFactor,
                             admm_stage, fit_glasso, la_admm, la_admm_batch, prox_group_rows,
                             prox_l1_offdiag, prox_logdet, structured_update)
from taglasso.tree import AggregationTree, Partition, ancestor_matrix

from oracles import (group_row_oracle, random_tree_parents, scalar_soft_threshold_oracle,
                     structured_qp_oracle)


def random_sym(rng, p, scale=1.0):
    b = rng.standard_normal((p, p)) * scale
    return (b + b.T) / 2


def random_cov(rng, p, n=None):
    n = n or 5 * p
    x = rng.standard_normal((n, p))
    x -= x.mean(axis=0)
    return x.T @ x / n


def small_tree():
    parents = {"root": None, "a": "root", "b": "root", "x1": "a", "x2": "a", "x3": "b",
               "x4": "b", "x5": "root"}
    return AggregationTree.from_parents(parents, leaf_order=["x1", "x2", "x3", "x4", "x5"])


class TestProxLogdet:
    def test_zero_input_gives_identity(self):
        np.testing.assert_allclose(prox_logdet(np.zeros((3, 3)), np.zeros((3, 3)), 1.0), np.eye(3),
                                   atol=1e-15)

    def test_scalar(self):
        out = prox_logdet(np.array([[3.0]]), np.zeros((1, 1)), 1.0)
        assert out[0, 0] == pytest.approx((3 + np.sqrt(13)) / 2)
        assert out[0, 0] == pytest.approx(3.30278, abs=1e-5)

    def test_foc_6x6(self):
        rng = np.random.default_rng(0)
        y = random_sym(rng, 6)
        x = prox_logdet(y, np.zeros((6, 6)), 0.5)
        assert np.linalg.norm(0.5 * x - np.linalg.inv(x) - y) <= 1e-8

    @pytest.mark.parametrize("p", [2, 10, 30, 50])
    def test_foc_with_covariance(self, p):
        rng = np.random.default_rng(p)
        target, s, rho = random_sym(rng, p, 3.0), random_cov(rng, p), 0.7
        x = prox_logdet(target, s, rho)
        assert np.linalg.norm(rho * x - np.linalg.inv(x) - (target - s)) <= 1e-8
        np.testing.assert_allclose(x, x.T, atol=1e-12 * np.abs(x).max())
        assert np.linalg.eigvalsh(x)[0] > 0

    def test_large_negative_eigenvalues_stay_accurate(self):
        y = np.diag([-1e6, -1.0, 0.0, 1e6])
        x = prox_logdet(y, np.zeros((4, 4)), 0.01)
        lam = np.diag(x)
        np.testing.assert_allclose(0.01 * lam - 1 / lam, np.diag(y), rtol=1e-12, atol=1e-9)

    def test_is_proximal_map(self):
        rng = np.random.default_rng(4)
        p, rho = 4, 0.8
        s, target = random_cov(rng, p), random_sym(rng, p)
        x = prox_logdet(target, s, rho)

        def obj(m):
            sign, ld = np.linalg.slogdet(m)
            return -ld + np.sum(s * m) + rho / 2 * np.sum((m - target / rho) ** 2)

        base = obj(x)
        for _ in range(200):
            e = random_sym(rng, p, 1e-3)
            cand = x + e
            if np.linalg.eigvalsh(cand)[0] > 0:
                assert obj(cand) >= base - 1e-9

    def test_batched_matches_single(self):
        rng = np.random.default_rng(9)
        ys = np.stack([random_sym(rng, 5) for _ in range(4)])
        s = random_cov(rng, 5)
        rho = np.array([0.1, 0.5, 1.0, 2.0])
        out = prox_logdet(ys, s, rho)
        for b in range(4):
            np.testing.assert_allclose(out[b], prox_logdet(ys[b], s, rho[b]), atol=1e-12)


class TestProxGroupRows:
    def test_shrink(self):
        out = prox_group_rows(np.array([[1.0, 1.0], [0.6, 0.8]]), 1.0, 0.5, root_row=0)
        np.testing.assert_allclose(out[1], [0.3, 0.4])

    def test_kill_is_exact_zero(self):
        out = prox_group_rows(np.array([[1.0, 2.0], [0.24, 0.32]]), 1.0, 1.0, root_row=0)
        assert np.all(out[1] == 0.0)
        assert not np.signbit(out[1]).any()

    def test_root_mean(self):
        out = prox_group_rows(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]), 1.0, 10.0, root_row=0)
        np.testing.assert_array_equal(out[0], [2.0, 2.0, 2.0])

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        v = rng.standard_normal((3, 4)) * rng.uniform(0.1, 3)
        rho, lam = rng.uniform(0.2, 2), rng.uniform(0, 2)
        out = prox_group_rows(v, rho, lam, root_row=2)
        for k in range(2):
            np.testing.assert_allclose(out[k], group_row_oracle(v[k], lam / rho), atol=1e-6)

    def test_perturbation_optimality(self):
        rng = np.random.default_rng(1)
        v, rho, lam = rng.standard_normal(5), 0.7, 0.9
        x = prox_group_rows(np.vstack([np.zeros(5), v]), rho, lam, 0)[1]

        def obj(y):
            return rho / 2 * np.sum((y - v) ** 2) + lam * np.linalg.norm(y)

        for _ in range(500):
            assert obj(x + rng.standard_normal(5) * 1e-3) >= obj(x) - 1e-9


class TestProxL1:
    def test_examples(self):
        t = np.array([[3.0, 2.0, -0.3], [2.0, 3.0, 0.0], [-0.3, 0.0, 3.0]])
        out = prox_l1_offdiag(t, 1.0, 0.5)
        assert out[0, 1] == 1.5
        assert out[0, 2] == 0.0
        np.testing.assert_array_equal(np.diag(out), [3.0, 3.0, 3.0])

    @pytest.mark.parametrize("v", [-2.3, -0.4, 0.0, 0.1, 0.6, 5.0])
    def test_matches_brute_force(self, v):
        thr = 0.5
        out = prox_l1_offdiag(np.array([[0.0, v], [v, 0.0]]), 2.0, 2 * thr)
        assert out[0, 1] == pytest.approx(scalar_soft_threshold_oracle(v, thr), abs=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.01, 3.0))
    def test_symmetric_pattern(self, seed, lam):
        m = random_sym(np.random.default_rng(seed), 6)
        out = prox_l1_offdiag(m, 1.0, lam)
        np.testing.assert_array_equal(out != 0, (out != 0).T)
        np.testing.assert_array_equal(out, out.T)


class TestStructuredUpdate:
    @pytest.mark.parametrize("seed", range(4))
    def test_star_tree_matches_qp(self, seed):
        rng = np.random.default_rng(seed)
        am = ancestor_matrix(AggregationTree.star(3))
        to, tg = random_sym(rng, 3), rng.standard_normal((am.n_nodes, 3))
        omega2, gamma2, d = structured_update(StructuredFactor.from_ancestor(am), to, tg)
        o_ref, g_ref, d_ref, _ = structured_qp_oracle(am.a, to, tg)
        np.testing.assert_allclose(gamma2, g_ref, atol=1e-8)
        np.testing.assert_allclose(d, d_ref, atol=1e-8)
        np.testing.assert_allclose(omega2, o_ref, atol=1e-8)

    @pytest.mark.parametrize("seed", range(4))
    def test_random_trees_match_qp(self, seed):
        rng = np.random.default_rng(100 + seed)
        parents, leaves = random_tree_parents(rng, 5, 3)
        am = ancestor_matrix(AggregationTree.from_parents(parents, leaf_order=leaves))
        to = rng.standard_normal((5, 5)) * 2
        tg = rng.standard_normal((am.n_nodes, 5))
        omega2, gamma2, d = StructuredFactor.from_ancestor(am).update(to, tg)
        o_ref, g_ref, d_ref, _ = structured_qp_oracle(am.a, to, tg)
        np.testing.assert_allclose(gamma2, g_ref, atol=1e-8)
        np.testing.assert_allclose(d, d_ref, atol=1e-8)

    def test_exact_representation(self):
        rng = np.random.default_rng(2)
        am = ancestor_matrix(small_tree())
        omega2, gamma2, d = StructuredFactor.from_ancestor(am).update(
            random_sym(rng, 5), rng.standard_normal((am.n_nodes, 5)))
        np.testing.assert_array_equal(omega2, am.a @ gamma2 + np.diag(d))
        assert np.all(d >= 0)

    def test_feasible_point_is_fixed(self):
        rng = np.random.default_rng(3)
        am = ancestor_matrix(small_tree())
        g = rng.standard_normal((am.n_nodes, 5))
        d = rng.uniform(0.1, 1.0, 5)
        to = am.a @ g + np.diag(d)
        omega2, gamma2, d2 = StructuredFactor.from_ancestor(am).update(to, g)
        np.testing.assert_allclose(gamma2, g, atol=1e-12)
        np.testing.assert_allclose(d2, d, atol=1e-12)
        np.testing.assert_allclose(omega2, to, atol=1e-12)

    def test_no_degenerate_columns(self):
        fac = StructuredFactor.from_ancestor(ancestor_matrix(small_tree()))
        assert not fac.degenerate.any()


class TestAdmmStage:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.s = random_cov(rng, 5)
        self.am = ancestor_matrix(small_tree())
        self.factor = StructuredFactor.from_ancestor(self.am)
        self.warm = (np.eye(5), np.zeros((self.am.n_nodes, 5)))

    @pytest.mark.parametrize("dual_init", ["warm", "zero"])
    def test_mean_duals_vanish_after_first_iteration(self, dual_init):
        st_ = admm_stage(self.s, self.factor, Penalties(0.1, 0.05), 0.5, 20, self.warm,
                         dual_init=dual_init, record=True)
        later = st_.trace[1:]
        assert all(it["mean_dual_omega"] == 0.0 and it["mean_dual_gamma"] == 0.0 for it in later)
        # the first dual step already cancels any nonzero starting mean
        assert st_.trace[0]["mean_dual_omega"] == 0.0

    def test_zero_iterations_is_one_sweep(self):
        a = admm_stage(self.s, self.factor, Penalties(0.1, 0.05), 0.5, 0, self.warm)
        b = admm_stage(self.s, self.factor, Penalties(0.1, 0.05), 0.5, 1, self.warm)
        assert a.iterations == b.iterations == 1
        np.testing.assert_array_equal(a.omega, b.omega)
        np.testing.assert_array_equal(a.gamma, b.gamma)

    def test_copy_invariants(self):
        st_ = admm_stage(self.s, self.factor, Penalties(0.2, 0.05), 0.5, 30, self.warm)
        o1, o2, _ = st_.omega_copies
        np.testing.assert_allclose(o1, o1.T, atol=1e-12)
        assert np.linalg.eigvalsh(o1)[0] > 0
        g1 = st_.gamma_copies[0]
        root = g1[self.am.root_column]
        assert np.all(root == root[0])
        np.testing.assert_array_equal(o2, self.am.a @ st_.gamma_copies[1] + np.diag(st_.d))
        assert np.all(st_.d >= 0)

    def test_unpenalised_converges_to_inverse(self):
        st_ = admm_stage(self.s, self.factor, Penalties(0, 0), 1.0, 3000, (np.zeros((5, 5)),
                         np.zeros((self.am.n_nodes, 5))))
        np.testing.assert_allclose(st_.omega, np.linalg.inv(self.s), atol=1e-4)


class TestLaAdmm:
    def test_unpenalised_is_inverse(self):
        s = random_cov(np.random.default_rng(1), 4)
        fit = la_admm(s, AggregationTree.star(4), Penalties(0, 0))
        np.testing.assert_allclose(fit.omega, np.linalg.inv(s), atol=1e-4)
        assert fit.residual < 1e-6

    def test_huge_lambda1_aggregates_everything(self):
        s = random_cov(np.random.default_rng(2), 5)
        fit = la_admm(s, small_tree(), Penalties(1e3 * np.linalg.norm(s), 0.01))
        assert fit.k == 1
        off = fit.omega[~np.eye(5, dtype=bool)]
        np.testing.assert_allclose(off, off[0], atol=1e-6)
        assert not fit.z[np.arange(fit.ancestor.n_nodes) != fit.ancestor.root_column].any()

    def test_huge_lambda2_gives_diagonal_support(self):
        s = random_cov(np.random.default_rng(3), 5)
        fit = la_admm(s, small_tree(), Penalties(0.01, 1e3))
        np.testing.assert_array_equal(fit.support, np.eye(5, dtype=bool))
        assert fit.n_edges == 0 and fit.edges() == []

    def test_support_symmetric_with_diagonal(self):
        s = random_cov(np.random.default_rng(4), 5)
        fit = la_admm(s, small_tree(), Penalties(0.05, 0.05))
        np.testing.assert_array_equal(fit.support, fit.support.T)
        assert np.diag(fit.support).all()

    def test_lambda1_zero_matches_glasso(self):
        s = random_cov(np.random.default_rng(5), 5)
        a = la_admm(s, small_tree(), Penalties(0, 0.1))
        b = fit_glasso(s, 0.1)
        assert np.linalg.norm(a.omega - b.omega) <= 1e-4

    def test_batch_matches_single(self):
        s = random_cov(np.random.default_rng(6), 5)
        fits = la_admm_batch(s, small_tree(), [0.05, 0.2], [0.1, 0.02])
        single = la_admm(s, small_tree(), Penalties(0.2, 0.02))
        np.testing.assert_allclose(fits[1].omega, single.omega, atol=1e-12)

    def test_divergence_reports_iteration(self):
        s = np.eye(3)
        s[0, 1] = s[1, 0] = np.nan
        with pytest.raises(DivergenceError) as err:
            la_admm(s, AggregationTree.star(3), Penalties(0, 0))
        assert err.value.iteration == 1 and err.value.stage == 1

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="leaves"):
            la_admm(np.eye(4), small_tree(), Penalties(0, 0))

    def test_record_trace(self):
        s = random_cov(np.random.default_rng(7), 5)
        fit = la_admm(s, small_tree(), Penalties(0.1, 0.1), SolverConfig(t_stages=3, maxit=5),
                      record=True)
        assert [st_["stage"] for st_ in fit.trace] == [1, 2, 3]
        assert [st_["rho"] for st_ in fit.trace] == [0.01, 0.02, 0.04]
        assert all(len(st_["trace"]) == 5 for st_ in fit.trace)


class TestFitGlasso:
    def test_unpenalised(self):
        s = random_cov(np.random.default_rng(8), 4)
        np.testing.assert_allclose(fit_glasso(s, 0.0).omega, np.linalg.inv(s), atol=1e-4)

    def test_large_lambda_is_diagonal(self):
        s = random_cov(np.random.default_rng(9), 6)
        lam = np.abs(s - np.diag(np.diag(s))).max()
        fit = fit_glasso(s, lam * 1.0001)
        np.testing.assert_array_equal(fit.support, np.eye(6, dtype=bool))
        # subgradient check at the diagonal solution
        omega = np.diag(1 / np.diag(s))
        grad = s - np.linalg.inv(omega)
        assert np.all(np.abs(grad[~np.eye(6, dtype=bool)]) <= lam * 1.0001)
        np.testing.assert_allclose(fit.omega, omega, atol=1e-4)

    def test_singletons(self):
        s = random_cov(np.random.default_rng(10), 4)
        assert fit_glasso(s, 0.05).partition == Partition.singletons(4)

    def test_needs_two_variables(self):
        with pytest.raises(ValueError):
            fit_glasso(np.eye(1), 0.1)


class TestConfig:
    def test_defaults(self):
        c = SolverConfig()
        assert (c.rho1, c.t_stages, c.maxit, c.rho_factor) == (0.01, 10, 100, 2.0)
        assert c.rhos[-1] == pytest.approx(0.01 * 2**9)

    @pytest.mark.parametrize("kw", [{"rho1": 0}, {"t_stages": 0}, {"maxit": 0},
                                    {"rho_factor": 1.0}, {"dual_init": "x"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SolverConfig(**kw)

    def test_penalties_validated(self):
        with pytest.raises(ValueError):
            Penalties(-1, 0)
        with pytest.raises(ValueError):
            Penalties(0, np.inf)
