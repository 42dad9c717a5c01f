"""LMI wrapper and block factorization: frozen pivots, eigen-oracle, solver checks."""

import numpy as np
import pytest

from meshnet.lmi import (
    BlockSymMatrix,
    Infeasible,
    LmiProblem,
    PriorNotPD,
    SolveReport,
    ToleranceConfig,
    default_backend,
    is_pd_compositional,
    solver_options,
    spectral_bound_constraint,
    sylvester_factorize,
    sylvester_step,
)

RNG = np.random.default_rng(31415)


def random_block_sym(sizes, eig_low=-1.0, eig_high=2.0, rng=RNG):
    n = int(np.sum(sizes))
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    lam = rng.uniform(eig_low, eig_high, size=n)
    dense = (q * lam) @ q.T
    dense = 0.5 * (dense + dense.T)
    mat = BlockSymMatrix(sizes)
    offs = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    for i in range(len(sizes)):
        for j in range(i + 1):
            mat.set(i, j, dense[offs[i] : offs[i + 1], offs[j] : offs[j + 1]])
    return mat, dense


class TestBlockSymMatrix:
    def test_set_mirrors_transpose(self):
        m = BlockSymMatrix([2, 3])
        blk = RNG.normal(size=(3, 2))
        m.set(1, 0, blk)
        np.testing.assert_array_equal(m.block(0, 1), blk.T)

    def test_unset_blocks_are_zero(self):
        m = BlockSymMatrix([2, 2])
        np.testing.assert_array_equal(m.block(0, 1), np.zeros((2, 2)))

    def test_dense_layout(self):
        m = BlockSymMatrix([1, 2])
        m.set(0, 0, np.array([[5.0]]))
        m.set(1, 1, np.eye(2))
        m.set(1, 0, np.array([[1.0], [2.0]]))
        expected = np.array(
            [
                [5.0, 1.0, 2.0],
                [1.0, 1.0, 0.0],
                [2.0, 0.0, 1.0],
            ]
        )
        np.testing.assert_array_equal(m.dense(), expected)

    def test_shape_mismatch_raises(self):
        m = BlockSymMatrix([2, 3])
        with pytest.raises(ValueError):
            m.set(0, 1, np.zeros((3, 2)))

    def test_asymmetric_diagonal_raises(self):
        m = BlockSymMatrix([2])
        with pytest.raises(ValueError):
            m.set(0, 0, np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_bad_sizes_raise(self):
        with pytest.raises(ValueError):
            BlockSymMatrix([2, 0])


class TestSylvesterChain:
    def test_frozen_scalar_pivots(self):
        m = BlockSymMatrix([1, 1])
        m.set(0, 0, [[2.0]])
        m.set(1, 1, [[2.0]])
        m.set(1, 0, [[1.0]])
        factors = sylvester_factorize(m)
        np.testing.assert_allclose(factors.diag[0], [[2.0]])
        np.testing.assert_allclose(factors.diag[1], [[1.5]])
        assert factors.is_pd

    def test_frozen_indefinite(self):
        m = BlockSymMatrix([1, 1])
        m.set(0, 0, [[1.0]])
        m.set(1, 1, [[1.0]])
        m.set(1, 0, [[2.0]])
        factors = sylvester_factorize(m)
        assert not factors.is_pd
        # Second pivot is 1 - 4 = -3.
        np.testing.assert_allclose(factors.diag[1], [[-3.0]])

    def test_agrees_with_eigen_oracle(self):
        agree = checked = 0
        for _ in range(200):
            k = RNG.integers(1, 5)
            sizes = RNG.integers(1, 5, size=k).tolist()
            mat, dense = random_block_sym(sizes)
            lam_min = np.linalg.eigvalsh(dense).min()
            if abs(lam_min) < 1e-9:
                continue
            checked += 1
            agree += is_pd_compositional(mat) == (lam_min > 0)
        assert checked > 150
        assert agree == checked

    def test_chain_extension_reuses_factors(self):
        mat, _ = random_block_sym([2, 3, 2], eig_low=0.1, eig_high=2.0)
        stepwise = None
        for i in range(3):
            stepwise = sylvester_step(stepwise, mat.row(i))
        full = sylvester_factorize(mat)
        assert stepwise.is_pd and full.is_pd
        for a, b in zip(stepwise.diag, full.diag):
            np.testing.assert_array_equal(a, b)
        # Extending an existing chain keeps earlier pivots bit-identical.
        two_rows = sylvester_step(sylvester_step(None, mat.row(0)), mat.row(1))
        three_rows = sylvester_step(two_rows, mat.row(2))
        assert three_rows.diag[0] is two_rows.diag[0]
        assert three_rows.diag[1] is two_rows.diag[1]

    def test_dense_prior_roundtrip(self):
        mat, dense = random_block_sym([3, 1, 4], eig_low=0.2, eig_high=3.0)
        factors = sylvester_factorize(mat)
        np.testing.assert_allclose(factors.dense_prior(), dense, atol=1e-10)

    def test_cannot_extend_past_failed_pivot(self):
        m = BlockSymMatrix([1, 1])
        m.set(0, 0, [[-1.0]])
        m.set(1, 1, [[1.0]])
        factors = sylvester_step(None, m.row(0))
        assert not factors.is_pd
        with pytest.raises(PriorNotPD):
            sylvester_step(factors, m.row(1))

    def test_row_validation(self):
        factors = sylvester_step(None, [np.eye(2)])
        with pytest.raises(ValueError):
            sylvester_step(factors, [np.eye(2)])  # missing the coupling block
        with pytest.raises(ValueError):
            sylvester_step(None, [np.array([[1.0, 2.0], [0.0, 1.0]])])

    def test_pd_tol_boundary(self):
        m = BlockSymMatrix([1])
        m.set(0, 0, [[1e-12]])
        assert not is_pd_compositional(m, pd_tol=1e-10)
        assert is_pd_compositional(m, pd_tol=0.0)

    def test_pd_tol_cannot_change_midway(self):
        factors = sylvester_step(None, [np.eye(2)], pd_tol=1e-10)
        with pytest.raises(ValueError):
            sylvester_step(factors, [np.zeros((1, 2)), np.eye(1)], pd_tol=1e-8)


class TestLmiProblem:
    def test_eigenvalue_bound_literal(self):
        prob = LmiProblem()
        t = prob.scalar("t")
        prob.add_psd(t * np.eye(3) - np.diag([1.0, 2.0, 3.0]))
        prob.minimize(t)
        report = prob.solve()
        assert isinstance(report, SolveReport)
        assert abs(report.objective - 3.0) < 1e-5
        assert abs(report.values["t"] - 3.0) < 1e-5
        assert report.max_violation <= 1e-7

    def test_infeasible_raises(self):
        prob = LmiProblem()
        x = prob.symmetric("x", 2)
        prob.add_psd(x - np.eye(2))
        prob.add_psd(-x - np.eye(2))
        with pytest.raises(Infeasible):
            prob.solve()

    def test_spectral_bound_matches_svd(self):
        m_val = RNG.normal(size=(3, 5))
        prob = LmiProblem()
        t = prob.scalar("t")
        m = prob.matrix("m", 3, 5)
        prob.add(m == m_val)
        prob.add(spectral_bound_constraint(m, t))
        prob.minimize(t)
        report = prob.solve()
        sigma = np.linalg.svd(m_val, compute_uv=False)[0]
        assert abs(report.objective - sigma) < 1e-5

    def test_psd_margin_enforced(self):
        prob = LmiProblem()
        x = prob.symmetric("x", 3)
        prob.add_psd(x, margin=0.5)
        prob.minimize(cp_trace(x))
        report = prob.solve()
        lam = np.linalg.eigvalsh(report.values["x"]).min()
        assert lam >= 0.5 - 1e-6

    def test_duplicate_name_rejected(self):
        prob = LmiProblem()
        prob.scalar("t")
        with pytest.raises(ValueError):
            prob.scalar("t")

    def test_nonsquare_psd_rejected(self):
        prob = LmiProblem()
        m = prob.matrix("m", 2, 3)
        with pytest.raises(ValueError):
            prob.add_psd(m)


def cp_trace(x):
    import cvxpy as cp

    return cp.trace(x)


class TestBackendSelection:
    def test_default_is_clarabel(self, monkeypatch):
        monkeypatch.delenv("MESHNET_SOLVER", raising=False)
        assert default_backend() == "CLARABEL"

    def test_env_override(self, monkeypatch):
        monkeypatch.setenv("MESHNET_SOLVER", "scs")
        assert default_backend() == "SCS"

    def test_invalid_env_raises(self, monkeypatch):
        monkeypatch.setenv("MESHNET_SOLVER", "NOSUCH")
        with pytest.raises(ValueError):
            default_backend()

    def test_scs_options_are_tight(self):
        opts = solver_options("SCS")
        assert opts["eps_abs"] <= 1e-8 and opts["eps_rel"] <= 1e-8

    @pytest.mark.parametrize("backend", ["CLARABEL", "SCS", "CVXOPT"])
    def test_backends_reach_lmi_accuracy(self, backend):
        import cvxpy as cp

        if backend not in cp.installed_solvers():
            pytest.skip(f"{backend} not installed")
        prob = LmiProblem(backend=backend)
        t = prob.scalar("t")
        prob.add_psd(t * np.eye(4) - np.diag([1.0, 2.0, 3.0, 4.0]))
        prob.minimize(t)
        report = prob.solve()
        assert report.backend == backend
        assert abs(report.objective - 4.0) < 1e-5


class TestToleranceConfig:
    def test_defaults(self):
        tol = ToleranceConfig()
        assert tol.pd_tol == 1e-10
        assert tol.feas_tol == 1e-7
        assert tol.opt_tol == 1e-6
        assert tol.margin == 1e-6
