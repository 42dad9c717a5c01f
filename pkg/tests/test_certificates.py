"""Numeric certificate assembly and verification checks.

The network-matrix tests pin the block layout against a brute-force
permutation between the field-major and agent-major forms, so the two
assembly routes cross-validate each other.
"""

import numpy as np
import pytest
from scipy.linalg import solve_continuous_lyapunov

from meshnet.certificates import (
    chain_diag_block,
    chain_off_block,
    closed_loop_matrix,
    coupling_budget_ratio,
    dissipation_gap,
    double_integrator,
    iss_upper_bound,
    network_certificate_matrix,
    scalar_gain_certificate,
    scalar_gain_certificate_scaled,
    self_damping_residual,
    storage_certificate,
    storage_certificate_scaled,
    verify_ifofp,
)
from meshnet.control import GainBlock

I3 = np.eye(3)
I6 = np.eye(6)


def _damped_instance(kp=4.0, kd=4.0, extra=1.0):
    """A hand-built passive loop: PD law plus a Lyapunov-derived storage."""
    l_rows = np.hstack([-kp * I3, -kd * I3])
    abar = closed_loop_matrix(l_rows)
    r = solve_continuous_lyapunov(abar.T, -extra * np.eye(6))
    p = np.linalg.inv(r)
    return l_rows, 0.5 * (p + p.T), 0.5 * (r + r.T)


class TestStructure:
    def test_double_integrator_layout(self):
        a, b = double_integrator()
        assert np.array_equal(a[:3, 3:], I3)
        assert np.count_nonzero(a) == 3
        assert np.array_equal(b[3:, :], I3)
        assert np.count_nonzero(b) == 3

    def test_closed_loop_matrix(self):
        l_rows = np.hstack([-2.0 * I3, -3.0 * I3])
        abar = closed_loop_matrix(l_rows)
        expected = np.block([[np.zeros((3, 3)), I3], [-2.0 * I3, -3.0 * I3]])
        assert np.allclose(abar, expected)

    def test_storage_certificate_is_symmetric(self):
        rng = np.random.default_rng(3)
        m = rng.normal(size=(6, 6))
        p = m @ m.T + 6 * I6
        l_rows = rng.normal(size=(3, 6))
        cert = storage_certificate(p, l_rows, -4.0, 1.2)
        assert cert.shape == (18, 18)
        assert np.allclose(cert, cert.T)

    def test_scaling_identity(self):
        # rho * unscaled certificate == scaled certificate, entrywise, for any
        # consistent tuple of variables.
        rng = np.random.default_rng(11)
        for _ in range(20):
            m = rng.normal(size=(6, 6))
            p_tilde = m @ m.T + 6 * I6
            l_tilde = rng.normal(size=(3, 6))
            rho = float(rng.uniform(0.3, 3.0))
            nu_tilde = float(-rng.uniform(0.5, 30.0))
            p = p_tilde / rho
            l_rows = np.linalg.solve(p_tilde.T, l_tilde.T).T
            lhs = rho * storage_certificate(p, l_rows, nu_tilde / rho, rho)
            rhs = storage_certificate_scaled(p_tilde, l_tilde, rho, nu_tilde)
            assert np.max(np.abs(lhs - rhs)) < 1e-8 * max(1.0, np.abs(rhs).max())

    def test_chain_off_block_transpose_symmetry(self):
        rng = np.random.default_rng(5)
        q_ij = rng.normal(size=(6, 6))
        q_ji = rng.normal(size=(6, 6))
        w_ij = chain_off_block(-3.0, -5.0, q_ij, q_ji)
        w_ji = chain_off_block(-5.0, -3.0, q_ji, q_ij)
        assert np.allclose(w_ij, w_ji.T)


class TestPassivityCertificates:
    def test_certified_instance_has_nonpositive_gap(self):
        l_rows, p, r = _damped_instance(kp=6.0, kd=5.0, extra=2.0)
        # This instance is certified for a modest index pair...
        lam = verify_ifofp(p, l_rows, -40.0, 0.4)
        assert lam > 0.0
        # ...and the certificate implies the dissipation inequality.
        assert dissipation_gap(r, l_rows, -40.0, 0.4) <= 0.0

    def test_implication_on_random_samples(self):
        rng = np.random.default_rng(29)
        certified = 0
        for _ in range(200):
            kp, kd = rng.uniform(1.0, 9.0, size=2)
            extra = rng.uniform(0.5, 3.0)
            l_rows, p, r = _damped_instance(kp, kd, extra)
            nu = -float(rng.uniform(2.0, 80.0))
            rho = float(rng.uniform(0.05, 2.5))
            if verify_ifofp(p, l_rows, nu, rho) >= 0.0:
                certified += 1
                assert dissipation_gap(r, l_rows, nu, rho) <= 1e-9
        assert certified >= 20  # the sweep must actually exercise the branch

    def test_gap_requires_negative_nu(self):
        l_rows, _, r = _damped_instance()
        with pytest.raises(ValueError):
            dissipation_gap(r, l_rows, 1.0, 0.5)


class TestScalarCertificates:
    def test_analytic_boundary(self):
        # For nu=-6, rho=2 the best multiplier is p=4/7 and the smallest
        # feasible squared gain is 4 (so gain 2).
        for g2, sign in ((4.0 - 1e-6, -1), (4.0 + 1e-3, 1)):
            phi = scalar_gain_certificate(-6.0, 2.0, 4.0 / 7.0, g2)
            lam = np.linalg.eigvalsh(phi).min()
            assert np.sign(lam) == sign

    def test_scalar_gain_threshold_formula(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            nu = -float(rng.uniform(0.5, 20.0))
            rho = float(rng.uniform(0.2, 3.0))
            p = float(rng.uniform(0.05, 5.0))
            if p * rho <= 1.0 + 1e-6:
                continue
            g2_star = -p * nu + p**2 / (4.0 * (p * rho - 1.0))
            lam_hi = np.linalg.eigvalsh(
                scalar_gain_certificate(nu, rho, p, g2_star * 1.001 + 1e-9)
            ).min()
            lam_lo = np.linalg.eigvalsh(
                scalar_gain_certificate(nu, rho, p, g2_star * 0.999 - 1e-9)
            ).min()
            assert lam_hi > 0.0
            assert lam_lo < 0.0

    def test_scaled_variant_threshold(self):
        nu_t, p_t = -9.0, 0.4
        g2_star = -nu_t + 1.0 / (4.0 * (1.0 - p_t))
        hi = scalar_gain_certificate_scaled(nu_t, p_t, g2_star + 1e-3)
        lo = scalar_gain_certificate_scaled(nu_t, p_t, g2_star - 1e-3)
        assert np.linalg.eigvalsh(hi).min() > 0.0
        assert np.linalg.eigvalsh(lo).min() < 0.0

    def test_scalar_matches_network_single_agent_isotropic(self):
        # With Q = 0, the 24x24 single-agent matrix is the 4x4 scalar
        # certificate Kronecker-expanded over coordinates; eigenvalues match.
        nu, rho, p, g2 = -5.0, 1.7, 0.9, 12.0
        big = network_certificate_matrix(
            [7], {7: nu}, {7: rho}, {7: p}, np.zeros((6, 6)), g2
        )
        small = scalar_gain_certificate(nu, rho, p, g2)
        lam_big = np.sort(np.linalg.eigvalsh(big))
        lam_small = np.sort(np.linalg.eigvalsh(small))
        assert np.allclose(lam_big, np.repeat(lam_small, 6), atol=1e-10)


def _field_to_agent_permutation(n: int) -> np.ndarray:
    """Permutation matrix T with T @ field_major @ T.T == agent_major."""
    dim = 24 * n
    t = np.zeros((dim, dim))
    for agent in range(n):
        for f in range(4):
            for c in range(6):
                row_agent = agent * 24 + f * 6 + c
                row_field = f * 6 * n + agent * 6 + c
                t[row_agent, row_field] = 1.0
    return t


class TestNetworkMatrix:
    def _random_instance(self, n, seed):
        rng = np.random.default_rng(seed)
        ids = list(range(1, n + 1))
        nu = {i: -float(rng.uniform(2.0, 9.0)) for i in ids}
        rho = {i: float(rng.uniform(1.2, 2.5)) for i in ids}
        p = {i: float(rng.uniform(0.3, 3.0)) for i in ids}
        q = rng.normal(size=(6 * n, 6 * n)) * 0.3
        # respect the structural zero rows of every block
        for bi in range(n):
            q[6 * bi : 6 * bi + 3, :] = 0.0
        return ids, nu, rho, p, q, float(rng.uniform(5.0, 40.0))

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_field_major_equals_permuted_chain_assembly(self, n):
        ids, nu, rho, p, q, g2 = self._random_instance(n, seed=40 + n)
        field = network_certificate_matrix(ids, nu, rho, p, q, g2)
        agent = np.zeros((24 * n, 24 * n))
        for a, i in enumerate(ids):
            qii = q[6 * a : 6 * a + 6, 6 * a : 6 * a + 6]
            agent[24 * a : 24 * a + 24, 24 * a : 24 * a + 24] = chain_diag_block(
                nu[i], rho[i], p[i], g2, qii
            )
            for b, j in enumerate(ids):
                if b >= a:
                    continue
                qij = q[6 * a : 6 * a + 6, 6 * b : 6 * b + 6]
                qji = q[6 * b : 6 * b + 6, 6 * a : 6 * a + 6]
                blk = chain_off_block(nu[i], nu[j], qij, qji)
                agent[24 * a : 24 * a + 24, 24 * b : 24 * b + 24] = blk
                agent[24 * b : 24 * b + 24, 24 * a : 24 * a + 24] = blk.T
        t = _field_to_agent_permutation(n)
        assert np.max(np.abs(t @ field @ t.T - agent)) < 1e-12

    def test_rejects_wrong_q_shape(self):
        with pytest.raises(ValueError):
            network_certificate_matrix(
                [1, 2], {1: -1, 2: -1}, {1: 1, 2: 1}, {1: 1, 2: 1},
                np.zeros((6, 6)), 4.0,
            )


class TestSmsChecks:
    def test_self_damping_zero_block_measures_loop_slack(self):
        l_rows, _, r = _damped_instance(kp=6.0, kd=5.0, extra=2.0)
        l_bar = GainBlock.from_rows(l_rows)
        res = self_damping_residual(r, l_bar, GainBlock.zero(), 0.4, 0.1)
        abar = closed_loop_matrix(l_rows)
        direct = np.linalg.eigvalsh(r @ abar + abar.T @ r + 0.5 * I6).max()
        assert res == pytest.approx(direct, abs=1e-12)

    def test_self_damping_additive_in_the_self_block(self):
        l_rows, _, r = _damped_instance(kp=6.0, kd=5.0, extra=2.0)
        l_bar = GainBlock.from_rows(l_rows)
        k = GainBlock(k_x=0.3 * I3, k_v=-0.5 * I3)
        res = self_damping_residual(r, l_bar, k, 0.4, 0.1)
        base_form = (
            r @ closed_loop_matrix(l_rows)
            + closed_loop_matrix(l_rows).T @ r
            + 0.5 * I6
        )
        bump = r @ k.matrix() + k.matrix().T @ r
        assert res == pytest.approx(
            np.linalg.eigvalsh(base_form + bump).max(), abs=1e-12
        )

    def test_coupling_budget_ratio_arithmetic(self):
        # identity storage, isotropic neighbor gains: each term is the
        # spectral norm of [k_x k_v] rows; self block excluded.
        row = {
            1: GainBlock.isotropic(3.0, 4.0),   # norm 5
            2: GainBlock.isotropic(6.0, 8.0),   # norm 10, the self block
            3: GainBlock.isotropic(-5.0, 12.0), # norm 13
        }
        ratio = coupling_budget_ratio(2, np.eye(6), row, delta=0.5)
        assert ratio == pytest.approx((5.0 + 13.0) / 0.5, rel=1e-12)

    def test_iss_upper_bound_shape(self):
        times = np.linspace(0.0, 10.0, 101)
        r = np.diag([2.0, 2.0, 2.0, 1.0, 1.0, 1.0])
        bound = iss_upper_bound(
            times,
            R=r,
            mu=0.8,
            delta=0.6,
            coupling_norm_sum=0.3,
            neighbor_sup=1.5,
            w_sup=0.2,
            e0_norm=2.0,
        )
        steady = (0.3 * 1.5 + 2.0 * 0.2) / 0.6
        assert bound.shape == times.shape
        # t = 0: steady term plus full transient
        assert bound[0] == pytest.approx(steady + np.sqrt(2.0) * 2.0)
        # monotone decay toward the steady term
        assert np.all(np.diff(bound) <= 1e-12)
        assert bound[-1] == pytest.approx(steady + np.sqrt(2.0) * 2.0 * np.exp(-4.0))

    def test_iss_bound_tail_is_steady_term(self):
        times = np.array([0.0, 1e3])
        bound = iss_upper_bound(
            times,
            R=np.eye(6),
            mu=1.0,
            delta=1.0,
            coupling_norm_sum=0.0,
            neighbor_sup=0.0,
            w_sup=1.0,
            e0_norm=1.0,
        )
        assert bound[-1] == pytest.approx(1.0)
