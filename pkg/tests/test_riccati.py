"""Quadratic backward equation: oracle agreement, ball iteration, comparisons."""

import numpy as np
import pytest

from bsre.coefficients import Bounds, ConstantDiagonal
from bsre.errors import (
    BallViolationError,
    ContractViolationError,
    InvalidConfigurationError,
    NonConvergenceError,
)
from bsre.grid import TimeGrid
from bsre.lyapunov import SolverOptions, lyapunov_representation_solve
from bsre.processes import OperatorProcess, batched_opH
from bsre.riccati import RiccatiConfig, diagonal_oracle, lambda_apply, riccati_solve
from bsre.spectral import laplacian_basis


@pytest.fixture(scope="module")
def ref_model():
    basis = laplacian_basis(4, 0.4)
    return ConstantDiagonal(basis, 0.0, 1.0, 1.0, 0.0, Bounds(0.5, 1.0, 1.0))


@pytest.fixture(scope="module")
def ref_solution(ref_model):
    return riccati_solve(ref_model, TimeGrid(1.0, 500))


class TestOracle:
    def test_stationary_limit_sqrt_two_minus_one(self):
        # 2 p + p^2 = 1 at the long-horizon plateau for lam = b = s = 1
        t = np.array([0.0])
        p0 = diagonal_oracle(1.0, 0.0, 1.0, 1.0, 0.0, 8.0, t)[0]
        assert abs(p0 - (np.sqrt(2.0) - 1.0)) < 1e-10

    def test_reduces_to_linear_formula_when_b_zero(self):
        t = np.linspace(0.0, 1.0, 11)
        got = diagonal_oracle(1.0, 0.0, 0.0, 0.0, 1.0, 1.0, t)
        assert np.allclose(got, np.exp(-2.0 * (1.0 - t)), rtol=1e-9)

    def test_solver_tracks_oracle_per_mode(self, ref_model, ref_solution):
        g = ref_solution.grid
        P = ref_solution.P.values()
        for k, lam in enumerate(ref_model.basis.lambdas):
            oc = diagonal_oracle(float(lam), 0.0, 1.0, 1.0, 0.0, g.T, g.times)
            denom = np.maximum(np.abs(oc), 1e-12)
            assert np.max(np.abs(P[:, k, k] - oc) / denom) < 1e-6


class TestQuadraticIteration:
    def test_lambda_map_fixes_the_solution(self, ref_model, ref_solution):
        P2, Q2 = lambda_apply(ref_solution.P, ref_model)
        gap = float(np.max(batched_opH(P2.values() - ref_solution.P.values())))
        assert gap < 1e-9
        assert float(np.max(np.abs(Q2.coeffs))) == 0.0

    def test_window_size_does_not_change_answer(self, ref_model):
        g = TimeGrid(1.0, 500)
        s1 = riccati_solve(ref_model, g, RiccatiConfig(delta=0.4))
        s2 = riccati_solve(ref_model, g, RiccatiConfig(delta=0.2))
        gap = float(np.max(batched_opH(s1.P.values() - s2.P.values())))
        assert gap < 1e-10

    def test_zero_b_collapses_to_linear_equation(self, const_model):
        g = TimeGrid(0.5, 100)
        ric = riccati_solve(const_model, g)
        lin = lyapunov_representation_solve(const_model, g,
                                            backend="deterministic-exact")
        gap = float(np.max(batched_opH(ric.P.values() - lin.P.values())))
        assert gap < 1e-12

    def test_control_term_only_lowers_the_operator(self, lq_model):
        g = TimeGrid(1.0, 200)
        ric = riccati_solve(lq_model, g)
        lin = lyapunov_representation_solve(lq_model, g,
                                            backend="deterministic-exact")
        diff = lin.P.values() - ric.P.values()
        eigs = np.linalg.eigvalsh(0.5 * (diff + diff.swapaxes(-1, -2)))
        assert float(eigs.min()) >= -1e-10

    def test_mode_decoupling_exact_deterministic(self, ref_solution):
        P = ref_solution.P.values()
        mask = ~np.eye(P.shape[-1], dtype=bool)
        assert np.all(P[:, mask] == 0.0)

    def test_mode_decoupling_exact_stochastic(self, field_model):
        g = TimeGrid(0.25, 25)
        sol = riccati_solve(field_model, g,
                            RiccatiConfig(n_paths=600, seed=11, chunk=128))
        mask = ~np.eye(3, dtype=bool)
        assert np.all(sol.P.coeffs[:, :, mask] == 0.0)
        assert sol.meta["backend"] == "riccati-monte-carlo"

    def test_windows_report_contracting_ratios(self, ref_solution):
        wins = ref_solution.meta["windows"]
        assert len(wins) >= 1
        for w in wins:
            assert all(r < 1.0 for r in w["ratios"])
        assert ref_solution.meta["halvings"] <= 5


class TestGuards:
    def test_explicit_radius_below_bound_rejected(self, ref_model):
        with pytest.raises(InvalidConfigurationError, match="ball radius"):
            riccati_solve(ref_model, TimeGrid(1.0, 500), RiccatiConfig(r=4.0))

    def test_negative_datum_rejected(self):
        basis = laplacian_basis(4, 0.4)
        bad = ConstantDiagonal(basis, 0.0, 1.0, 1.0, -1.0, Bounds(0.5, 1.0, 1.0))
        with pytest.raises(ContractViolationError, match="positivity"):
            riccati_solve(bad, TimeGrid(1.0, 500))

    def test_iterate_escaping_ball_rejected(self, ref_model):
        g = TimeGrid(1.0, 100)
        big = np.zeros((g.L + 1, 1, 4, 4))
        big[:, 0] = 1e6 * np.eye(4)
        K = OperatorProcess(g, ref_model.basis, big, np.ones(g.L + 1))
        with pytest.raises(BallViolationError, match="ball radius"):
            lambda_apply(K, ref_model)

    def test_nonconvergence_carries_residual_history(self, ref_model):
        g = TimeGrid(1.0, 500)
        with pytest.raises(NonConvergenceError) as exc:
            riccati_solve(ref_model, g, RiccatiConfig(tol=1e-16, max_iter=1,
                                                      max_halvings=0))
        assert len(exc.value.residuals) >= 1


class TestMeta:
    def test_constants_are_in_range(self, ref_solution):
        meta = ref_solution.meta
        assert meta["C2"] >= 1.0
        assert meta["bound"] > 0.0
        assert meta["r"] > meta["bound"]
        assert meta["delta_theoretical"] > 0.0
        assert meta["ball_max"] <= meta["r"]
        assert meta["min_eig_at_origin"] >= -1e-10

    def test_solution_symmetric_and_terminal(self, ref_model, ref_solution):
        P = ref_solution.P.values()
        assert np.array_equal(P, P.swapaxes(-1, -2))
        assert np.array_equal(P[-1], np.diag(ref_model.diag_m()))
