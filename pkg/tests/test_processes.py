"""Polynomial surfaces in the Brownian value: fitting, rebasing, evaluation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsre.grid import TimeGrid
from bsre.processes import (
    OperatorProcess,
    batched_opH,
    fit_from_gram,
    gram_terms,
    poly_feature_derivs,
    poly_features,
    rebase_surface,
    surface_scales,
)


class TestFeatures:
    def test_monomial_columns(self):
        z = np.array([0.0, 1.0, -2.0])
        X = poly_features(z, 3)
        assert X.shape == (3, 4)
        assert np.array_equal(X[:, 0], np.ones(3))
        assert np.array_equal(X[:, 2], z**2)

    def test_derivs_match_difference_quotient(self):
        z = np.linspace(-1.5, 1.5, 9)
        D = poly_feature_derivs(z, 4)
        eps = 1e-6
        num = (poly_features(z + eps, 4) - poly_features(z - eps, 4)) / (2 * eps)
        assert np.allclose(D, num, atol=1e-8)

    @given(st.integers(0, 5))
    @settings(max_examples=10, deadline=None)
    def test_degree_zero_is_constant_block(self, d):
        X = poly_features(np.array([0.3]), d)
        assert X.shape == (1, d + 1)


class TestFit:
    def test_noiseless_polynomial_recovered(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=400)
        # matrix-valued targets: per-entry cubic in z
        coeffs = rng.normal(size=(4, 2, 2))
        X = poly_features(z, 3)
        targets = np.einsum("pf,fjk->pjk", X, coeffs)
        G1, G2 = gram_terms(z, targets, 3)
        fit = fit_from_gram(G1, G2, 2, ridge=0.0)
        assert np.allclose(fit, coeffs, atol=1e-10)

    def test_symmetric_targets_give_bitwise_symmetric_fit(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=300)
        raw = rng.normal(size=(300, 3, 3))
        targets = 0.5 * (raw + raw.swapaxes(-1, -2))
        G1, G2 = gram_terms(z, targets, 4)
        fit = fit_from_gram(G1, G2, 3)
        assert np.array_equal(fit, fit.swapaxes(-1, -2))

    def test_chunk_split_agrees_to_roundoff(self):
        # worker invariance in the solver comes from a fixed chunk size and a
        # fixed reduction order, not from split-invariance of the product
        rng = np.random.default_rng(2)
        z = rng.normal(size=256)
        targets = rng.normal(size=(256, 2, 2))
        G1, G2 = gram_terms(z, targets, 2)
        a1, a2 = gram_terms(z[:128], targets[:128], 2)
        b1, b2 = gram_terms(z[128:], targets[128:], 2)
        assert np.allclose(G1, a1 + b1, rtol=1e-12)
        assert np.allclose(G2, a2 + b2, rtol=1e-12)

    def test_fixed_split_reduction_is_deterministic(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=256)
        targets = rng.normal(size=(256, 2, 2))
        def reduce_chunks():
            g1 = g2 = None
            for lo in range(0, 256, 64):
                a1, a2 = gram_terms(z[lo:lo + 64], targets[lo:lo + 64], 2)
                g1 = a1 if g1 is None else g1 + a1
                g2 = a2 if g2 is None else g2 + a2
            return g1, g2
        r1, r2 = reduce_chunks()
        s1, s2 = reduce_chunks()
        assert np.array_equal(r1, s1) and np.array_equal(r2, s2)

    def test_ridge_shrinks_unidentified_directions(self):
        z = np.zeros(50)  # all features beyond the constant are degenerate
        targets = np.ones((50, 1, 1))
        G1, G2 = gram_terms(z, targets, 3)
        fit = fit_from_gram(G1, G2, 1, ridge=1e-8)
        assert fit[0, 0, 0] == pytest.approx(1.0, rel=1e-6)
        assert np.all(np.abs(fit[1:]) < 1e-6)


class TestSurfaces:
    def test_scales_floor_at_sqrt_h(self):
        g = TimeGrid(1.0, 100)
        sc = surface_scales(g, g.L + 1)
        assert sc[0] == pytest.approx(np.sqrt(g.h))
        assert sc[-1] == pytest.approx(1.0)
        assert np.all(np.diff(sc) >= 0)

    def test_rebase_preserves_surface_values(self):
        rng = np.random.default_rng(3)
        base = rng.normal(size=(5, 2, 2))
        w = np.linspace(-0.5, 0.5, 7)
        out = rebase_surface(base, 0.4, np.array([0.9]))
        va = np.einsum("pf,fjk->pjk", poly_features(w / 0.4, 4), base)
        vb = np.einsum("pf,fjk->pjk", poly_features(w / 0.9, 4), out[0])
        assert np.allclose(va, vb, atol=1e-12)

    def test_eval_and_deriv(self):
        g = TimeGrid(1.0, 4)
        from bsre.spectral import laplacian_basis

        basis = laplacian_basis(2, 0.4)
        scales = surface_scales(g, g.L + 1)
        coeffs = np.zeros((g.L + 1, 3, 2, 2))
        coeffs[:, 0] = np.eye(2)
        coeffs[:, 1, 0, 1] = 1.0  # P(t, w) = I + (w / scale) E01
        coeffs[:, 1, 1, 0] = 1.0
        proc = OperatorProcess(g, basis, coeffs, scales)
        P = proc.eval_at(2, 0.3)
        assert P[0, 1] == pytest.approx(0.3 / scales[2])
        D = proc.deriv_at(2, 0.3)
        assert D[0, 1] == pytest.approx(1.0 / scales[2])
        assert D[0, 0] == pytest.approx(0.0, abs=1e-15)

    def test_deterministic_process_ignores_w(self):
        g = TimeGrid(1.0, 4)
        from bsre.spectral import laplacian_basis

        basis = laplacian_basis(2, 0.4)
        coeffs = np.tile(np.eye(2), (g.L + 1, 1, 1, 1))
        proc = OperatorProcess(g, basis, coeffs, np.ones(g.L + 1))
        assert proc.deterministic
        assert np.array_equal(proc.eval_at(1, -2.0), proc.eval_at(1, 2.0))


class TestBatchedNorm:
    def test_matches_spectral_norm_loop(self):
        rng = np.random.default_rng(4)
        arr = rng.normal(size=(6, 3, 3))
        out = batched_opH(arr)
        for i in range(6):
            assert out[i] == pytest.approx(np.linalg.norm(arr[i], 2), rel=1e-12)
