import json
import warnings

import numpy as np
import pandas as pd
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ssgam.api import infer_schema
from ssgam.datasets import SIMULATION_FORMULA, additive_benchmark
from ssgam.design import (
    DesignError,
    FullDesign,
    PenalizedBasis,
    bspline_penalized_basis,
    build_full_design,
    center,
    difference_penalty,
    fct_design,
    mixed_model_decomposition,
    mrf_design,
    orthogonal_decomposition,
    poly_basis,
    rnd_design,
    scale_frobenius,
    tensor_bspline_penalized_basis,
    tensor_interaction,
)
from ssgam.formula import model_spec


def max_rel_inner(B, Z):
    Z = Z[:, None] if Z.ndim == 1 else Z
    return np.max(np.abs(Z.T @ B) / (np.linalg.norm(B, axis=0) * np.linalg.norm(Z, axis=0)[:, None]))


class TestPolyBasis:
    def test_degree_one_is_centered_unit_vector(self):
        x = np.array([3.0, 1.0, 4.0, 1.0, 5.0])
        B = poly_basis(x, 1)
        xc = x - x.mean()
        np.testing.assert_allclose(B[:, 0], xc / np.linalg.norm(xc), atol=1e-14)

    def test_degree_two_on_three_points(self):
        B = poly_basis(np.array([-1.0, 0.0, 1.0]), 2)
        np.testing.assert_allclose(B[:, 0], np.array([-1, 0, 1]) / np.sqrt(2), atol=1e-14)
        np.testing.assert_allclose(B[:, 1], np.array([1, -2, 1]) / np.sqrt(6), atol=1e-14)

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(float, st.integers(6, 40), elements=st.floats(-50, 50)),
           st.integers(1, 4))
    def test_orthonormal_and_centered(self, x, degree):
        if len(np.unique(np.round(x, 3))) < degree + 2 or np.ptp(x) < 1e-2:
            return
        B = poly_basis(x, degree)
        np.testing.assert_allclose(B.sum(axis=0), 0, atol=1e-8)
        np.testing.assert_allclose(B.T @ B, np.eye(degree), atol=1e-8)

    def test_too_few_distinct_values(self):
        with pytest.raises(DesignError, match="distinct"):
            poly_basis(np.array([1.0, 1.0, 2.0]), 2)


class TestBSpline:
    def test_partition_of_unity(self):
        x = np.random.default_rng(1).uniform(-3, 7, 300)
        pb = bspline_penalized_basis(x)
        np.testing.assert_allclose(pb.B_tilde.sum(axis=1), 1.0, atol=1e-12)
        assert pb.B_tilde.shape == (300, 20)

    def test_penalty_rank_and_nullspace(self):
        pb = bspline_penalized_basis(np.linspace(0, 1, 50))
        assert pb.nullspace_dim == 2
        assert np.linalg.matrix_rank(pb.P) == 18
        np.testing.assert_allclose(pb.P @ np.arange(1, 21), 0, atol=1e-10)
        assert np.max(np.abs(pb.P - pb.P.T)) <= 1e-10

    def test_difference_penalty_matches_explicit_operator(self):
        D = np.array([[1, -2, 1, 0, 0], [0, 1, -2, 1, 0], [0, 0, 1, -2, 1]], float)
        np.testing.assert_array_equal(difference_penalty(5, 2), D.T @ D)

    def test_errors(self):
        with pytest.raises(DesignError, match="too small"):
            bspline_penalized_basis(np.linspace(0, 1, 10), n_basis=5)
        with pytest.raises(DesignError, match="degenerate"):
            bspline_penalized_basis(np.ones(10))

    def test_no_extrapolation(self):
        pb = bspline_penalized_basis(np.linspace(0, 1, 30))
        with pytest.raises(DesignError, match="outside"):
            pb.recipe(np.array([1.5]))

    def test_tensor_spline(self):
        rng = np.random.default_rng(2)
        pb = tensor_bspline_penalized_basis(rng.uniform(size=80), rng.uniform(size=80))
        assert pb.B_tilde.shape == (80, 49)
        assert pb.nullspace_dim == 1
        np.testing.assert_allclose(pb.B_tilde.sum(axis=1), 1.0, atol=1e-12)
        assert np.linalg.matrix_rank(pb.P) == 48


class TestFactorBases:
    def test_sum_contrasts(self):
        f = np.array(["a", "b", "c", "a", "b", "c"])
        pb = fct_design(f)
        assert pb.B_tilde.shape == (6, 2)
        np.testing.assert_array_equal(pb.B_tilde[f == "c"], -1.0)
        np.testing.assert_array_equal(pb.P, np.eye(2))
        assert fct_design(np.repeat(list("abcd"), 3)).B_tilde.shape[1] == 3

    def test_two_level_balanced(self):
        pb = fct_design(np.array(["x", "y", "x", "y"]))
        np.testing.assert_array_equal(pb.B_tilde[:, 0], [1, -1, 1, -1])

    def test_single_level(self):
        with pytest.raises(DesignError, match="2 levels"):
            fct_design(np.array(["a", "a"]))

    def test_unobserved_level(self):
        with pytest.raises(DesignError, match="observed"):
            fct_design(np.array(["a", "b"]), levels=["a", "b", "c"])

    def test_rnd_iid_and_scaled(self):
        f = np.repeat(list("abcde"), 2)
        pb = rnd_design(f)
        np.testing.assert_allclose(pb.P, np.eye(5))
        np.testing.assert_array_equal(pb.B_tilde.sum(axis=1), 1)
        np.testing.assert_allclose(rnd_design(f, 0.5 * np.eye(5)).P, 2 * np.eye(5))

    def test_rnd_not_positive_definite(self):
        with pytest.raises(DesignError, match="positive definite"):
            rnd_design(np.array(["a", "b"]), np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_mrf_path(self):
        N = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], float)
        pb = mrf_design(np.array(["0", "1", "2", "1"]), N, regions=["0", "1", "2"])
        np.testing.assert_array_equal(pb.P, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])
        assert pb.nullspace_dim == 1

    def test_mrf_cycle_rank(self):
        N = np.roll(np.eye(4), 1, axis=1) + np.roll(np.eye(4), -1, axis=1)
        pb = mrf_design(np.arange(4), N, regions=range(4))
        # cycle Laplacian eigenvalues are 0, 2, 2, 4
        np.testing.assert_allclose(np.linalg.eigvalsh(pb.P), [0, 2, 2, 4], atol=1e-12)
        assert np.linalg.matrix_rank(pb.P) == 3
        np.testing.assert_allclose(pb.P @ np.ones(4), 0)

    def test_mrf_errors(self):
        disconnected = np.zeros((4, 4))
        disconnected[0, 1] = disconnected[1, 0] = disconnected[2, 3] = disconnected[3, 2] = 1
        with pytest.raises(DesignError, match="disconnected"):
            mrf_design(np.arange(4), disconnected, regions=range(4))
        with pytest.raises(DesignError, match="regions"):
            mrf_design(np.arange(3), np.ones((4, 4)) - np.eye(4), regions=range(3))


class TestTensorInteraction:
    def test_ones_column_is_identity(self):
        B = np.random.default_rng(0).standard_normal((7, 3))
        np.testing.assert_array_equal(tensor_interaction(np.ones((7, 1)), B), B)

    def test_column_order(self):
        rng = np.random.default_rng(1)
        A, B = rng.standard_normal((5, 2)), rng.standard_normal((5, 3))
        out = tensor_interaction(A, B)
        assert out.shape == (5, 6)
        for i in range(2):
            for j in range(3):
                np.testing.assert_array_equal(out[:, i * 3 + j], A[:, i] * B[:, j])

    def test_rank_bound(self):
        rng = np.random.default_rng(20)
        A, B = rng.standard_normal((10, 2)), rng.standard_normal((10, 3))
        s = np.linalg.svd(tensor_interaction(A, B), compute_uv=False)
        rank = int(np.sum(s > 1e-10 * s[0]))
        assert rank <= np.linalg.matrix_rank(A) * np.linalg.matrix_rank(B)
        assert rank == 6

    def test_row_mismatch(self):
        with pytest.raises(DesignError, match="row mismatch"):
            tensor_interaction(np.ones((3, 1)), np.ones((4, 1)))


class TestDecompositions:
    def test_pspline_width(self):
        x = np.random.default_rng(20).uniform(size=200)
        pb = bspline_penalized_basis(x)
        dec = orthogonal_decomposition(pb)
        # dense oracle: eigenvalues of B~ P^- B~' through the pseudo-inverse
        K = pb.B_tilde @ np.linalg.pinv(pb.P) @ pb.B_tilde.T
        ev = np.sort(np.linalg.eigvalsh(K))[::-1]
        ev = ev[ev > 1e-10 * ev[0]]
        d_oracle = int(np.searchsorted(np.cumsum(ev) / ev.sum(), 0.999) + 1)
        assert dec.B.shape[1] == d_oracle == 9
        np.testing.assert_allclose(dec.eigenvalues, ev[:9], rtol=1e-8)

    def test_identity_penalty_keeps_basis(self):
        Q = np.linalg.qr(np.random.default_rng(3).standard_normal((30, 4)))[0]
        dec = orthogonal_decomposition(PenalizedBasis(Q, np.eye(4), 0), mass=1.0)
        assert dec.B.shape[1] == 4
        np.testing.assert_allclose(dec.B @ dec.B.T, Q @ Q.T, atol=1e-12)

    def test_full_mass_reconstruction(self):
        x = np.random.default_rng(4).uniform(size=120)
        pb = bspline_penalized_basis(x)
        dec = orthogonal_decomposition(pb, mass=1.0)
        K = pb.B_tilde @ np.linalg.pinv(pb.P) @ pb.B_tilde.T
        err = np.linalg.norm(dec.B @ dec.B.T - K) / np.linalg.norm(K)
        assert err <= 1e-8

    def test_lanczos_agrees_with_dense(self):
        x = np.random.default_rng(5).uniform(size=200)
        pb = bspline_penalized_basis(x, n_basis=40)
        dense = orthogonal_decomposition(pb, solver="dense")
        lanczos = orthogonal_decomposition(pb, solver="lanczos")
        np.testing.assert_allclose(lanczos.eigenvalues, dense.eigenvalues, rtol=1e-6)
        np.testing.assert_allclose(lanczos.B @ lanczos.B.T, dense.B @ dense.B.T, atol=1e-6)

    def test_empty_penalized_part(self):
        with pytest.raises(DesignError, match="empty"):
            orthogonal_decomposition(PenalizedBasis(np.ones((5, 2)), np.zeros((2, 2)), 2))

    def test_mixed_identity(self):
        B = np.random.default_rng(6).standard_normal((10, 3))
        B_u, Bp, _, _ = mixed_model_decomposition(PenalizedBasis(B, np.eye(3), 0))
        assert B_u.shape == (10, 0)
        np.testing.assert_allclose(Bp, B, atol=1e-12)

    def test_mixed_nullspace_is_linear(self):
        x = np.linspace(0, 1, 60)
        pb = bspline_penalized_basis(x)
        B_u, Bp, T_u, _ = mixed_model_decomposition(pb)
        assert B_u.shape[1] == 2
        # null space of the 2nd-order penalty: constant and linear coefficient sequences
        idx = np.column_stack([np.ones(20), np.arange(20.0)])
        resid = idx - T_u @ np.linalg.lstsq(T_u, idx, rcond=None)[0]
        assert np.max(np.abs(resid)) < 1e-10

    def test_mixed_reconstruction(self):
        rng = np.random.default_rng(7)
        pb = bspline_penalized_basis(rng.uniform(size=100))
        B_u, Bp, _, _ = mixed_model_decomposition(pb)
        X = np.hstack([B_u, Bp])
        for _ in range(5):
            target = pb.B_tilde @ rng.standard_normal(20)
            coef = np.linalg.lstsq(X, target, rcond=None)[0]
            assert np.max(np.abs(X @ coef - target)) <= 1e-8 * max(1, np.abs(target).max())
        # same column space: all principal angles vanish
        angles = scipy.linalg.subspace_angles(X, pb.B_tilde)
        assert np.max(angles) <= 1e-8

    def test_indefinite_penalty(self):
        with pytest.raises(DesignError, match="indefinite"):
            mixed_model_decomposition(PenalizedBasis(np.eye(2), np.diag([1.0, -1.0]), 0))


class TestCenterAndScale:
    def test_sum_to_zero(self):
        B = np.random.default_rng(8).standard_normal((40, 3)) + 5
        np.testing.assert_allclose(center(B, np.ones(40)).sum(axis=0), 0, atol=1e-10)

    def test_already_orthogonal(self):
        rng = np.random.default_rng(9)
        Z = rng.standard_normal((30, 2))
        B = center(rng.standard_normal((30, 3)), Z)
        np.testing.assert_allclose(center(B, Z), B, atol=1e-13)

    def test_rank_drop(self):
        rng = np.random.default_rng(10)
        Z = rng.standard_normal((50, 3))
        B = np.hstack([Z[:, :2] @ rng.standard_normal((2, 2)), rng.standard_normal((50, 3))])
        out = center(B, Z)
        s = np.linalg.svd(out, compute_uv=False)
        # rank(B) = 5 and span(B) meets span(Z) in a 2-dim subspace
        assert int(np.sum(s > 1e-10 * s[0])) == 3
        assert max_rel_inner(out[:, 2:], Z) <= 1e-8

    def test_dependent_z_columns(self):
        rng = np.random.default_rng(11)
        z = rng.standard_normal(25)
        Z = np.column_stack([np.ones(25), z, 2 * z + 1])
        out = center(rng.standard_normal((25, 2)), Z)
        assert max_rel_inner(out, Z) <= 1e-8

    def test_empty_z_warns(self):
        B = np.ones((4, 1))
        with pytest.warns(UserWarning, match="nothing to center"):
            np.testing.assert_array_equal(center(B, np.zeros((4, 0))), B)

    def test_scale_identity(self):
        np.testing.assert_allclose(scale_frobenius(np.eye(2)), 0.5 / np.sqrt(2) * np.eye(2))

    @settings(max_examples=25, deadline=None)
    @given(hnp.arrays(float, (50, 7), elements=st.floats(-1e3, 1e3)))
    def test_scale_norm_and_idempotence(self, B):
        if np.linalg.norm(B) < 1e-3:
            return
        once = scale_frobenius(B)
        assert abs(np.linalg.norm(once) - 0.5) <= 1e-12
        np.testing.assert_allclose(scale_frobenius(once), once, rtol=1e-13)

    def test_scale_zero(self):
        with pytest.raises(DesignError):
            scale_frobenius(np.zeros((3, 3)))


@pytest.fixture(scope="module")
def sim_design():
    data = additive_benchmark(seed=1)
    spec = model_spec(SIMULATION_FORMULA, infer_schema(data))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        design = build_full_design(spec, data)
    return data, spec, design


class TestFullDesign:
    def test_simulation_bookkeeping(self, sim_design):
        _, spec, design = sim_design
        assert len(design.blocks) + len(design.unpenalized) == 37
        assert design.u_labels == ["u"]
        q = design.q + design.X_u.shape[1]
        assert abs(q - 257) <= 0.15 * 257
        assert design.q == sum(design.dims)
        assert design.labels == spec.labels[1:]

    def test_block_invariants(self, sim_design):
        _, _, design = sim_design
        ones = np.ones(design.n)
        for b in design.blocks:
            assert abs(np.linalg.norm(b.B) - 0.5) <= 0.5 * 1e-8, b.label
            assert max_rel_inner(b.B, ones) <= 1e-8, b.label
            for p in b.z_parents:
                parent = next(t for t in design.blocks + design.hidden if t.label == p)
                assert max_rel_inner(b.B, parent.B) <= 1e-8, (b.label, p)

    def test_smooth_blocks_orthogonal_to_linear_trend(self, sim_design):
        _, _, design = sim_design
        lin = design.block("lin(sm1)").B
        assert max_rel_inner(design.block("sm(sm1)").B, lin) <= 1e-8

    def test_smooth_widths(self, sim_design):
        _, _, design = sim_design
        # uniform covariates; normal ones concentrate their spectrum in fewer columns
        for cov in ("sm1", "sm2", "noise2", "noise3"):
            assert 8 <= design.block(f"sm({cov})").dim <= 12, cov
        assert design.block("fct(f)").dim == 2
        assert design.block("fct(noise4)").dim == 3

    def test_replay_on_training_data(self, sim_design):
        data, _, design = sim_design
        X_u, blocks = design.evaluate(data)
        np.testing.assert_allclose(X_u, design.X_u, atol=1e-12)
        for b, B in zip(design.blocks, blocks):
            np.testing.assert_allclose(B, b.B, atol=1e-10, err_msg=b.label)

    def test_serialization_round_trip(self, sim_design):
        data, _, design = sim_design
        again = FullDesign.from_dict(json.loads(design.to_json()))
        np.testing.assert_array_equal(again.X, design.X)
        X_u, blocks = again.evaluate(data.iloc[:17])
        np.testing.assert_allclose(np.hstack(blocks), design.X[:17, 1:], atol=1e-10)

    def test_single_linear_term(self):
        x = np.random.default_rng(0).standard_normal(20)
        spec = model_spec("y ~ lin(x)", {"y": "numeric", "x": "numeric"})
        design = build_full_design(spec, {"y": x, "x": x})
        np.testing.assert_array_equal(design.X_u, np.ones((20, 1)))
        assert design.dims == [1]

    def test_mixed_decomposition_option(self):
        rng = np.random.default_rng(1)
        data = {"y": rng.standard_normal(80), "x": rng.uniform(size=80)}
        spec = model_spec("y ~ x", {"y": "numeric", "x": "numeric"})
        design = build_full_design(spec, data, decomposition="mixed")
        assert design.block("sm(x)").dim == 18
        assert design.block("sm(x)").lineage["decomposition"] == "mixed"

    def test_smooth_without_linear_routes_nullspace(self):
        rng = np.random.default_rng(2)
        data = {"y": rng.standard_normal(60), "x": rng.uniform(size=60)}
        spec = model_spec("y ~ sm(x)", {"y": "numeric", "x": "numeric"})
        with pytest.warns(UserWarning, match="unselected"):
            design = build_full_design(spec, data)
        assert design.u_labels == ["u", "u(sm(x))"]

    @pytest.mark.filterwarnings("ignore:unpenalized part")
    def test_random_and_mrf_terms(self):
        rng = np.random.default_rng(3)
        g = rng.integers(0, 4, 100).astype(str)
        N = np.roll(np.eye(4), 1, axis=1) + np.roll(np.eye(4), -1, axis=1)
        data = pd.DataFrame({"y": rng.standard_normal(100), "g": g, "r": g})
        spec = model_spec("y ~ rnd(g) + mrf(r, N=adj)", {"y": "numeric", "g": "factor",
                                                          "r": "factor"})
        design = build_full_design(spec, data, matrices={"adj": (["0", "1", "2", "3"], N)})
        assert design.block("rnd(g)").dim == 3
        assert design.block("mrf(r)").dim == 3
        for b in design.blocks:
            assert abs(np.linalg.norm(b.B) - 0.5) <= 1e-8

    @pytest.mark.filterwarnings("ignore:unpenalized part")
    def test_surface_term(self):
        rng = np.random.default_rng(4)
        data = {"y": rng.standard_normal(150), "a": rng.uniform(size=150),
                "b": rng.uniform(size=150)}
        spec = model_spec("y ~ srf(a, b)", {"y": "numeric", "a": "numeric", "b": "numeric"})
        design = build_full_design(spec, data)
        assert 8 <= design.block("srf(a, b)").dim <= 48

    def test_per_observation_scaling(self):
        rng = np.random.default_rng(5)
        data = {"y": rng.standard_normal(64), "x": rng.uniform(size=64)}
        spec = model_spec("y ~ x", {"y": "numeric", "x": "numeric"})
        design = build_full_design(spec, data, scaling="per_obs")
        for b in design.blocks:
            assert abs(np.linalg.norm(b.B) - 4.0) <= 1e-8

    def test_missing_values(self):
        data = {"y": np.array([1.0, np.nan, 2.0]), "x": np.array([0.0, 1.0, 2.0])}
        spec = model_spec("y ~ lin(x)", {"y": "numeric", "x": "numeric"})
        with pytest.raises(DesignError, match="missing"):
            build_full_design(spec, data)
        data = {"y": np.array([1.0, 0.5, 2.0]), "x": np.array([0.0, np.nan, 2.0])}
        with pytest.raises(DesignError, match="missing"):
            build_full_design(spec, data)

    def test_unseen_level_on_new_data(self, sim_design):
        data, _, design = sim_design
        new = data.iloc[:3].copy()
        new["f"] = ["1", "2", "9"]
        with pytest.raises(DesignError, match="unseen factor level '9'"):
            design.evaluate(new)
