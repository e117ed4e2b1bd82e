from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from humangs.gaussians import (
    DegenerateQuaternionError,
    GaussianCloud,
    Mesh,
    Space,
    build_covariance,
    logit,
    matrix_to_quat,
    quat_conjugate,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    rgb_to_sh_dc,
    sample_cloud_from_mesh,
    sh_to_color,
    sigmoid,
)
from oracles import hamilton, rotation_from_quat

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
quats = arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3)


def random_unit_quats(n, seed=0):
    q = np.random.default_rng(seed).normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


class TestQuaternions:
    def test_normalize_examples(self):
        np.testing.assert_allclose(quat_normalize([1, 0, 0, 0]), [1, 0, 0, 0])
        np.testing.assert_allclose(quat_normalize([2, 0, 0, 0]), [1, 0, 0, 0])
        np.testing.assert_allclose(quat_normalize([1, 1, 1, 1]), [0.5] * 4, atol=1e-15)

    def test_normalize_rejects_zero(self):
        with pytest.raises(DegenerateQuaternionError):
            quat_normalize([1e-14, 0, 0, 0])

    @given(quats)
    def test_normalize_is_unit_and_keeps_direction(self, q):
        u = quat_normalize(q)
        assert abs(np.linalg.norm(u) - 1) < 1e-9
        np.testing.assert_allclose(u * np.linalg.norm(q), q, atol=1e-9 * np.linalg.norm(q))

    def test_multiply_examples(self):
        b = np.array([0.3, -0.2, 0.9, 0.1])
        np.testing.assert_array_equal(quat_multiply([1, 0, 0, 0], b), b)
        np.testing.assert_array_equal(quat_multiply([1, 0, 0, 0], [1, 0, 0, 0]), [1, 0, 0, 0])
        np.testing.assert_array_equal(quat_multiply([0, 1, 0, 0], [0, 1, 0, 0]), [-1, 0, 0, 0])

    @given(quats, quats)
    def test_multiply_matches_hamilton_table(self, a, b):
        np.testing.assert_allclose(quat_multiply(a, b), hamilton(a, b), rtol=1e-12, atol=1e-12)

    @given(quats, quats)
    def test_multiply_norm_is_product(self, a, b):
        n = np.linalg.norm(quat_multiply(a, b))
        assert abs(n - np.linalg.norm(a) * np.linalg.norm(b)) <= 1e-9 * max(1.0, n)

    def test_conjugate_product_is_squared_norm(self):
        q = np.random.default_rng(3).normal(size=(1000, 4))
        out = quat_multiply(q, quat_conjugate(q))
        np.testing.assert_allclose(out[:, 0], np.sum(q * q, axis=1), atol=1e-9)
        np.testing.assert_allclose(out[:, 1:], 0, atol=1e-9)

    def test_to_matrix_examples(self):
        np.testing.assert_allclose(quat_to_matrix([1, 0, 0, 0]), np.eye(3))
        h = math.sqrt(2) / 2
        rz = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]])
        np.testing.assert_allclose(quat_to_matrix([h, 0, 0, h]), rz, atol=1e-12)

    def test_to_matrix_orthonormal(self):
        for q in random_unit_quats(100):
            m = quat_to_matrix(q)
            np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-6)
            assert abs(np.linalg.det(m) - 1) < 1e-6
            np.testing.assert_allclose(m, rotation_from_quat(q), atol=1e-12)

    def test_to_matrix_rejects_non_unit(self):
        with pytest.raises(ValueError):
            quat_to_matrix([2, 0, 0, 0])

    def test_matrix_round_trip(self):
        for q in random_unit_quats(50, seed=4):
            back = matrix_to_quat(quat_to_matrix(q))
            assert min(np.abs(back - q).max(), np.abs(back + q).max()) < 1e-9


class TestCovariance:
    def test_examples(self):
        np.testing.assert_allclose(build_covariance([0, 0, 0], [1, 0, 0, 0]), np.eye(3))
        np.testing.assert_allclose(build_covariance([math.log(2), 0, 0], [1, 0, 0, 0]), np.diag([4, 1, 1]))

    @given(arrays(np.float64, 3, elements=st.floats(-3, 3)), quats)
    def test_symmetric_spd_eigen(self, ls, q):
        c = build_covariance(ls, quat_normalize(q))
        np.testing.assert_allclose(c, c.T, atol=1e-9 * np.abs(c).max())
        np.linalg.cholesky(c)
        ev = np.sort(np.linalg.eigvalsh(c))
        np.testing.assert_allclose(ev, np.sort(np.exp(2 * ls)), rtol=1e-6, atol=1e-12)


class TestColour:
    def test_degree0_isotropic(self):
        sh = rgb_to_sh_dc([0.5, 0.5, 0.5])[None]
        for d in np.random.default_rng(1).normal(size=(10, 3)):
            np.testing.assert_allclose(sh_to_color(sh, d / np.linalg.norm(d)), [0.5] * 3)

    def test_zero_coefficients_give_offset(self):
        np.testing.assert_allclose(sh_to_color(np.zeros((4, 3)), [0, 0, 1]), [0.5] * 3)

    def test_degree1_against_analytic_basis(self):
        c0 = 1 / (2 * math.sqrt(math.pi))
        c1 = math.sqrt(3 / (4 * math.pi))
        rng = np.random.default_rng(2)
        sh = rng.normal(0, 0.3, size=(4, 3))
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        x, y, z = d
        expect = c0 * sh[0] - c1 * y * sh[1] + c1 * z * sh[2] - c1 * x * sh[3] + 0.5
        np.testing.assert_allclose(sh_to_color(sh, d), np.clip(expect, 0, 1), atol=1e-12)

    def test_clamped(self):
        assert np.all(sh_to_color(np.full((1, 3), 100.0), [0, 0, 1]) == 1.0)


class TestActivations:
    def test_round_trip(self):
        p = np.concatenate([np.linspace(1e-6, 1 - 1e-6, 1001), [1e-6, 1 - 1e-6]])
        np.testing.assert_allclose(sigmoid(logit(p)), p, atol=1e-9)

    def test_extreme_inputs(self):
        assert sigmoid(1000.0) == 1.0 and sigmoid(-1000.0) == 0.0


def tetra():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    f = np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]])
    return Mesh(v, f)


class TestMeshSampling:
    def test_vertex_count_returns_vertices(self):
        m = tetra()
        c = sample_cloud_from_mesh(m, 4, seed=0)
        np.testing.assert_array_equal(c.positions, m.vertices)
        assert c.space == Space.CANONICAL

    def test_initial_attributes(self):
        c = sample_cloud_from_mesh(tetra(), 40, seed=1)
        assert len(c) == 40
        np.testing.assert_array_equal(c.rotations, np.tile([1.0, 0, 0, 0], (40, 1)))
        np.testing.assert_allclose(c.opacities, 0.1)
        assert np.all(c.log_scales[:, 0] == c.log_scales[:, 1])

    def test_scale_from_three_nearest(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [0, 0, 3], [10, 10, 10]], float)
        c = GaussianCloud.from_points(pts)
        np.testing.assert_allclose(np.exp(c.log_scales[0, 0]), (1 + 2 + 3) / 3)

    def test_points_inside_bbox(self):
        m = tetra()
        c = sample_cloud_from_mesh(m, 500, seed=2)
        assert np.all(c.positions >= m.vertices.min(0) - 1e-12)
        assert np.all(c.positions <= m.vertices.max(0) + 1e-12)
        # and on the surface: some coordinate is zero or they sum to one
        p = c.positions
        on = (np.abs(p).min(axis=1) < 1e-9) | (np.abs(p.sum(axis=1) - 1) < 1e-9)
        assert on.all()

    def test_fifty_thousand(self):
        from humangs.articulation import toy_biped_mesh

        mesh, _ = toy_biped_mesh(1)
        assert len(sample_cloud_from_mesh(mesh, 50_000, seed=0)) == 50_000

    def test_empty_mesh(self):
        with pytest.raises(ValueError):
            sample_cloud_from_mesh(Mesh(np.zeros((0, 3))), 10)


class TestCloud:
    def test_lengths_must_agree(self):
        with pytest.raises(ValueError):
            GaussianCloud(np.zeros((2, 3)), np.zeros((3, 4)), np.zeros((2, 3)), np.zeros(2), np.zeros((2, 1, 3)))

    def test_concat_and_subset(self):
        a = GaussianCloud.from_points(np.random.default_rng(0).normal(size=(5, 3)))
        b = GaussianCloud.from_points(np.random.default_rng(1).normal(size=(3, 3)))
        c = GaussianCloud.concat([a, b])
        assert len(c) == 8
        np.testing.assert_array_equal(c.subset(np.arange(5, 8)).positions, b.positions)

    def test_empty(self):
        for k in range(4):
            e = GaussianCloud.empty(k)
            assert len(e) == 0 and e.sh_degree == k
