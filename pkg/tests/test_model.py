"""Tests for the morphable model and coefficient vectors."""

import numpy as np
import pytest
import torch

from rogue_face.errors import InvalidArgumentError
from rogue_face.model import (
    COEFF_DIM,
    EXPRESSION,
    ILLUMINATION,
    POSE,
    SHAPE,
    TEXTURE,
    CoefficientVector,
    LossWeights,
    generate_synthetic_basis,
    morph_geometry,
    morph_texture,
    regularization_loss,
)

pytestmark = pytest.mark.unit


def test_synthetic_basis_is_deterministic():
    a = generate_synthetic_basis(500, seed=7)
    b = generate_synthetic_basis(500, seed=7)
    assert a.equals(b)
    assert not a.equals(generate_synthetic_basis(500, seed=8))


def test_synthetic_basis_dimensions(basis):
    assert basis.shape_basis.shape == (1500, 80)
    assert basis.expression_basis.shape == (1500, 64)
    assert basis.texture_basis.shape == (1500, 80)
    assert basis.landmark_indices.shape == (68,)
    assert len(set(basis.landmark_indices.tolist())) == 68
    assert basis.triangles.max() < basis.vertex_count
    assert 0.0 <= basis.mean_texture.min() and basis.mean_texture.max() <= 1.0


def test_shape_basis_is_orthonormal(basis):
    columns = basis.shape_basis
    for i in range(0, 80, 7):
        for j in range(0, 80, 5):
            dot = sum(float(a) * float(b) for a, b in zip(columns[:, i], columns[:, j]))
            assert dot == pytest.approx(1.0 if i == j else 0.0, abs=1e-9)
    np.testing.assert_allclose(columns.T @ columns, np.eye(80), atol=1e-9)


def test_expression_and_texture_norms_decay(basis):
    for matrix in (basis.expression_basis, basis.texture_basis):
        norms = np.linalg.norm(matrix, axis=0)
        assert np.all(np.diff(norms) < 0)
        gram = matrix.T @ matrix
        np.testing.assert_allclose(gram - np.diag(np.diag(gram)), 0.0, atol=1e-9)


def test_every_vertex_is_used(basis):
    assert set(np.unique(basis.triangles).tolist()) == set(range(basis.vertex_count))


def test_too_few_vertices():
    with pytest.raises(InvalidArgumentError, match="68"):
        generate_synthetic_basis(10)


def test_basis_arrays_are_read_only(basis):
    with pytest.raises(ValueError):
        basis.mean_geometry[0] = 1.0


def test_morph_zero_is_mean(basis):
    zeros = CoefficientVector.zeros()
    np.testing.assert_array_equal(morph_geometry(basis, zeros).numpy(), basis.mean_geometry)
    np.testing.assert_array_equal(morph_texture(basis, zeros).numpy(), basis.mean_texture)


@pytest.mark.parametrize("j", [0, 17, 79])
def test_morph_unit_vector_adds_column(basis, j):
    shape = np.zeros(80)
    shape[j] = 1.0
    texture = np.zeros(80)
    texture[j] = 1.0
    c = CoefficientVector.zeros().with_segments(shape=shape, texture=texture)
    np.testing.assert_allclose(
        morph_geometry(basis, c).numpy(), basis.mean_geometry + basis.shape_basis[:, j], atol=1e-12
    )
    np.testing.assert_allclose(
        morph_texture(basis, c).numpy(), basis.mean_texture + basis.texture_basis[:, j], atol=1e-12
    )


def test_morph_matches_dense_oracle(basis, rng):
    c = CoefficientVector(rng.normal(size=COEFF_DIM))
    expected = np.array(
        [
            basis.mean_geometry[r]
            + basis.shape_basis[r] @ c.shape
            + basis.expression_basis[r] @ c.expression
            for r in range(basis.mean_geometry.size)
        ]
    )
    np.testing.assert_allclose(morph_geometry(basis, c).numpy(), expected, atol=1e-10)
    expected_t = basis.mean_texture + np.array(
        [basis.texture_basis[r] @ c.texture for r in range(basis.mean_texture.size)]
    )
    np.testing.assert_allclose(morph_texture(basis, c).numpy(), expected_t, atol=1e-10)


def test_morph_is_affine(basis, rng):
    c1 = rng.normal(size=COEFF_DIM)
    c2 = rng.normal(size=COEFF_DIM)
    a, b = rng.normal(size=2)
    combined = morph_geometry(basis, a * c1 + b * c2).numpy()
    expected = (
        a * morph_geometry(basis, c1).numpy()
        + b * morph_geometry(basis, c2).numpy()
        - (a + b - 1.0) * basis.mean_geometry
    )
    np.testing.assert_allclose(combined, expected, atol=1e-9)


def test_morph_rejects_wrong_length(basis):
    with pytest.raises(InvalidArgumentError):
        morph_geometry(basis, np.zeros(256))


def test_regularization_examples():
    weights = LossWeights(w_s=1.0, w_t=0.0, w_e=0.0)
    assert float(regularization_loss(CoefficientVector.zeros(), LossWeights())) == 0.0
    shape = np.zeros(80)
    shape[3] = 1.0
    c = CoefficientVector.zeros().with_segments(shape=shape)
    assert float(regularization_loss(c, weights)) == pytest.approx(1.0, abs=1e-15)


def test_regularization_matches_scalar_loop(rng):
    weights = LossWeights()
    c = CoefficientVector(rng.normal(size=COEFF_DIM))
    expected = (
        weights.w_s * sum(x * x for x in c.shape)
        + weights.w_t * sum(x * x for x in c.texture)
        + weights.w_e * sum(x * x for x in c.expression)
    )
    assert float(regularization_loss(c, weights)) == pytest.approx(expected, rel=1e-12)


def test_regularization_sign_flip_invariant(rng):
    weights = LossWeights()
    values = rng.normal(size=COEFF_DIM)
    flipped = values.copy()
    flipped[EXPRESSION] *= -1.0
    flipped[SHAPE] *= -1.0
    assert float(regularization_loss(values, weights)) == pytest.approx(
        float(regularization_loss(flipped, weights)), rel=1e-14
    )


def test_regularization_keeps_autograd_history():
    c = CoefficientVector.zeros().tensor(requires_grad=True)
    loss = regularization_loss(c, LossWeights())
    (grad,) = torch.autograd.grad(loss, c)
    assert grad.shape == (COEFF_DIM,)


class TestCoefficientVector:
    def test_length_is_checked(self):
        with pytest.raises(InvalidArgumentError):
            CoefficientVector(np.zeros(258))

    def test_segments_partition_the_vector(self):
        values = np.arange(COEFF_DIM, dtype=float)
        c = CoefficientVector(values)
        joined = np.concatenate([c.shape, c.expression, c.texture, c.illumination, c.pose])
        np.testing.assert_array_equal(joined, values)
        assert [len(c.segment(n)) for n in ("shape", "expression", "texture", "illumination", "pose")] == [
            80,
            64,
            80,
            27,
            6,
        ]
        np.testing.assert_array_equal(c.rotation, values[251:254])
        np.testing.assert_array_equal(c.translation, values[254:257])

    def test_canonical_layout(self):
        c = CoefficientVector.canonical()
        assert c.illumination[0] == c.illumination[9] == c.illumination[18] == 2.8
        assert np.count_nonzero(c.values) == 4
        assert c.translation[2] == 4.0

    def test_values_are_immutable(self):
        c = CoefficientVector.zeros()
        with pytest.raises(ValueError):
            c.values[0] = 1.0

    def test_equality_and_hash(self):
        a = CoefficientVector.canonical()
        b = CoefficientVector(np.array(a))
        assert a == b
        assert hash(a) == hash(b)
        assert a != CoefficientVector.zeros()

    def test_unknown_segment(self):
        with pytest.raises(InvalidArgumentError):
            CoefficientVector.zeros().with_segments(albedo=np.zeros(80))

    def test_segment_width_is_checked(self):
        with pytest.raises(InvalidArgumentError):
            CoefficientVector.zeros().with_segments(pose=np.zeros(5))

    def test_slices(self):
        assert (SHAPE.start, EXPRESSION.start, TEXTURE.start, ILLUMINATION.start, POSE.start) == (
            0,
            80,
            144,
            224,
            251,
        )


class TestLossWeights:
    def test_defaults(self):
        weights = LossWeights()
        assert weights.alpha_gp == 1.92
        assert weights.alpha_p == 0.2
        assert weights.beta_o == weights.beta_n == 1.92

    @pytest.mark.parametrize("field", ["alpha_k", "beta_c", "w_t"])
    def test_negative_weight(self, field):
        with pytest.raises(InvalidArgumentError, match=field):
            LossWeights(**{field: -1.0})

    def test_nonfinite_weight(self):
        with pytest.raises(InvalidArgumentError):
            LossWeights(alpha_p=float("nan"))

    def test_zero_huber_delta(self):
        with pytest.raises(InvalidArgumentError):
            LossWeights(huber_delta=0.0)

    def test_replace(self):
        assert LossWeights().replace(beta_c=0.0).beta_c == 0.0
