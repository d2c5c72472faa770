"""Tests for shading, projection and rasterization."""

import math

import numpy as np
import pytest
import torch

from rogue_face.errors import ClippedLandmarkError, InvalidArgumentError
from rogue_face.model import CoefficientVector, morph_geometry, morph_texture
from rogue_face.render import (
    SH_C0,
    Camera,
    ProjectedVertices,
    face_bbox,
    project_landmarks,
    project_vertices,
    rasterize,
    render_face,
    sh_shade,
    triangle_coverage,
)

from tests.conftest import perturbed

pytestmark = pytest.mark.unit


def _rotation(ax, ay, az):
    rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
    ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
    rz = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def _sh_loop(n):
    x, y, z = n
    return [
        0.282095,
        0.488603 * y,
        0.488603 * z,
        0.488603 * x,
        1.092548 * x * y,
        1.092548 * y * z,
        0.315392 * (3 * z * z - 1),
        1.092548 * x * z,
        0.546274 * (x * x - y * y),
    ]


class TestCamera:
    def test_default_camera(self):
        camera = Camera.default(64)
        assert camera.focal_length == 112.0
        assert camera.principal_point == (32.0, 32.0)
        assert camera.size == (64, 64)

    def test_nonpositive_focal_length(self):
        with pytest.raises(InvalidArgumentError):
            Camera(0.0, (16, 16), 32, 32)

    def test_principal_point_outside(self):
        with pytest.raises(InvalidArgumentError):
            Camera(50.0, (40, 16), 32, 32)


class TestShShade:
    def test_band_zero_only(self, rng):
        gamma = np.zeros(27)
        gamma[[0, 9, 18]] = [2.0, 1.5, 1.0]
        albedo = np.array([0.5, 0.6, 0.7])
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        out = sh_shade(normal, albedo, gamma).numpy()
        np.testing.assert_allclose(out, albedo * np.array([2.0, 1.5, 1.0]) * 0.282095, rtol=1e-14)
        assert SH_C0 == 0.282095

    def test_black_albedo(self, rng):
        out = sh_shade(np.array([0.0, 0.0, -1.0]), np.zeros(3), rng.normal(size=27))
        assert out.tolist() == [0.0, 0.0, 0.0]

    def test_matches_scalar_loop(self, rng):
        for _ in range(10):
            normal = rng.normal(size=3)
            normal /= np.linalg.norm(normal)
            gamma = rng.uniform(-0.1, 0.1, size=27)
            gamma[[0, 9, 18]] = 2.0
            albedo = rng.uniform(0.2, 0.8, size=3)
            h = _sh_loop(normal)
            expected = [
                albedo[c] * sum(gamma[c * 9 + b] * h[b] for b in range(9)) for c in range(3)
            ]
            np.testing.assert_allclose(sh_shade(normal, albedo, gamma).numpy(), expected, atol=1e-12)

    def test_linear_in_gamma(self, rng):
        normal = np.array([0.0, 0.6, -0.8])
        albedo = np.array([0.3, 0.4, 0.5])
        g1 = np.zeros(27)
        g1[[0, 9, 18]] = 1.0
        g2 = rng.uniform(0.0, 0.1, size=27)
        lhs = sh_shade(normal, albedo, g1 + g2).numpy()
        rhs = sh_shade(normal, albedo, g1).numpy() + sh_shade(normal, albedo, g2).numpy()
        np.testing.assert_allclose(lhs, rhs, atol=1e-14)

    def test_non_unit_normal(self):
        with pytest.raises(InvalidArgumentError, match="unit"):
            sh_shade([0.0, 0.0, 2.0], [0.5, 0.5, 0.5], np.zeros(27))


class TestProjection:
    def test_optical_axis(self, camera64):
        for z in (0.5, 3.0, 40.0):
            projected = project_vertices([0.0, 0.0, z], np.zeros(6), camera64)
            assert projected.xy.numpy()[0].tolist() == [32.0, 32.0]
            assert float(projected.depth[0]) == z

    def test_perspective_division(self, camera64):
        near = project_vertices([0.3, -0.2, 2.0], np.zeros(6), camera64).xy.numpy()[0]
        far = project_vertices([0.3, -0.2, 4.0], np.zeros(6), camera64).xy.numpy()[0]
        np.testing.assert_allclose(far - 32.0, (near - 32.0) / 2.0, rtol=1e-12)

    def test_matches_homogeneous_transform(self, camera64, rng):
        vertices = rng.normal(0.0, 0.5, size=(20, 3))
        pose = np.concatenate([rng.normal(0.0, 0.3, 3), [0.1, -0.2, 5.0]])
        extrinsic = np.eye(4)
        extrinsic[:3, :3] = _rotation(*pose[:3])
        extrinsic[:3, 3] = pose[3:]
        intrinsic = np.array([[112.0, 0.0, 32.0, 0.0], [0.0, 112.0, 32.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
        homogeneous = np.hstack([vertices, np.ones((20, 1))]) @ (intrinsic @ extrinsic).T
        expected = homogeneous[:, :2] / homogeneous[:, 2:]
        projected = project_vertices(vertices.reshape(-1), pose, camera64)
        np.testing.assert_allclose(projected.xy.numpy(), expected, atol=1e-9)
        np.testing.assert_allclose(projected.depth.numpy(), homogeneous[:, 2], atol=1e-12)

    def test_clipped_vertices_are_flagged(self, camera64):
        projected = project_vertices([0.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0], np.zeros(6), camera64)
        assert projected.clipped.tolist() == [False, True, True]


def _projected(xy, depth, size):
    return ProjectedVertices(
        xy=torch.as_tensor(np.asarray(xy, dtype=float)),
        depth=torch.as_tensor(np.asarray(depth, dtype=float)),
        clipped=np.zeros(len(depth), dtype=bool),
        image_size=size,
    )


def _brute_force(tri, height, width):
    """Pixel-center point-in-triangle test with the top-left rule, one pixel at a time."""

    def edge(a, b, p):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])

    a, b, c = (tuple(float(v) for v in p) for p in tri)
    if edge(a, b, c) < 0:
        b, c = c, b
    if edge(a, b, c) == 0:
        return np.zeros((height, width), dtype=bool)

    def owned(p, q):
        dx, dy = q[0] - p[0], q[1] - p[1]
        return dy < 0 or (dy == 0 and dx > 0)

    mask = np.zeros((height, width), dtype=bool)
    for row in range(height):
        for col in range(width):
            p = (col + 0.5, row + 0.5)
            inside = True
            for s, t in ((b, c), (c, a), (a, b)):
                w = edge(s, t, p)
                if not (w > 0 or (w == 0 and owned(s, t))):
                    inside = False
                    break
            mask[row, col] = inside
    return mask


class TestRasterize:
    def test_nearest_triangle_wins(self):
        xy = [[2, 2], [30, 2], [2, 30], [4, 4], [30, 4], [4, 30]]
        depth = [2.0, 2.0, 2.0, 1.0, 1.0, 1.0]
        colors = torch.tensor([[1.0, 0, 0]] * 3 + [[0, 0, 1.0]] * 3, dtype=torch.float64)
        frame = rasterize(_projected(xy, depth, (32, 32)), [[0, 1, 2], [3, 4, 5]], colors)
        assert frame.triangle_ids[10, 10] == 1
        np.testing.assert_allclose(frame.image[10, 10], [0.0, 0.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(frame.image[2, 20], [1.0, 0.0, 0.0], atol=1e-12)
        assert frame.depth[10, 10] == pytest.approx(1.0)

    def test_order_does_not_matter(self):
        xy = [[2, 2], [30, 2], [2, 30], [4, 4], [30, 4], [4, 30]]
        depth = [1.0, 1.0, 1.0, 2.0, 2.0, 2.0]
        colors = torch.tensor([[0, 0, 1.0]] * 3 + [[1.0, 0, 0]] * 3, dtype=torch.float64)
        frame = rasterize(_projected(xy, depth, (32, 32)), [[0, 1, 2], [3, 4, 5]], colors)
        np.testing.assert_allclose(frame.image[10, 10], [0.0, 0.0, 1.0], atol=1e-12)

    def test_zero_area_triangle(self):
        xy = [[1, 1], [10, 10], [20, 20]]
        frame = rasterize(_projected(xy, [1.0] * 3, (32, 32)), [[0, 1, 2]], torch.ones(3, 3, dtype=torch.float64))
        assert frame.covered_pixels == 0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            tri = rng.uniform(-8.0, 72.0, size=(3, 2))
            ids, zbuffer = triangle_coverage(tri, np.ones(3), np.array([[0, 1, 2]]), 64, 64)
            expected = _brute_force(tri, 64, 64)
            np.testing.assert_array_equal(ids >= 0, expected)
            assert np.array_equal(np.isfinite(zbuffer), expected)

    def test_shared_edge_is_covered_once(self):
        # two triangles splitting a square along its diagonal
        xy = np.array([[4.0, 4.0], [28.0, 4.0], [28.0, 28.0], [4.0, 28.0]])
        ids, _ = triangle_coverage(xy, np.ones(4), np.array([[0, 1, 2], [0, 2, 3]]), 32, 32)
        first = _brute_force(xy[[0, 1, 2]], 32, 32)
        second = _brute_force(xy[[0, 2, 3]], 32, 32)
        assert not np.any(first & second)
        np.testing.assert_array_equal(ids >= 0, first | second)

    def test_clipped_triangle_is_dropped(self):
        projected = _projected([[2, 2], [30, 2], [2, 30]], [1.0, 1.0, 1.0], (32, 32))
        projected = projected._replace(clipped=np.array([False, True, False]))
        frame = rasterize(projected, [[0, 1, 2]], torch.ones(3, 3, dtype=torch.float64))
        assert frame.covered_pixels == 0


class TestRenderFace:
    def test_black_background_and_range(self, small_basis, camera32, known_coeffs):
        frame = render_face(small_basis, known_coeffs, camera32)
        image = frame.image
        assert frame.covered_pixels > 0
        assert np.all(image[~frame.coverage] == 0.0)
        assert image.min() >= 0.0 and image.max() <= 1.0
        assert np.array_equal(np.isfinite(frame.depth), frame.coverage)

    def test_deterministic(self, small_basis, camera32, known_coeffs):
        a = render_face(small_basis, known_coeffs, camera32)
        b = render_face(small_basis, known_coeffs, camera32)
        assert a.image.tobytes() == b.image.tobytes()
        assert np.array_equal(a.triangle_ids, b.triangle_ids)

    def test_background_composite(self, small_basis, camera32, rng):
        background = rng.uniform(size=(32, 32, 3))
        frame = render_face(small_basis, CoefficientVector.canonical(), camera32, background=background)
        np.testing.assert_array_equal(frame.image[~frame.coverage], background[~frame.coverage])

    def test_background_size_mismatch(self, small_basis, camera32):
        with pytest.raises(InvalidArgumentError):
            render_face(small_basis, CoefficientVector.canonical(), camera32, background=np.zeros((16, 16, 3)))

    def test_band_zero_lighting_oracle(self, basis, camera64):
        coeffs = CoefficientVector.canonical()
        frame = render_face(basis, coeffs, camera64)
        projected = project_vertices(morph_geometry(basis, coeffs), coeffs.pose, camera64)
        albedo = morph_texture(basis, coeffs).reshape(-1, 3)
        reference = rasterize(projected, basis.triangles, albedo)
        np.testing.assert_array_equal(reference.triangle_ids, frame.triangle_ids)
        covered = frame.coverage
        np.testing.assert_allclose(
            frame.image[covered], SH_C0 * 2.8 * reference.image[covered], atol=1e-12
        )

    def test_coverage_grows_as_face_approaches(self, basis, camera64):
        counts = []
        for tz in (6.0, 5.0, 4.0, 3.5):
            translation = np.array([0.0, 0.0, tz])
            coeffs = CoefficientVector.canonical().with_segments(pose=np.concatenate([np.zeros(3), translation]))
            counts.append(render_face(basis, coeffs, camera64).covered_pixels)
        assert counts == sorted(counts)
        assert counts[0] < counts[-1]

    def test_face_bbox(self, small_basis, camera32):
        frame = render_face(small_basis, CoefficientVector.canonical(), camera32)
        x0, y0, x1, y1 = face_bbox(frame.coverage)
        rows, cols = np.nonzero(frame.coverage)
        assert (x0, y0, x1, y1) == (cols.min(), rows.min(), cols.max() + 1, rows.max() + 1)

    def test_face_bbox_empty(self):
        with pytest.raises(InvalidArgumentError):
            face_bbox(np.zeros((4, 4), dtype=bool))


class TestLandmarks:
    def test_texture_does_not_move_landmarks(self, small_basis, camera32, rng):
        a = perturbed(1)
        b = a.with_segments(texture=rng.normal(size=80))
        np.testing.assert_array_equal(
            project_landmarks(small_basis, a, camera32).numpy(),
            project_landmarks(small_basis, b, camera32).numpy(),
        )

    def test_subselection_of_projected_vertices(self, small_basis, camera32):
        c = perturbed(2)
        projected = project_vertices(morph_geometry(small_basis, c), c.pose, camera32)
        landmarks = project_landmarks(small_basis, c, camera32).numpy()
        np.testing.assert_array_equal(landmarks, projected.xy.numpy()[small_basis.landmark_indices])
        assert landmarks.shape == (68, 2)

    def test_clipped_landmark(self, small_basis, camera32):
        coeffs = CoefficientVector.canonical().with_segments(pose=np.array([0, 0, 0, 0, 0, -5.0]))
        with pytest.raises(ClippedLandmarkError) as info:
            project_landmarks(small_basis, coeffs, camera32)
        assert info.value.landmark == 0
        assert info.value.vertex == small_basis.landmark_indices[0]
