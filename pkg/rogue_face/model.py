"""Linear morphable face model: bases, coefficient vectors and the coefficient prior.

A face instance is described by a 257-dimensional coefficient vector split into
shape (80), expression (64), texture (80), illumination (27 = 9 SH bands x 3
channels) and pose (3 Euler angles in radians, 3 translations in model units).
Geometry and texture are flat vectors of length 3N laid out per vertex as
``[x0, y0, z0, x1, ...]`` and ``[r0, g0, b0, r1, ...]``.
"""

import dataclasses
import functools
import math
import typing as ty

import numpy as np
import torch

from .errors import InvalidArgumentError

DTYPE = torch.float64

SHAPE_DIM = 80
EXPRESSION_DIM = 64
TEXTURE_DIM = 80
ILLUMINATION_DIM = 27
POSE_DIM = 6
COEFF_DIM = SHAPE_DIM + EXPRESSION_DIM + TEXTURE_DIM + ILLUMINATION_DIM + POSE_DIM

SHAPE = slice(0, 80)
EXPRESSION = slice(80, 144)
TEXTURE = slice(144, 224)
ILLUMINATION = slice(224, 251)
POSE = slice(251, 257)
ROTATION = slice(251, 254)
TRANSLATION = slice(254, 257)

SEGMENTS: ty.Dict[str, slice] = {
    "shape": SHAPE,
    "expression": EXPRESSION,
    "texture": TEXTURE,
    "illumination": ILLUMINATION,
    "pose": POSE,
}

LANDMARK_COUNT = 68
SH_BANDS = 9

# camera-space depth that puts the synthetic face proxy in frame
CANONICAL_DEPTH = 4.0
# band-0 irradiance per channel; 0.282095 * 2.8 ~ 0.79 ambient gain
CANONICAL_AMBIENT = 2.8

CoeffLike = ty.Union["CoefficientVector", torch.Tensor, np.ndarray, ty.Sequence[float]]


@dataclasses.dataclass(frozen=True)
class LossWeights:
    """Weights of the guidance and robustification objectives and of the prior."""

    alpha_k: float = 1.6e-3
    alpha_gp: float = 1.92
    alpha_p: float = 0.2
    alpha_r: float = 3e-4
    beta_o: float = 1.92
    beta_n: float = 1.92
    beta_c: float = 1e-3
    w_s: float = 1.0
    w_t: float = 1.7e-3
    w_e: float = 0.8
    huber_delta: float = 1.0

    def __post_init__(self):
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if not math.isfinite(value) or value < 0:
                raise InvalidArgumentError(
                    f"Loss weight {field.name} must be finite and nonnegative, got {value}"
                )
        if self.huber_delta <= 0:
            raise InvalidArgumentError(
                f"huber_delta must be positive, got {self.huber_delta}"
            )

    def replace(self, **changes: float) -> "LossWeights":
        return dataclasses.replace(self, **changes)


class CoefficientVector:
    """Immutable 257-dimensional face parameter vector."""

    __slots__ = ("_values",)

    def __init__(self, values: ty.Union[np.ndarray, ty.Sequence[float], torch.Tensor]):
        if isinstance(values, torch.Tensor):
            values = values.detach().cpu().numpy()
        array = np.array(values, dtype=np.float64).reshape(-1)
        if array.shape != (COEFF_DIM,):
            raise InvalidArgumentError(
                f"Coefficient vector must have {COEFF_DIM} values, got {array.size}"
            )
        array.setflags(write=False)
        self._values = array

    @classmethod
    def zeros(cls) -> "CoefficientVector":
        return cls(np.zeros(COEFF_DIM))

    @classmethod
    def canonical(cls) -> "CoefficientVector":
        """Zero identity with ambient lighting and the face-filling translation."""
        values = np.zeros(COEFF_DIM)
        values[ILLUMINATION.start :: SH_BANDS][:3] = CANONICAL_AMBIENT
        values[TRANSLATION.start + 2] = CANONICAL_DEPTH
        return cls(values)

    @classmethod
    def from_segments(cls, base: ty.Optional["CoefficientVector"] = None, **segments):
        values = np.zeros(COEFF_DIM) if base is None else base.values.copy()
        for name, segment_values in segments.items():
            if name not in SEGMENTS:
                raise InvalidArgumentError(f"Unknown coefficient segment: {name}")
            sl = SEGMENTS[name]
            segment_values = np.asarray(segment_values, dtype=np.float64).reshape(-1)
            if segment_values.size != sl.stop - sl.start:
                raise InvalidArgumentError(
                    f"Segment {name} needs {sl.stop - sl.start} values, "
                    f"got {segment_values.size}"
                )
            values[sl] = segment_values
        return cls(values)

    def with_segments(self, **segments) -> "CoefficientVector":
        return CoefficientVector.from_segments(self, **segments)

    @property
    def values(self) -> np.ndarray:
        return self._values

    def segment(self, name: str) -> np.ndarray:
        return self._values[SEGMENTS[name]]

    shape = property(lambda self: self._values[SHAPE])
    expression = property(lambda self: self._values[EXPRESSION])
    texture = property(lambda self: self._values[TEXTURE])
    illumination = property(lambda self: self._values[ILLUMINATION])
    pose = property(lambda self: self._values[POSE])
    rotation = property(lambda self: self._values[ROTATION])
    translation = property(lambda self: self._values[TRANSLATION])

    def tensor(self, requires_grad: bool = False) -> torch.Tensor:
        return torch.tensor(self._values, dtype=DTYPE, requires_grad=requires_grad)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self._values)))

    def __len__(self) -> int:
        return COEFF_DIM

    def __array__(self, dtype=None, copy=None):
        return self._values.astype(dtype) if dtype is not None else self._values.copy()

    def __eq__(self, other) -> bool:
        if not isinstance(other, CoefficientVector):
            return NotImplemented
        return bool(np.array_equal(self._values, other._values))

    def __hash__(self) -> int:
        return hash(self._values.tobytes())

    def __repr__(self) -> str:
        return (
            f"CoefficientVector(|s|={np.linalg.norm(self.shape):.4g}, "
            f"|e|={np.linalg.norm(self.expression):.4g}, "
            f"|t|={np.linalg.norm(self.texture):.4g}, pose={np.round(self.pose, 4).tolist()})"
        )


def as_coefficient_tensor(coeffs: CoeffLike) -> torch.Tensor:
    """Return ``coeffs`` as a float64 tensor of length 257, keeping autograd history."""
    if isinstance(coeffs, CoefficientVector):
        return coeffs.tensor()
    if isinstance(coeffs, torch.Tensor):
        tensor = coeffs if coeffs.dtype == DTYPE else coeffs.to(DTYPE)
    else:
        tensor = torch.as_tensor(np.asarray(coeffs, dtype=np.float64))
    if tensor.shape != (COEFF_DIM,):
        raise InvalidArgumentError(
            f"Coefficient vector must have shape ({COEFF_DIM},), got {tuple(tensor.shape)}"
        )
    return tensor


class _BasisTensors(ty.NamedTuple):
    mean_geometry: torch.Tensor
    mean_texture: torch.Tensor
    shape_basis: torch.Tensor
    expression_basis: torch.Tensor
    texture_basis: torch.Tensor
    triangles: torch.Tensor
    landmark_indices: torch.Tensor


@dataclasses.dataclass(frozen=True, eq=False)
class MorphableBasis:
    """Mean geometry/texture, PCA bases, topology and landmark vertices."""

    vertex_count: int
    mean_geometry: np.ndarray
    mean_texture: np.ndarray
    shape_basis: np.ndarray
    expression_basis: np.ndarray
    texture_basis: np.ndarray
    triangles: np.ndarray
    landmark_indices: np.ndarray
    basis_seed: int = 0

    def __post_init__(self):
        n3 = 3 * self.vertex_count
        if self.vertex_count <= 0:
            raise InvalidArgumentError("vertex_count must be positive")
        expected = {
            "mean_geometry": (n3,),
            "mean_texture": (n3,),
            "shape_basis": (n3, SHAPE_DIM),
            "expression_basis": (n3, EXPRESSION_DIM),
            "texture_basis": (n3, TEXTURE_DIM),
        }
        for name, shape in expected.items():
            array = np.asarray(getattr(self, name), dtype=np.float64)
            if array.shape != shape:
                raise InvalidArgumentError(
                    f"{name} must have shape {shape}, got {array.shape}"
                )
            array.setflags(write=False)
            object.__setattr__(self, name, array)

        triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        landmarks = np.asarray(self.landmark_indices, dtype=np.int64).reshape(-1)
        if landmarks.size != LANDMARK_COUNT:
            raise InvalidArgumentError(
                f"Expected {LANDMARK_COUNT} landmark indices, got {landmarks.size}"
            )
        for name, indices in (("triangle", triangles), ("landmark", landmarks)):
            if indices.size and (indices.min() < 0 or indices.max() >= self.vertex_count):
                raise InvalidArgumentError(
                    f"Every {name} index must lie in [0, {self.vertex_count})"
                )
        if self.mean_texture.min() < 0 or self.mean_texture.max() > 1:
            raise InvalidArgumentError("mean_texture components must lie in [0, 1]")
        triangles.setflags(write=False)
        landmarks.setflags(write=False)
        object.__setattr__(self, "triangles", triangles)
        object.__setattr__(self, "landmark_indices", landmarks)

    @property
    def triangle_count(self) -> int:
        return int(self.triangles.shape[0])

    @functools.cached_property
    def tensors(self) -> _BasisTensors:
        """Torch views of the basis arrays, built once per basis."""
        return _BasisTensors(
            mean_geometry=torch.as_tensor(self.mean_geometry, dtype=DTYPE),
            mean_texture=torch.as_tensor(self.mean_texture, dtype=DTYPE),
            shape_basis=torch.as_tensor(self.shape_basis, dtype=DTYPE),
            expression_basis=torch.as_tensor(self.expression_basis, dtype=DTYPE),
            texture_basis=torch.as_tensor(self.texture_basis, dtype=DTYPE),
            triangles=torch.as_tensor(self.triangles, dtype=torch.long),
            landmark_indices=torch.as_tensor(self.landmark_indices, dtype=torch.long),
        )

    def equals(self, other: "MorphableBasis") -> bool:
        """Bit-level equality of every field."""
        return self.vertex_count == other.vertex_count and all(
            np.array_equal(getattr(self, f.name), getattr(other, f.name))
            for f in dataclasses.fields(self)
        )


def _grid_topology(vertex_count: int) -> ty.Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lay ``vertex_count`` vertices on a row-major grid; return (u, v, triangles).

    The last row may be partial; it is stitched to the row above so every vertex
    belongs to at least one triangle.
    """
    cols = int(math.ceil(math.sqrt(vertex_count)))
    full_rows, remainder = divmod(vertex_count, cols)
    rows = full_rows + (1 if remainder else 0)

    index = np.arange(vertex_count)
    row, col = np.divmod(index, cols)
    u = 2.0 * col / (cols - 1) - 1.0
    v = 2.0 * row / max(rows - 1, 1) - 1.0

    triangles = []

    def quad(a: int, b: int, d: int, e: int):
        triangles.append((a, d, b))
        triangles.append((b, d, e))

    for r in range(full_rows - 1):
        for c in range(cols - 1):
            a = r * cols + c
            quad(a, a + 1, a + cols, a + cols + 1)
    if remainder:
        top = (full_rows - 1) * cols
        bottom = full_rows * cols
        for c in range(remainder - 1):
            quad(top + c, top + c + 1, bottom + c, bottom + c + 1)
        c = remainder - 1
        triangles.append((top + c, bottom + c, top + c + 1))
    return u, v, np.asarray(triangles, dtype=np.int64)


def _smooth_fields(
    rng: np.random.Generator, u: np.ndarray, v: np.ndarray, columns: int
) -> np.ndarray:
    """Random low-frequency fields over the face grid, one per column.

    Later columns use higher spatial frequencies, so after orthogonalization the
    leading columns stay the smoothest.
    """
    n = u.shape[0]
    fields = np.empty((3 * n, columns))
    for k in range(columns):
        band = 0.5 + 2.5 * k / max(columns - 1, 1)
        field = np.zeros((n, 3))
        for _ in range(4):
            fu, fv = rng.normal(0.0, band, size=2)
            phase = rng.uniform(0.0, 2.0 * math.pi, size=3)
            amplitude = rng.normal(0.0, 1.0, size=3)
            field += amplitude * np.cos(math.pi * (fu * u + fv * v)[:, None] + phase)
        fields[:, k] = field.reshape(-1)
    return fields


def _orthonormal(fields: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(fields)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def generate_synthetic_basis(vertex_count: int = 500, seed: int = 0) -> MorphableBasis:
    """Build a deterministic synthetic morphable model.

    The mean geometry is the front of an ellipsoid facing the camera (toward -z),
    the shape basis has orthonormal columns, and the expression and texture
    bases have orthogonal columns with decaying norms.
    """
    if vertex_count < LANDMARK_COUNT:
        raise InvalidArgumentError(
            f"vertex_count must be at least {LANDMARK_COUNT} to host "
            f"{LANDMARK_COUNT} distinct landmarks, got {vertex_count}"
        )
    rng = np.random.default_rng(seed)
    u, v, triangles = _grid_topology(vertex_count)

    theta = 1.2 * u
    phi = 1.2 * v
    geometry = np.stack(
        [
            0.8 * np.cos(phi) * np.sin(theta),
            1.0 * np.sin(phi),
            -0.6 * np.cos(phi) * np.cos(theta),
        ],
        axis=1,
    )

    skin = np.array([0.72, 0.55, 0.45])
    shading = 0.08 * np.cos(math.pi * u)[:, None] * np.cos(0.5 * math.pi * v)[:, None]
    texture = np.clip(skin + shading + 0.02 * rng.normal(size=(vertex_count, 3)), 0.0, 1.0)

    n3 = 3 * vertex_count
    shape_basis = _orthonormal(_smooth_fields(rng, u, v, SHAPE_DIM))
    decay_e = 0.05 * math.sqrt(n3) / np.sqrt(np.arange(1, EXPRESSION_DIM + 1))
    expression_basis = _orthonormal(_smooth_fields(rng, u, v, EXPRESSION_DIM)) * decay_e
    decay_t = 0.08 * math.sqrt(n3) / np.sqrt(np.arange(1, TEXTURE_DIM + 1))
    texture_basis = _orthonormal(_smooth_fields(rng, u, v, TEXTURE_DIM)) * decay_t

    landmarks = np.round(np.linspace(0, vertex_count - 1, LANDMARK_COUNT)).astype(np.int64)

    return MorphableBasis(
        vertex_count=vertex_count,
        mean_geometry=geometry.reshape(-1),
        mean_texture=texture.reshape(-1),
        shape_basis=shape_basis,
        expression_basis=expression_basis,
        texture_basis=texture_basis,
        triangles=triangles,
        landmark_indices=landmarks,
        basis_seed=seed,
    )


def morph_geometry(basis: MorphableBasis, coeffs: CoeffLike) -> torch.Tensor:
    """Return ``mean_geometry + B_s s + B_e e`` as a flat tensor of length 3N."""
    c = as_coefficient_tensor(coeffs)
    t = basis.tensors
    return t.mean_geometry + t.shape_basis @ c[SHAPE] + t.expression_basis @ c[EXPRESSION]


def morph_texture(basis: MorphableBasis, coeffs: CoeffLike) -> torch.Tensor:
    """Return the raw (unclamped) albedo ``mean_texture + B_t t``."""
    c = as_coefficient_tensor(coeffs)
    t = basis.tensors
    return t.mean_texture + t.texture_basis @ c[TEXTURE]


def regularization_loss(coeffs: CoeffLike, weights: LossWeights) -> torch.Tensor:
    """Gaussian prior on identity coefficients: w_s|s|^2 + w_t|t|^2 + w_e|e|^2."""
    c = as_coefficient_tensor(coeffs)
    return (
        weights.w_s * torch.sum(c[SHAPE] ** 2)
        + weights.w_t * torch.sum(c[TEXTURE] ** 2)
        + weights.w_e * torch.sum(c[EXPRESSION] ** 2)
    )
