"""Image formation: SH Lambertian shading, pinhole projection and z-buffered rasterization.

Rasterization is split in two passes, the way mesh renderers built on top of
autograd usually are. A numpy pass decides which triangle owns each pixel
(nearest interpolated depth, pixel centers at ``(i + 0.5, j + 0.5)``, top-left
fill rule). A torch pass then recomputes perspective-correct barycentric
weights for the owned pixels from the projected vertex positions, so gradients
flow through projection, shading and interpolation while coverage stays frozen.
"""

import dataclasses
import math
import typing as ty

import numpy as np
import torch

from .errors import ClippedLandmarkError, InvalidArgumentError
from .model import (
    DTYPE,
    ILLUMINATION,
    LANDMARK_COUNT,
    POSE,
    SH_BANDS,
    CoeffLike,
    MorphableBasis,
    as_coefficient_tensor,
    morph_geometry,
    morph_texture,
)

NEAR_PLANE = 1e-4

SH_C0 = 0.282095
SH_C1 = 0.488603
SH_C2 = 1.092548
SH_C3 = 0.315392
SH_C4 = 0.546274


@dataclasses.dataclass(frozen=True)
class Camera:
    """Pinhole camera looking down +z; image y grows downward."""

    focal_length: float
    principal_point: ty.Tuple[float, float]
    image_width: int
    image_height: int

    def __post_init__(self):
        if not self.focal_length > 0:
            raise InvalidArgumentError(f"focal_length must be > 0, got {self.focal_length}")
        if self.image_width <= 0 or self.image_height <= 0:
            raise InvalidArgumentError("image dimensions must be positive")
        cx, cy = self.principal_point
        if not (0 <= cx <= self.image_width and 0 <= cy <= self.image_height):
            raise InvalidArgumentError(
                f"principal point {self.principal_point} lies outside the image"
            )
        object.__setattr__(self, "principal_point", (float(cx), float(cy)))

    @classmethod
    def default(cls, width: int = 64, height: ty.Optional[int] = None) -> "Camera":
        """Face-filling camera for the synthetic proxy at the canonical depth."""
        height = width if height is None else height
        return cls(1.75 * width, (width / 2.0, height / 2.0), width, height)

    @property
    def size(self) -> ty.Tuple[int, int]:
        """(height, width)"""
        return self.image_height, self.image_width


@dataclasses.dataclass
class RenderedFrame:
    """One render pass: RGB in [0, 1], coverage mask and depth buffer.

    ``rgb`` keeps its autograd history; ``coverage``, ``depth`` and
    ``triangle_ids`` are plain arrays.
    """

    rgb: torch.Tensor
    coverage: np.ndarray
    depth: np.ndarray
    triangle_ids: np.ndarray

    @property
    def image(self) -> np.ndarray:
        return self.rgb.detach().cpu().numpy()

    @property
    def covered_pixels(self) -> int:
        return int(self.coverage.sum())


class LandmarkSet:
    """68 projected landmark positions in pixel coordinates."""

    __slots__ = ("points",)

    def __init__(self, points: ty.Union[torch.Tensor, np.ndarray, ty.Sequence]):
        if not isinstance(points, torch.Tensor):
            points = torch.as_tensor(np.asarray(points, dtype=np.float64))
        if points.shape != (LANDMARK_COUNT, 2):
            raise InvalidArgumentError(
                f"LandmarkSet needs shape ({LANDMARK_COUNT}, 2), got {tuple(points.shape)}"
            )
        if not torch.isfinite(points.detach()).all():
            raise InvalidArgumentError("Landmark coordinates must be finite")
        self.points = points

    def numpy(self) -> np.ndarray:
        return self.points.detach().cpu().numpy()

    def __len__(self) -> int:
        return LANDMARK_COUNT


class ProjectedVertices(ty.NamedTuple):
    xy: torch.Tensor  # (N, 2) pixels
    depth: torch.Tensor  # (N,) camera-space Z
    clipped: np.ndarray  # (N,) bool, Z <= NEAR_PLANE
    image_size: ty.Tuple[int, int]  # (height, width)


def sh_basis(normals: torch.Tensor) -> torch.Tensor:
    """The 9 real SH functions of the first three bands, evaluated per normal."""
    x, y, z = normals[..., 0], normals[..., 1], normals[..., 2]
    return torch.stack(
        [
            torch.full_like(x, SH_C0),
            SH_C1 * y,
            SH_C1 * z,
            SH_C1 * x,
            SH_C2 * x * y,
            SH_C2 * y * z,
            SH_C3 * (3.0 * z * z - 1.0),
            SH_C2 * x * z,
            SH_C4 * (x * x - y * y),
        ],
        dim=-1,
    )


def _shade(normals: torch.Tensor, albedo: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
    # gamma is channel-major: gamma[c * 9 + b]
    irradiance = sh_basis(normals) @ gamma.reshape(3, SH_BANDS).T
    return torch.clamp(albedo * irradiance, 0.0, 1.0)


def sh_shade(normal, albedo, gamma) -> torch.Tensor:
    """Lambertian SH shading of one surface point; returns a clamped RGB triple."""
    normal = torch.as_tensor(normal, dtype=DTYPE)
    albedo = torch.as_tensor(albedo, dtype=DTYPE)
    gamma = torch.as_tensor(gamma, dtype=DTYPE)
    if normal.shape != (3,) or albedo.shape != (3,) or gamma.numel() != 3 * SH_BANDS:
        raise InvalidArgumentError("sh_shade expects a 3-vector, an RGB triple and 27 gammas")
    if abs(float(torch.linalg.norm(normal.detach())) - 1.0) > 1e-6:
        raise InvalidArgumentError("normal must have unit length")
    return _shade(normal, albedo, gamma.reshape(-1))


def rotation_matrix(angles: torch.Tensor) -> torch.Tensor:
    """Euler XYZ rotation: rotate about x, then y, then z (R = Rz Ry Rx)."""
    ax, ay, az = angles[0], angles[1], angles[2]
    one = torch.ones((), dtype=angles.dtype)
    zero = torch.zeros((), dtype=angles.dtype)
    cx, sx = torch.cos(ax), torch.sin(ax)
    cy, sy = torch.cos(ay), torch.sin(ay)
    cz, sz = torch.cos(az), torch.sin(az)
    rx = torch.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx]).reshape(3, 3)
    ry = torch.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy]).reshape(3, 3)
    rz = torch.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one]).reshape(3, 3)
    return rz @ ry @ rx


def to_camera_space(geometry: torch.Tensor, pose: torch.Tensor) -> torch.Tensor:
    """Rotate then translate flat geometry; returns (N, 3)."""
    vertices = geometry.reshape(-1, 3)
    return vertices @ rotation_matrix(pose[:3]).T + pose[3:6]


def _perspective(points: torch.Tensor, camera: Camera) -> ProjectedVertices:
    z = points[:, 2]
    clipped = (z.detach() <= NEAR_PLANE).cpu().numpy()
    safe_z = torch.where(z > NEAR_PLANE, z, torch.ones_like(z))
    cx, cy = camera.principal_point
    xy = torch.stack(
        [
            camera.focal_length * points[:, 0] / safe_z + cx,
            camera.focal_length * points[:, 1] / safe_z + cy,
        ],
        dim=1,
    )
    return ProjectedVertices(xy=xy, depth=z, clipped=clipped, image_size=camera.size)


def project_vertices(geometry, pose, camera: Camera) -> ProjectedVertices:
    """Full-perspective projection of flat geometry under a 6-DoF pose.

    Vertices at or behind the near plane are flagged in ``clipped``; their pixel
    coordinates are meaningless.
    """
    geometry = torch.as_tensor(geometry, dtype=DTYPE)
    pose = torch.as_tensor(pose, dtype=DTYPE)
    if geometry.numel() % 3 or pose.shape != (6,):
        raise InvalidArgumentError("geometry must be flat 3N and pose must have 6 values")
    return _perspective(to_camera_space(geometry, pose), camera)


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _owned(ax, ay, bx, by):
    """Top-left ownership of edge a->b for positively oriented triangles."""
    dx = bx - ax
    dy = by - ay
    return (dy < 0) | ((dy == 0) & (dx > 0))


def _covers(w, owned):
    return (w > 0) | ((w == 0) & owned)


def triangle_coverage(
    xy: np.ndarray,
    depth: np.ndarray,
    triangles: np.ndarray,
    height: int,
    width: int,
    keep: ty.Optional[np.ndarray] = None,
) -> ty.Tuple[np.ndarray, np.ndarray]:
    """Z-buffered triangle ownership per pixel.

    Returns ``(triangle_ids, depth_buffer)``: the index of the nearest covering
    triangle (or -1) and its perspective-correct depth (or +inf). Depth ties go
    to the lower triangle index.
    """
    triangle_ids = np.full((height, width), -1, dtype=np.int64)
    zbuffer = np.full((height, width), np.inf)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    candidates = np.arange(triangles.shape[0])
    if keep is not None:
        candidates = candidates[keep]
    if candidates.size == 0:
        return triangle_ids, zbuffer

    p = xy[triangles[candidates]]  # (T, 3, 2)
    z = depth[triangles[candidates]]  # (T, 3)
    area = _edge(p[:, 0, 0], p[:, 0, 1], p[:, 1, 0], p[:, 1, 1], p[:, 2, 0], p[:, 2, 1])
    flip = area < 0
    p[flip] = p[flip][:, [0, 2, 1]]
    z[flip] = z[flip][:, [0, 2, 1]]
    area = np.abs(area)

    with np.errstate(invalid="ignore"):
        c0 = np.ceil(p[:, :, 0].min(axis=1) - 0.5)
        c1 = np.floor(p[:, :, 0].max(axis=1) - 0.5)
        r0 = np.ceil(p[:, :, 1].min(axis=1) - 0.5)
        r1 = np.floor(p[:, :, 1].max(axis=1) - 0.5)
    c0 = np.clip(c0, 0, width)
    c1 = np.clip(c1, -1, width - 1)
    r0 = np.clip(r0, 0, height)
    r1 = np.clip(r1, -1, height - 1)
    live = (area > 0) & np.isfinite(area) & (c1 >= c0) & (r1 >= r0)
    if not live.any():
        return triangle_ids, zbuffer
    candidates, p, z, area = candidates[live], p[live], z[live], area[live]
    c0, c1, r0, r1 = (a[live].astype(np.int64) for a in (c0, c1, r0, r1))

    kx = int((c1 - c0).max()) + 1
    ky = int((r1 - r0).max()) + 1
    cols = c0[:, None, None] + np.arange(kx)[None, None, :]
    rows = r0[:, None, None] + np.arange(ky)[None, :, None]
    in_box = (cols <= c1[:, None, None]) & (rows <= r1[:, None, None])
    px = cols + 0.5
    py = rows + 0.5

    v = [(p[:, i, 0][:, None, None], p[:, i, 1][:, None, None]) for i in range(3)]
    w0 = _edge(*v[1], *v[2], px, py)
    w1 = _edge(*v[2], *v[0], px, py)
    w2 = _edge(*v[0], *v[1], px, py)
    inside = (
        in_box
        & _covers(w0, _owned(*v[1], *v[2]))
        & _covers(w1, _owned(*v[2], *v[0]))
        & _covers(w2, _owned(*v[0], *v[1]))
    )
    t, iy, ix = np.nonzero(inside)
    if t.size == 0:
        return triangle_ids, zbuffer

    inv_depth = (
        w0[t, iy, ix] / z[t, 0] + w1[t, iy, ix] / z[t, 1] + w2[t, iy, ix] / z[t, 2]
    ) / area[t]
    pixel_depth = 1.0 / inv_depth
    pixel = (rows[t, iy, 0]) * width + cols[t, 0, ix]
    owner = candidates[t]

    order = np.lexsort((owner, pixel_depth, pixel))
    pixel, pixel_depth, owner = pixel[order], pixel_depth[order], owner[order]
    first = np.ones(pixel.size, dtype=bool)
    first[1:] = pixel[1:] != pixel[:-1]
    triangle_ids.reshape(-1)[pixel[first]] = owner[first]
    zbuffer.reshape(-1)[pixel[first]] = pixel_depth[first]
    return triangle_ids, zbuffer


def _background_tensor(background, height: int, width: int) -> torch.Tensor:
    if background is None:
        return torch.zeros((height, width, 3), dtype=DTYPE)
    background = torch.as_tensor(
        background.detach() if isinstance(background, torch.Tensor) else np.asarray(background),
        dtype=DTYPE,
    )
    if background.shape != (height, width, 3):
        raise InvalidArgumentError(
            f"background must have shape {(height, width, 3)}, got {tuple(background.shape)}"
        )
    return background


def rasterize(
    projected: ProjectedVertices,
    triangles,
    colors: torch.Tensor,
    background=None,
) -> RenderedFrame:
    """Rasterize per-vertex colors with a z-buffer.

    Triangles with any clipped vertex are dropped. Uncovered pixels take the
    background (black when none is given).
    """
    height, width = projected.image_size
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    colors = torch.as_tensor(colors, dtype=DTYPE)
    keep = ~projected.clipped[triangles].any(axis=1) if triangles.size else None

    xy_np = projected.xy.detach().cpu().numpy()
    depth_np = projected.depth.detach().cpu().numpy()
    triangle_ids, zbuffer = triangle_coverage(
        xy_np, depth_np, triangles, height, width, keep=keep
    )
    coverage = triangle_ids >= 0

    rgb = _background_tensor(background, height, width).reshape(-1, 3)
    pixels = np.flatnonzero(coverage)
    if pixels.size:
        owned = torch.as_tensor(triangles[triangle_ids.reshape(-1)[pixels]])
        centers = torch.as_tensor(
            np.stack([pixels % width + 0.5, pixels // width + 0.5], axis=1), dtype=DTYPE
        )
        a, b, c = (projected.xy[owned[:, i]] for i in range(3))
        za, zb, zc = (projected.depth[owned[:, i]] for i in range(3))
        px, py = centers[:, 0], centers[:, 1]
        area = _edge(a[:, 0], a[:, 1], b[:, 0], b[:, 1], c[:, 0], c[:, 1])
        la = _edge(b[:, 0], b[:, 1], c[:, 0], c[:, 1], px, py) / area
        lb = _edge(c[:, 0], c[:, 1], a[:, 0], a[:, 1], px, py) / area
        lc = _edge(a[:, 0], a[:, 1], b[:, 0], b[:, 1], px, py) / area
        weights = torch.stack([la / za, lb / zb, lc / zc], dim=1)
        weights = weights / weights.sum(dim=1, keepdim=True)
        vertex_colors = colors[owned]  # (M, 3 vertices, 3 channels)
        pixel_colors = (weights[:, :, None] * vertex_colors).sum(dim=1)
        rgb = rgb.index_put((torch.as_tensor(pixels),), pixel_colors)

    return RenderedFrame(
        rgb=rgb.reshape(height, width, 3),
        coverage=coverage,
        depth=zbuffer,
        triangle_ids=triangle_ids,
    )


def vertex_normals(vertices: torch.Tensor, triangles: torch.Tensor) -> torch.Tensor:
    """Area-weighted average of adjacent face normals, normalized per vertex."""
    v0, v1, v2 = (vertices[triangles[:, i]] for i in range(3))
    face_normals = torch.linalg.cross(v1 - v0, v2 - v0)
    normals = torch.zeros_like(vertices)
    for i in range(3):
        normals = normals.index_add(0, triangles[:, i], face_normals)
    length = torch.linalg.norm(normals, dim=1, keepdim=True)
    return normals / torch.clamp(length, min=1e-12)


def render_face(
    basis: MorphableBasis, coeffs: CoeffLike, camera: Camera, background=None
) -> RenderedFrame:
    """Morph, shade, project and rasterize one face; composite over ``background``."""
    height, width = camera.size
    _background_tensor(background, height, width)
    c = as_coefficient_tensor(coeffs)
    if not torch.isfinite(c.detach()).all():
        raise InvalidArgumentError("coefficients must be finite to render")
    vertices = to_camera_space(morph_geometry(basis, c), c[POSE])
    normals = vertex_normals(vertices, basis.tensors.triangles)
    albedo = torch.clamp(morph_texture(basis, c).reshape(-1, 3), 0.0, 1.0)
    colors = _shade(normals, albedo, c[ILLUMINATION])
    projected = _perspective(vertices, camera)
    return rasterize(projected, basis.triangles, colors, background=background)


def project_landmarks(basis: MorphableBasis, coeffs: CoeffLike, camera: Camera) -> LandmarkSet:
    """Pixel positions of the 68 landmark vertices."""
    c = as_coefficient_tensor(coeffs)
    projected = project_vertices(morph_geometry(basis, c), c[POSE], camera)
    clipped = projected.clipped[basis.landmark_indices]
    if clipped.any():
        landmark = int(np.flatnonzero(clipped)[0])
        raise ClippedLandmarkError(landmark, int(basis.landmark_indices[landmark]))
    return LandmarkSet(projected.xy[basis.tensors.landmark_indices])


def face_bbox(coverage: np.ndarray) -> ty.Tuple[int, int, int, int]:
    """Tight (x0, y0, x1, y1) box around covered pixels, exclusive of x1/y1."""
    rows = np.flatnonzero(coverage.any(axis=1))
    cols = np.flatnonzero(coverage.any(axis=0))
    if rows.size == 0:
        raise InvalidArgumentError("coverage is empty; no face bounding box")
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def frame_rmse(frame: RenderedFrame, target) -> float:
    """Root mean squared per-channel error over the covered pixels."""
    target = np.asarray(target, dtype=np.float64)
    if not frame.coverage.any():
        return math.inf
    diff = frame.image[frame.coverage] - target[frame.coverage]
    return float(np.sqrt(np.mean(diff**2)))
