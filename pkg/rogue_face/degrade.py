"""Synthetic degradations and triplet datasets.

A triplet is a clean guiding image, an occluded variant and a noisy variant of
one face. Datasets mirror the evaluation layout of ``identities`` subjects with
one clean reference and ``per_identity`` degraded samples each.
"""

import concurrent.futures
import dataclasses
import logging
import math
import os
import pathlib
import typing as ty

import numpy as np

from .config import NOISE_KINDS, OCCLUSION_SHAPES, DatasetConfig
from .errors import FormatError, InvalidArgumentError
from .fileio import (
    dump_json,
    read_coefficients,
    read_image,
    read_json,
    read_mask,
    write_coefficients,
    write_image,
    write_mask,
)
from .model import (
    EXPRESSION_DIM,
    ILLUMINATION_DIM,
    SHAPE_DIM,
    TEXTURE_DIM,
    CoefficientVector,
    MorphableBasis,
)
from .render import Camera, LandmarkSet, face_bbox, project_landmarks, render_face

LOG = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

BBox = ty.Tuple[int, int, int, int]


@dataclasses.dataclass(frozen=True)
class OcclusionSpec:
    """An occluder covering ``coverage`` of the face bounding box.

    ``color`` is a solid RGB triple, or ``None`` for per-pixel random colors.
    ``center`` is an explicit pixel position, or ``None`` to draw one inside the
    bounding box from ``seed``.
    """

    shape: str = "rectangle"
    coverage: float = 0.4
    color: ty.Optional[ty.Tuple[float, float, float]] = None
    center: ty.Optional[ty.Tuple[float, float]] = None
    seed: int = 0

    def __post_init__(self):
        if self.shape not in OCCLUSION_SHAPES:
            raise InvalidArgumentError(
                f"occlusion shape must be one of {', '.join(OCCLUSION_SHAPES)}; got {self.shape!r}"
            )
        if not 0.0 <= self.coverage <= 1.0:
            raise InvalidArgumentError(f"occlusion coverage must lie in [0, 1], got {self.coverage}")
        if self.color is not None:
            color = tuple(float(c) for c in self.color)
            if len(color) != 3 or not all(0.0 <= c <= 1.0 for c in color):
                raise InvalidArgumentError("occlusion color must be an RGB triple in [0, 1]")
            object.__setattr__(self, "color", color)
        if self.center is not None:
            object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def to_dict(self) -> ty.Dict[str, ty.Any]:
        data = dataclasses.asdict(self)
        for key in ("color", "center"):
            if data[key] is not None:
                data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: ty.Mapping[str, ty.Any]) -> "OcclusionSpec":
        return cls(**data)


@dataclasses.dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian"
    sigma: float = 0.0
    p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise InvalidArgumentError(
                f"noise kind must be one of {', '.join(NOISE_KINDS)}; got {self.kind!r}"
            )
        if not self.sigma >= 0.0:
            raise InvalidArgumentError(f"noise sigma must be nonnegative, got {self.sigma}")
        if not 0.0 <= self.p <= 1.0:
            raise InvalidArgumentError(f"salt-and-pepper p must lie in [0, 1], got {self.p}")

    def to_dict(self) -> ty.Dict[str, ty.Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: ty.Mapping[str, ty.Any]) -> "NoiseSpec":
        return cls(**data)


@dataclasses.dataclass
class TripletSample:
    """Guiding, occluded and noisy images of one face, with optional ground truth.

    ``coefficients`` is the ground truth of the degraded images and
    ``guiding_coefficients`` that of the guiding image; they differ only in the
    unpaired layout. ``landmarks`` are the guiding image's landmarks.
    """

    identity: int
    sample: int
    guiding: np.ndarray
    occluded: np.ndarray
    noisy: np.ndarray
    mask: np.ndarray
    coefficients: ty.Optional[CoefficientVector] = None
    guiding_coefficients: ty.Optional[CoefficientVector] = None
    landmarks: ty.Optional[LandmarkSet] = None
    occlusion: ty.Optional[OcclusionSpec] = None
    noise: ty.Optional[NoiseSpec] = None
    paths: ty.Dict[str, str] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        shapes = {np.shape(self.guiding), np.shape(self.occluded), np.shape(self.noisy)}
        if len(shapes) != 1:
            raise InvalidArgumentError(f"triplet images differ in shape: {sorted(shapes)}")
        if np.shape(self.mask) != np.shape(self.guiding)[:2]:
            raise InvalidArgumentError("occlusion mask must match the image height and width")

    @property
    def sample_id(self) -> str:
        return f"i{self.identity:03d}_s{self.sample:02d}"


def _check_image(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidArgumentError(f"expected an HxWx3 image, got {image.shape}")
    return image


def _shape_mask(
    shape: str,
    scale: float,
    px: np.ndarray,
    py: np.ndarray,
    center: ty.Tuple[float, float],
    aspect: float,
    polygon: ty.Optional[ty.Tuple[np.ndarray, np.ndarray]],
) -> np.ndarray:
    dx = (px - center[0]) / (scale * aspect)
    dy = (py - center[1]) / (scale / aspect)
    if shape == "rectangle":
        return (np.abs(dx) <= 1.0) & (np.abs(dy) <= 1.0)
    if shape == "ellipse":
        return dx * dx + dy * dy <= 1.0
    angles, radii = polygon
    xs = radii * np.cos(angles)
    ys = radii * np.sin(angles)
    inside = np.zeros(px.shape, dtype=bool)
    # even-odd crossing test in the normalized frame
    for k in range(len(xs)):
        x0, y0 = xs[k], ys[k]
        x1, y1 = xs[(k + 1) % len(xs)], ys[(k + 1) % len(xs)]
        straddles = (y0 > dy) != (y1 > dy)
        with np.errstate(divide="ignore", invalid="ignore"):
            crossing = x0 + (dy - y0) * (x1 - x0) / (y1 - y0)
        inside ^= straddles & (dx < crossing)
    return inside


def overlay_occlusion(image, bbox: BBox, spec: OcclusionSpec) -> ty.Tuple[np.ndarray, np.ndarray]:
    """Paint an occluder over ``image`` inside ``bbox``; returns (occluded, mask).

    The occluder is scaled by bisection until its area inside the bounding box
    is as close as possible to ``spec.coverage`` of the box. Pixels outside the
    mask are copied unchanged.
    """
    image = _check_image(image)
    height, width = image.shape[:2]
    x0, y0, x1, y1 = (int(v) for v in bbox)
    if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
        raise InvalidArgumentError(f"bbox {bbox} is empty or outside the {width}x{height} image")
    occluded = image.copy()
    mask = np.zeros((height, width), dtype=bool)
    if spec.coverage == 0.0:
        return occluded, mask

    rng = np.random.default_rng(spec.seed)
    box_w, box_h = x1 - x0, y1 - y0
    if spec.center is None:
        center = (x0 + rng.uniform(0.0, box_w), y0 + rng.uniform(0.0, box_h))
    else:
        center = spec.center
    aspect = math.sqrt(rng.uniform(0.6, 1.6))
    polygon = None
    if spec.shape == "polygon":
        count = int(rng.integers(5, 9))
        angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, size=count))
        radii = rng.uniform(0.6, 1.0, size=count)
        polygon = (angles, radii)

    py, px = np.mgrid[y0:y1, x0:x1] + 0.5
    target = spec.coverage * box_w * box_h

    def area(scale: float) -> ty.Tuple[int, np.ndarray]:
        inside = _shape_mask(spec.shape, scale, px, py, center, aspect, polygon)
        return int(inside.sum()), inside

    lo, hi = 0.0, 4.0 * math.hypot(box_w, box_h)
    best_count, best = area(hi)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        count, inside = area(mid)
        if abs(count - target) < abs(best_count - target):
            best_count, best = count, inside
        if count < target:
            lo = mid
        else:
            hi = mid
    mask[y0:y1, x0:x1] = best

    if spec.color is None:
        colors = rng.random((best_count, 3))
    else:
        colors = np.broadcast_to(np.asarray(spec.color), (best_count, 3))
    occluded[mask] = colors
    LOG.debug(f"{spec.shape} occluder: {best_count} px for target {target:.1f}")
    return occluded, mask


def add_noise(image, spec: NoiseSpec) -> np.ndarray:
    """Apply seeded noise; zero-magnitude specs return an unchanged copy."""
    image = _check_image(image)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "gaussian":
        if spec.sigma == 0.0:
            return image.copy()
        return np.clip(image + rng.normal(0.0, spec.sigma, size=image.shape), 0.0, 1.0)
    if spec.kind == "speckle":
        if spec.sigma == 0.0:
            return image.copy()
        return np.clip(image * (1.0 + rng.normal(0.0, spec.sigma, size=image.shape)), 0.0, 1.0)
    noisy = image.copy()
    u = rng.random(image.shape[:2])
    noisy[u < spec.p / 2.0] = 0.0
    noisy[(u >= spec.p / 2.0) & (u < spec.p)] = 1.0
    return noisy


# -- datasets ----------------------------------------------------------------


def _quantized(values: np.ndarray) -> CoefficientVector:
    # ground truth is stored as float32; render from exactly what is stored
    return CoefficientVector(values.astype(np.float32).astype(np.float64))


def sample_identity(rng: np.random.Generator, config: DatasetConfig) -> ty.Dict[str, np.ndarray]:
    return {
        "shape": rng.normal(0.0, config.shape_std, size=SHAPE_DIM),
        "texture": rng.normal(0.0, config.texture_std, size=TEXTURE_DIM),
    }


def sample_capture(
    rng: np.random.Generator, identity: ty.Mapping[str, np.ndarray], config: DatasetConfig
) -> CoefficientVector:
    """Ground truth for one capture of ``identity``: expression, lighting and pose jitter."""
    canonical = CoefficientVector.canonical()
    expression = rng.normal(0.0, config.expression_std, size=EXPRESSION_DIM)
    illumination = canonical.illumination + rng.normal(
        0.0, config.illumination_jitter, size=ILLUMINATION_DIM
    )
    rotation = rng.normal(0.0, config.rotation_jitter, size=3)
    translation = canonical.translation + rng.normal(0.0, config.translation_jitter, size=3)
    values = canonical.with_segments(
        shape=identity["shape"],
        expression=expression,
        texture=identity["texture"],
        illumination=illumination,
        pose=np.concatenate([rotation, translation]),
    ).values
    return _quantized(values)


def _draw_specs(
    rng: np.random.Generator, config: DatasetConfig
) -> ty.Tuple[OcclusionSpec, NoiseSpec]:
    shape = config.occlusion_shapes[int(rng.integers(len(config.occlusion_shapes)))]
    coverage = float(rng.uniform(config.occlusion_min, config.occlusion_max))
    color = None if rng.random() < 0.5 else tuple(float(c) for c in rng.random(3))
    occlusion = OcclusionSpec(
        shape=shape, coverage=coverage, color=color, seed=int(rng.integers(2**32))
    )
    kind = config.noise_kinds[int(rng.integers(len(config.noise_kinds)))]
    sigma = {"gaussian": config.gaussian_sigma, "speckle": config.speckle_sigma}.get(kind, 0.0)
    p = config.salt_pepper_p if kind == "salt_pepper" else 0.0
    noise = NoiseSpec(kind=kind, sigma=sigma, p=p, seed=int(rng.integers(2**32)))
    return occlusion, noise


def _render_clean(basis: MorphableBasis, coeffs: CoefficientVector, camera: Camera) -> ty.Tuple:
    frame = render_face(basis, coeffs, camera)
    return frame.image, frame.coverage


def _relative(path: pathlib.Path, root: pathlib.Path) -> str:
    return path.relative_to(root).as_posix()


@dataclasses.dataclass
class Manifest:
    """Structured description of a triplet dataset on disk."""

    seed: int
    camera: ty.Dict[str, ty.Any]
    basis: ty.Dict[str, ty.Any]
    paired: bool
    identities: ty.List[ty.Dict[str, ty.Any]]
    samples: ty.List[ty.Dict[str, ty.Any]]
    dataset: ty.Dict[str, ty.Any] = dataclasses.field(default_factory=dict)
    version: int = MANIFEST_VERSION
    root: ty.Optional[pathlib.Path] = None

    def to_dict(self) -> ty.Dict[str, ty.Any]:
        data = dataclasses.asdict(self)
        data.pop("root")
        return data

    def dumps(self) -> str:
        return dump_json(self.to_dict())

    def write(self, path: ty.Union[str, os.PathLike]) -> None:
        path = pathlib.Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: ty.Union[str, os.PathLike]) -> "Manifest":
        path = pathlib.Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        data = read_json(path)
        if not isinstance(data, dict) or data.get("version") != MANIFEST_VERSION:
            raise FormatError(path, 0, f"not a version {MANIFEST_VERSION} dataset manifest")
        fields = {f.name for f in dataclasses.fields(cls)} - {"root"}
        missing = fields - set(data) - {"dataset"}
        if missing:
            raise FormatError(path, 0, f"manifest lacks {', '.join(sorted(missing))}")
        return cls(**{k: data[k] for k in fields if k in data}, root=path.parent)

    def camera_model(self) -> Camera:
        return Camera(
            focal_length=self.camera["focal_length"],
            principal_point=tuple(self.camera["principal_point"]),
            image_width=self.camera["image_width"],
            image_height=self.camera["image_height"],
        )

    def resolve(self, relative: str) -> pathlib.Path:
        return (self.root or pathlib.Path(".")) / relative

    def load_samples(self, basis: ty.Optional[MorphableBasis] = None) -> ty.List[TripletSample]:
        """Read every sample's images and ground truth from disk.

        With a ``basis``, ground-truth landmarks of the guiding images are
        recomputed from the stored coefficients.
        """
        clean: ty.Dict[int, ty.Tuple] = {}
        for entry in self.identities:
            coeffs = read_coefficients(self.resolve(entry["coefficients"]))
            clean[entry["identity"]] = (read_image(self.resolve(entry["image"])), coeffs)
        camera = self.camera_model() if basis is not None else None
        samples = []
        for record in self.samples:
            guiding, guiding_coeffs = clean[record["identity"]]
            samples.append(
                TripletSample(
                    identity=record["identity"],
                    sample=record["sample"],
                    guiding=guiding,
                    occluded=read_image(self.resolve(record["occluded"])),
                    noisy=read_image(self.resolve(record["noisy"])),
                    mask=read_mask(self.resolve(record["mask"])),
                    coefficients=read_coefficients(self.resolve(record["coefficients"])),
                    guiding_coefficients=guiding_coeffs,
                    landmarks=(
                        project_landmarks(basis, guiding_coeffs, camera) if basis is not None else None
                    ),
                    occlusion=OcclusionSpec.from_dict(record["occlusion"]),
                    noise=NoiseSpec.from_dict(record["noise"]),
                    paths={k: record[k] for k in ("occluded", "noisy", "mask", "coefficients")},
                )
            )
        return samples


def _build_identity(
    basis: MorphableBasis,
    camera: Camera,
    identity: int,
    per_identity: int,
    seed: int,
    config: DatasetConfig,
) -> ty.List[TripletSample]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, identity]))
    traits = sample_identity(rng, config)
    reference = sample_capture(rng, traits, config)
    guiding, coverage = _render_clean(basis, reference, camera)
    bbox = face_bbox(coverage)
    landmarks = project_landmarks(basis, reference, camera)

    samples = []
    for j in range(per_identity):
        sample_rng = np.random.default_rng(np.random.SeedSequence([seed, identity, j]))
        if config.paired:
            truth, source, source_bbox = reference, guiding, bbox
        else:
            truth = sample_capture(sample_rng, traits, config)
            source, source_coverage = _render_clean(basis, truth, camera)
            source_bbox = face_bbox(source_coverage)
        occlusion, noise = _draw_specs(sample_rng, config)
        occluded, mask = overlay_occlusion(source, source_bbox, occlusion)
        samples.append(
            TripletSample(
                identity=identity,
                sample=j,
                guiding=guiding,
                occluded=occluded,
                noisy=add_noise(source, noise),
                mask=mask,
                coefficients=truth,
                guiding_coefficients=reference,
                landmarks=landmarks,
                occlusion=occlusion,
                noise=noise,
            )
        )
    return samples


def build_triplet_dataset(
    basis: MorphableBasis,
    camera: Camera,
    identities: int = 50,
    per_identity: int = 10,
    seed: int = 0,
    out_dir: ty.Optional[ty.Union[str, os.PathLike]] = None,
    config: ty.Optional[DatasetConfig] = None,
    threads: int = 1,
    basis_ref: ty.Optional[ty.Mapping[str, ty.Any]] = None,
) -> ty.Tuple[ty.List[TripletSample], Manifest]:
    """Render ``identities`` x ``per_identity`` seeded triplets.

    Each identity gets its own generator seeded from ``(seed, identity)`` and
    each sample one seeded from ``(seed, identity, sample)``, so results do not
    depend on ``threads``. When ``out_dir`` is given, images, masks, ground
    truth and ``manifest.json`` are written there.
    """
    if identities <= 0 or per_identity <= 0:
        raise InvalidArgumentError("identities and per_identity must be positive")
    config = config or DatasetConfig()
    config = dataclasses.replace(config, identities=identities, per_identity=per_identity)
    LOG.info(f"Building {identities}x{per_identity} triplets (paired={config.paired}, seed={seed})")

    def build(i: int) -> ty.List[TripletSample]:
        return _build_identity(basis, camera, i, per_identity, seed, config)

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            per_id = list(pool.map(build, range(identities)))
    else:
        per_id = [build(i) for i in range(identities)]

    root = pathlib.Path(out_dir) if out_dir is not None else None
    identity_records, sample_records = [], []
    for i, group in enumerate(per_id):
        directory = root / f"identity_{i:03d}" if root is not None else None
        entry = {"identity": i, "image": None, "coefficients": None}
        if directory is not None:
            write_image(directory / "clean.ppm", group[0].guiding)
            write_coefficients(group[0].guiding_coefficients, directory / "clean.rgcv")
            entry["image"] = _relative(directory / "clean.ppm", root)
            entry["coefficients"] = _relative(directory / "clean.rgcv", root)
        identity_records.append(entry)
        for sample in group:
            record = {
                "id": sample.sample_id,
                "identity": i,
                "sample": sample.sample,
                "occlusion": sample.occlusion.to_dict(),
                "noise": sample.noise.to_dict(),
            }
            for key, name in (
                ("occluded", "occluded.ppm"),
                ("mask", "mask.pgm"),
                ("noisy", "noisy.ppm"),
                ("coefficients", "truth.rgcv"),
            ):
                record[key] = None
                if directory is not None:
                    path = directory / f"sample_{sample.sample:02d}_{name}"
                    record[key] = _relative(path, root)
                    sample.paths[key] = record[key]
            if directory is not None:
                write_image(directory / f"sample_{sample.sample:02d}_occluded.ppm", sample.occluded)
                write_mask(directory / f"sample_{sample.sample:02d}_mask.pgm", sample.mask)
                write_image(directory / f"sample_{sample.sample:02d}_noisy.ppm", sample.noisy)
                write_coefficients(
                    sample.coefficients, directory / f"sample_{sample.sample:02d}_truth.rgcv"
                )
            sample_records.append(record)

    dataset = dataclasses.asdict(config)
    for key in ("occlusion_shapes", "noise_kinds"):
        dataset[key] = list(dataset[key])
    manifest = Manifest(
        seed=seed,
        camera={
            "focal_length": camera.focal_length,
            "principal_point": list(camera.principal_point),
            "image_width": camera.image_width,
            "image_height": camera.image_height,
        },
        basis=dict(basis_ref) if basis_ref is not None else {
            "path": None,
            "vertices": basis.vertex_count,
            "seed": basis.basis_seed,
        },
        paired=config.paired,
        identities=identity_records,
        samples=sample_records,
        dataset=dataset,
        root=root,
    )
    if root is not None:
        manifest.write(root / MANIFEST_NAME)
    samples = [sample for group in per_id for sample in group]
    return samples, manifest
