"""Run configuration: typed sections, TOML loading and a stable configuration hash."""

import dataclasses
import hashlib
import json
import os
import sys
import typing as ty

from .errors import InvalidArgumentError
from .model import LossWeights
from .render import Camera

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PROTOCOLS = ("real_unpaired", "synthetic_paired", "noise")
FITTERS = ("rogue", "naive")
CONSISTENCY_MODES = ("adversarial", "l2")
OCCLUSION_SHAPES = ("rectangle", "ellipse", "polygon")
NOISE_KINDS = ("gaussian", "salt_pepper", "speckle")


def _check_choice(name: str, value, choices) -> None:
    if value not in choices:
        raise InvalidArgumentError(f"{name} must be one of {', '.join(choices)}; got {value!r}")


@dataclasses.dataclass(frozen=True)
class BasisConfig:
    """Either a basis file ``path`` or synthetic generation parameters."""

    path: ty.Optional[str] = None
    vertices: int = 500
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class CameraConfig:
    width: int = 64
    height: int = 64
    focal_length: ty.Optional[float] = None
    principal_point: ty.Optional[ty.Tuple[float, float]] = None

    def to_camera(self) -> Camera:
        camera = Camera.default(self.width, self.height)
        return Camera(
            self.focal_length if self.focal_length is not None else camera.focal_length,
            tuple(self.principal_point) if self.principal_point is not None else camera.principal_point,
            self.width,
            self.height,
        )


@dataclasses.dataclass(frozen=True)
class FitConfig:
    guidance_iterations: int = 600
    robust_iterations: int = 600
    learning_rate: float = 1e-2
    # fraction of learning_rate reached on the last iteration
    lr_decay: float = 1e-2
    # step-size factor after a rejected uphill coefficient step
    backtrack: float = 0.5
    regressor_learning_rate: float = 1e-4
    discriminator_learning_rate: float = 1e-8
    consistency_mode: str = "adversarial"
    discriminator_enabled: bool = True
    discriminator_seed: int = 0
    negative_slope: float = 0.2
    use_occlusion_loss: bool = True
    use_noise_loss: bool = True
    use_consistency_loss: bool = True
    # prior and guiding landmarks in the robust coefficient step
    robust_prior: bool = True
    embedding_dim: int = 128
    embedder_seed: int = 0
    batch_size: int = 5
    log_every: int = 50

    def __post_init__(self):
        _check_choice("fit.consistency_mode", self.consistency_mode, CONSISTENCY_MODES)
        for name in ("guidance_iterations", "robust_iterations"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"fit.{name} must be nonnegative")
        if self.batch_size <= 0:
            raise InvalidArgumentError("fit.batch_size must be positive")
        for name in ("lr_decay", "backtrack"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise InvalidArgumentError(f"fit.{name} must lie in (0, 1]")


@dataclasses.dataclass(frozen=True)
class DatasetConfig:
    identities: int = 50
    per_identity: int = 10
    paired: bool = True
    shape_std: float = 0.3
    expression_std: float = 0.2
    texture_std: float = 0.3
    rotation_jitter: float = 0.05
    translation_jitter: float = 0.05
    illumination_jitter: float = 0.1
    occlusion_min: float = 0.3
    occlusion_max: float = 0.5
    occlusion_shapes: ty.Tuple[str, ...] = OCCLUSION_SHAPES
    noise_kinds: ty.Tuple[str, ...] = NOISE_KINDS
    gaussian_sigma: float = 0.15
    salt_pepper_p: float = 0.1
    speckle_sigma: float = 0.2

    def __post_init__(self):
        if self.identities <= 0 or self.per_identity <= 0:
            raise InvalidArgumentError("dataset.identities and dataset.per_identity must be positive")
        if not 0 <= self.occlusion_min <= self.occlusion_max <= 1:
            raise InvalidArgumentError("need 0 <= occlusion_min <= occlusion_max <= 1")
        object.__setattr__(self, "occlusion_shapes", tuple(self.occlusion_shapes))
        object.__setattr__(self, "noise_kinds", tuple(self.noise_kinds))
        for shape in self.occlusion_shapes:
            _check_choice("dataset.occlusion_shapes", shape, OCCLUSION_SHAPES)
        for kind in self.noise_kinds:
            _check_choice("dataset.noise_kinds", kind, NOISE_KINDS)


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    protocol: str = "synthetic_paired"
    fitter: str = "rogue"
    warm_start: bool = False

    def __post_init__(self):
        _check_choice("eval.protocol", self.protocol, PROTOCOLS)
        _check_choice("eval.fitter", self.fitter, FITTERS)


_SECTIONS = {
    "basis": BasisConfig,
    "camera": CameraConfig,
    "weights": LossWeights,
    "fit": FitConfig,
    "dataset": DatasetConfig,
    "eval": EvalConfig,
}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    threads: int = 1
    basis: BasisConfig = dataclasses.field(default_factory=BasisConfig)
    camera: CameraConfig = dataclasses.field(default_factory=CameraConfig)
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    fit: FitConfig = dataclasses.field(default_factory=FitConfig)
    dataset: DatasetConfig = dataclasses.field(default_factory=DatasetConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, data: ty.Mapping[str, ty.Any]) -> "RunConfig":
        """Build a config from nested mappings; unknown keys are rejected."""
        top = {f.name for f in dataclasses.fields(cls)}
        kwargs: ty.Dict[str, ty.Any] = {}
        for key, value in data.items():
            if key not in top:
                raise InvalidArgumentError(f"Unknown configuration key: {key}")
            if key in _SECTIONS:
                if not isinstance(value, ty.Mapping):
                    raise InvalidArgumentError(f"Configuration section [{key}] must be a table")
                kwargs[key] = _build_section(key, _SECTIONS[key], value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    def to_dict(self) -> ty.Dict[str, ty.Any]:
        return dataclasses.asdict(self)

    def canonical(self) -> str:
        """Stable serialization: sorted keys, fixed separators, tuples as lists."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def override(self, overrides: ty.Mapping[str, ty.Any]) -> "RunConfig":
        """Apply ``{"section.key": value}`` or ``{"key": value}`` overrides.

        ``None`` values are skipped so unset command-line flags fall through.
        """
        data = self.to_dict()
        for dotted, value in overrides.items():
            if value is None:
                continue
            node = data
            *parents, leaf = dotted.split(".")
            for parent in parents:
                if parent not in node or not isinstance(node[parent], dict):
                    raise InvalidArgumentError(f"Unknown configuration key: {dotted}")
                node = node[parent]
            if leaf not in node:
                raise InvalidArgumentError(f"Unknown configuration key: {dotted}")
            node[leaf] = value
        return RunConfig.from_dict(data)


def _build_section(name: str, section_cls, values: ty.Mapping[str, ty.Any]):
    known = {f.name for f in dataclasses.fields(section_cls)}
    for key in values:
        if key not in known:
            raise InvalidArgumentError(f"Unknown configuration key: {name}.{key}")
    cleaned = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return section_cls(**cleaned)
    except TypeError as e:
        raise InvalidArgumentError(f"Invalid [{name}] section: {e}") from e


def load_config(path: ty.Optional[ty.Union[str, os.PathLike]]) -> RunConfig:
    """Read a TOML run configuration; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    with open(path, "rb") as f:
        try:
            data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise InvalidArgumentError(f"{path}: {e}") from e
    return RunConfig.from_dict(data)
