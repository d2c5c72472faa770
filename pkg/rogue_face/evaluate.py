"""Evaluation over triplet datasets with perceptual distances.

For each sample the guiding image and the degraded image are fitted, the
degraded fit is rendered over the guiding image, and the distance between the
embeddings of the guiding image and that render is recorded. The unpaired
protocol first swaps expression, illumination and pose from the guiding fit
into the degraded fit.
"""

import concurrent.futures
import dataclasses
import logging
import math
import os
import pathlib
import typing as ty

import numpy as np
import torch

from .config import PROTOCOLS, RunConfig
from .degrade import Manifest, TripletSample
from .embed import Embedder, ReferenceEmbedder
from .errors import InvalidArgumentError, RogueError
from .fileio import write_csv, write_image, write_json
from .model import CoefficientVector, MorphableBasis, morph_geometry
from .pipelines import FitSession, fit_guidance, fit_naive, fit_robust
from .render import Camera, render_face

LOG = logging.getLogger(__name__)

SWAPPED_SEGMENTS = ("expression", "illumination", "pose")
REPORT_COLUMNS = ("sample_id", "identity", "sample", "distance", "shape_error", "vertex_error", "error")


def swap_coefficients(
    c_degraded: CoefficientVector, c_guiding: CoefficientVector
) -> CoefficientVector:
    """Take expression, illumination and pose from ``c_guiding``; keep shape and texture."""
    return c_degraded.with_segments(**{name: c_guiding.segment(name) for name in SWAPPED_SEGMENTS})


def perceptual_distance(
    embedder: Embedder,
    image_a,
    image_b,
    key_a: ty.Optional[str] = None,
    key_b: ty.Optional[str] = None,
) -> float:
    """Euclidean distance between unit embeddings of two images, in [0, 2]."""
    if np.shape(image_a) != np.shape(image_b):
        raise InvalidArgumentError(
            f"images differ in shape: {np.shape(image_a)} vs {np.shape(image_b)}"
        )
    with torch.no_grad():
        theta_a = embedder.embed(image_a, key_a)
        theta_b = embedder.embed(image_b, key_b)
        return float(torch.linalg.norm(theta_a - theta_b))


def shape_error(fitted: CoefficientVector, truth: CoefficientVector) -> float:
    """Euclidean distance between shape segments."""
    return float(np.linalg.norm(fitted.shape - truth.shape))


def vertex_error(basis: MorphableBasis, fitted, truth) -> float:
    """Mean per-vertex Euclidean distance between the two morphed geometries."""
    with torch.no_grad():
        diff = (morph_geometry(basis, fitted) - morph_geometry(basis, truth)).reshape(-1, 3)
        return float(torch.linalg.norm(diff, dim=1).mean())


@dataclasses.dataclass
class SampleResult:
    sample_id: str
    identity: int
    sample: int
    distance: ty.Optional[float] = None
    shape_error: ty.Optional[float] = None
    vertex_error: ty.Optional[float] = None
    error: ty.Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def row(self) -> ty.Tuple:
        return (
            self.sample_id,
            self.identity,
            self.sample,
            self.distance,
            self.shape_error,
            self.vertex_error,
            self.error or "",
        )


@dataclasses.dataclass
class EvalReport:
    """Per-sample distances and their aggregates; failed samples are excluded from means."""

    protocol: str
    fitter: str
    config_hash: str
    results: ty.List[SampleResult]

    @property
    def swap(self) -> bool:
        return self.protocol == "real_unpaired"

    @property
    def distances(self) -> np.ndarray:
        return np.array([r.distance for r in self.results if r.ok], dtype=np.float64)

    @property
    def failures(self) -> int:
        return sum(not r.ok for r in self.results)

    @property
    def mean(self) -> float:
        d = self.distances
        return math.fsum(d) / d.size if d.size else math.nan

    @property
    def std(self) -> float:
        d = self.distances
        if not d.size:
            return math.nan
        mean = self.mean
        return math.sqrt(math.fsum((x - mean) ** 2 for x in d) / d.size)

    def identity_means(self) -> ty.Dict[int, float]:
        grouped: ty.Dict[int, ty.List[float]] = {}
        for r in self.results:
            if r.ok:
                grouped.setdefault(r.identity, []).append(r.distance)
        return {i: math.fsum(v) / len(v) for i, v in sorted(grouped.items())}

    def mean_shape_error(self) -> ty.Optional[float]:
        errors = [r.shape_error for r in self.results if r.ok and r.shape_error is not None]
        return math.fsum(errors) / len(errors) if errors else None

    def summary(self) -> ty.Dict[str, ty.Any]:
        return {
            "protocol": self.protocol,
            "fitter": self.fitter,
            "swap": self.swap,
            "config_hash": self.config_hash,
            "samples": len(self.results),
            "failures": self.failures,
            "mean": None if math.isnan(self.mean) else self.mean,
            "std": None if math.isnan(self.std) else self.std,
            "mean_shape_error": self.mean_shape_error(),
            "identity_means": {str(i): m for i, m in self.identity_means().items()},
        }

    def write(self, out_dir: ty.Union[str, os.PathLike]) -> ty.Tuple[pathlib.Path, pathlib.Path]:
        """Write ``report.csv`` (one row per sample) and ``summary.json``."""
        out_dir = pathlib.Path(out_dir)
        csv_path = out_dir / "report.csv"
        summary_path = out_dir / "summary.json"
        write_csv(csv_path, REPORT_COLUMNS, (r.row() for r in self.results))
        write_json(summary_path, self.summary())
        return csv_path, summary_path


def _degraded_image(sample: TripletSample, protocol: str) -> np.ndarray:
    return sample.noisy if protocol == "noise" else sample.occluded


def _session(
    basis: MorphableBasis, camera: Camera, sample: TripletSample, config: RunConfig
) -> FitSession:
    return FitSession.from_sample(
        basis, camera, sample, weights=config.weights, config=config.fit, seed=config.seed
    )


def _fit_guiding(
    basis: MorphableBasis, camera: Camera, sample: TripletSample, config: RunConfig
) -> CoefficientVector:
    return fit_guidance(_session(basis, camera, sample, config))


def _fit_degraded(
    basis: MorphableBasis,
    camera: Camera,
    sample: TripletSample,
    c_g: CoefficientVector,
    protocol: str,
    config: RunConfig,
) -> CoefficientVector:
    start = c_g if config.eval.warm_start else CoefficientVector.canonical()
    session = _session(basis, camera, sample, config)
    if config.eval.fitter == "naive":
        return fit_naive(session, _degraded_image(sample, protocol), init=start)
    session.c_g = c_g
    session.guidance_done = True
    session.c_o = session.c_n = start
    c_o, c_n = fit_robust(session)
    return c_n if protocol == "noise" else c_o


def evaluate_samples(
    samples: ty.Sequence[TripletSample],
    basis: MorphableBasis,
    camera: Camera,
    config: ty.Optional[RunConfig] = None,
    embedder: ty.Optional[Embedder] = None,
    out_dir: ty.Optional[ty.Union[str, os.PathLike]] = None,
    keys: ty.Optional[ty.Mapping[str, str]] = None,
) -> EvalReport:
    """Evaluate in-memory triplets under ``config.eval.protocol``.

    Guiding images are fitted once per identity. When ``out_dir`` is given the
    composited renders are written to ``out_dir/renders`` and their paths are
    the embedding keys, which lets an external embedder look them up; ``keys``
    maps an identity number (as a string) to the guiding image's key.
    """
    config = config or RunConfig()
    protocol = config.eval.protocol
    if protocol not in PROTOCOLS:
        raise InvalidArgumentError(f"unknown protocol {protocol!r}")
    embedder = embedder or ReferenceEmbedder(
        dim=config.fit.embedding_dim, seed=config.fit.embedder_seed
    )
    keys = keys or {}
    threads = max(1, config.threads)
    LOG.info(
        f"Evaluating {len(samples)} samples: protocol={protocol} fitter={config.eval.fitter} "
        f"threads={threads}"
    )

    first: ty.Dict[int, TripletSample] = {}
    for sample in samples:
        first.setdefault(sample.identity, sample)

    def guide(identity: int) -> ty.Union[CoefficientVector, Exception]:
        try:
            return _fit_guiding(basis, camera, first[identity], config)
        except RogueError as e:
            LOG.warning(f"identity {identity}: guidance fit failed: {e}")
            return e

    def run(sample: TripletSample) -> SampleResult:
        result = SampleResult(sample.sample_id, sample.identity, sample.sample)
        c_g = guiding_fits[sample.identity]
        if isinstance(c_g, Exception):
            result.error = f"guidance: {c_g}"
            return result
        try:
            fitted = _fit_degraded(basis, camera, sample, c_g, protocol, config)
            rendered_coeffs = swap_coefficients(fitted, c_g) if protocol == "real_unpaired" else fitted
            rendered = render_face(basis, rendered_coeffs, camera, background=sample.guiding).image
            render_key = None
            if out_dir is not None:
                render_path = pathlib.Path(out_dir) / "renders" / f"{sample.sample_id}.ppm"
                write_image(render_path, rendered)
                render_key = os.fspath(render_path)
            result.distance = perceptual_distance(
                embedder, sample.guiding, rendered, keys.get(str(sample.identity)), render_key
            )
            if sample.coefficients is not None:
                result.shape_error = shape_error(fitted, sample.coefficients)
                result.vertex_error = vertex_error(basis, fitted, sample.coefficients)
        except RogueError as e:
            LOG.warning(f"{sample.sample_id}: {e}")
            result.error = str(e)
        return result

    identities = sorted(first)
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            guiding_fits = dict(zip(identities, pool.map(guide, identities)))
            results = list(pool.map(run, samples))
    else:
        guiding_fits = {i: guide(i) for i in identities}
        results = [run(sample) for sample in samples]

    report = EvalReport(
        protocol=protocol,
        fitter=config.eval.fitter,
        config_hash=config.config_hash(),
        results=results,
    )
    LOG.info(f"mean distance {report.mean:.6g} over {len(results) - report.failures} samples")
    return report


def evaluate_dataset(
    manifest: Manifest,
    basis: MorphableBasis,
    config: ty.Optional[RunConfig] = None,
    embedder: ty.Optional[Embedder] = None,
    out_dir: ty.Optional[ty.Union[str, os.PathLike]] = None,
) -> EvalReport:
    """Load a dataset from its manifest and evaluate it."""
    samples = manifest.load_samples(basis)
    keys = {
        str(entry["identity"]): os.fspath(manifest.resolve(entry["image"]))
        for entry in manifest.identities
        if entry.get("image")
    }
    return evaluate_samples(
        samples, basis, manifest.camera_model(), config, embedder, out_dir=out_dir, keys=keys
    )
