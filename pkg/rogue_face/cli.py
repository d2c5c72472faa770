"""Command-line interface: ``rogue``."""

import logging
import pathlib
import typing as ty
from textwrap import dedent

import click

from . import __version__
from .config import CONSISTENCY_MODES, FITTERS, PROTOCOLS, RunConfig, load_config
from .degrade import Manifest, build_triplet_dataset
from .embed import ExternalEmbedder
from .errors import EXIT_DEGENERATE, EXIT_IO, InvalidArgumentError, RogueError
from .evaluate import evaluate_dataset
from .fileio import (
    read_basis,
    read_coefficients,
    read_image,
    write_basis,
    write_coefficients,
    write_history,
    write_image,
    write_obj,
)
from .model import (
    CoefficientVector,
    MorphableBasis,
    generate_synthetic_basis,
    morph_geometry,
    morph_texture,
)
from .pipelines import FitSession, fit_guidance, fit_robust
from .render import render_face

LOG = logging.getLogger(__name__)

EXIT_CODES = dedent(
    """
    Exit codes:
      0  success
      2  invalid argument or configuration
      3  degenerate render or numerical failure
      4  unreadable, malformed or unwritable file
    """
)

BASIS_FILE = click.Path(exists=True, dir_okay=False)


class CommandFailed(click.ClickException):
    """A library error surfaced with its own exit code."""

    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


class RogueCommand(click.Command):
    """click.Command whose help ends with the exit-code table."""

    def get_help(self, ctx):
        help_text = super().get_help(ctx)
        formatter = click.HelpFormatter()
        formatter.write(f"{help_text}\n{EXIT_CODES}")
        return formatter.getvalue()


class RogueGroup(click.Group):
    """click.Group that maps library errors to exit codes."""

    command_class = RogueCommand

    def get_help(self, ctx):
        help_text = super().get_help(ctx)
        formatter = click.HelpFormatter()
        formatter.write(
            dedent(
                f"""
{help_text}
Every command honors --seed and writes below --out.
{EXIT_CODES}"""
            )
        )
        return formatter.getvalue()

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except RogueError as e:
            raise CommandFailed(str(e), e.exit_code) from e
        except OSError as e:
            raise CommandFailed(str(e), EXIT_IO) from e


def _config(ctx: click.Context) -> RunConfig:
    return ctx.obj["config"]


def _load_basis(
    config: RunConfig, path: ty.Optional[str] = None, reference=None
) -> MorphableBasis:
    """Basis from an explicit file, a manifest reference, the config file, or synthesis."""
    reference = reference or {}
    path = path or reference.get("path") or config.basis.path
    if path:
        LOG.info(f"Reading basis {path}")
        return read_basis(path)
    vertices = reference.get("vertices", config.basis.vertices)
    seed = reference.get("seed", config.basis.seed)
    LOG.info(f"Synthesizing basis: {vertices} vertices, seed {seed}")
    return generate_synthetic_basis(vertices, seed)


def _select_sample(manifest: Manifest, triplet: str) -> int:
    for index, record in enumerate(manifest.samples):
        if record["id"] == triplet:
            return index
    prefix = triplet[1:] if triplet[:1] in ("t", "#") else triplet
    if prefix.isdigit() and int(prefix) < len(manifest.samples):
        return int(prefix)
    raise InvalidArgumentError(
        f"no triplet '{triplet}' in manifest ({len(manifest.samples)} samples)"
    )


@click.group(cls=RogueGroup, name="rogue")
@click.option(
    "--config",
    "-c",
    "config_path",
    type=click.Path(exists=True, dir_okay=False),
    help="TOML run configuration",
)
@click.option("--seed", type=int, help="Run seed (overrides the configuration)")
@click.option(
    "--out", "output_dir", type=click.Path(file_okay=False), help="Output directory"
)
@click.option("--threads", type=int, help="Worker threads for dataset and evaluation loops")
@click.option(
    "--verbose",
    "-v",
    count=True,
    help="Increase verbosity (-v for progress, -vv for per-iteration losses)",
)
@click.version_option(__version__, "--version", "-V", message="rogue %(version)s")
@click.pass_context
def cli(ctx, config_path, seed, output_dir, threads, verbose):
    """Robust 3D morphable model fitting for occluded and noisy face images.

    Fits coefficients to a clean guiding image, then fits occluded and noisy
    variants against the guiding image with an adversarial consistency loss.
    """
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("rogue_face").setLevel(level)
    ctx.ensure_object(dict)
    try:
        config = load_config(config_path).override(
            {"seed": seed, "output_dir": output_dir, "threads": threads}
        )
    except RogueError as e:
        raise CommandFailed(str(e), e.exit_code) from e
    ctx.obj["config"] = config


@cli.command(name="synth-basis")
@click.option("--vertices", type=int, help="Vertex count (at least 68)")
@click.option("--seed", type=int, help="Basis seed")
@click.option(
    "--output",
    "-o",
    type=click.Path(dir_okay=False),
    required=True,
    help="RGBM file to write",
)
@click.pass_context
def synth_basis(ctx, vertices, seed, output):
    """Generate a synthetic morphable basis and write it as an RGBM file."""
    config = _config(ctx)
    vertices = config.basis.vertices if vertices is None else vertices
    seed = config.basis.seed if seed is None else seed
    basis = generate_synthetic_basis(vertices, seed)
    write_basis(basis, output)
    click.echo(
        f"Wrote {output}: {basis.vertex_count} vertices, {basis.triangle_count} triangles"
    )


@cli.command(name="make-dataset")
@click.option("--basis", "basis_path", type=BASIS_FILE, help="RGBM basis file")
@click.option("--identities", type=int, help="Number of identities", show_default="50")
@click.option(
    "--per-identity", type=int, help="Degraded samples per identity", show_default="10"
)
@click.option(
    "--paired/--unpaired",
    default=None,
    help="Degrade the clean image itself, or a new capture",
)
@click.pass_context
def make_dataset(ctx, basis_path, identities, per_identity, paired):
    """Render a seeded triplet dataset with a manifest into --out."""
    config = _config(ctx).override(
        {
            "dataset.identities": identities,
            "dataset.per_identity": per_identity,
            "dataset.paired": paired,
        }
    )
    basis = _load_basis(config, basis_path)
    reference = {
        "path": basis_path or config.basis.path,
        "vertices": basis.vertex_count,
        "seed": basis.basis_seed,
    }
    samples, manifest = build_triplet_dataset(
        basis,
        config.camera.to_camera(),
        identities=config.dataset.identities,
        per_identity=config.dataset.per_identity,
        seed=config.seed,
        out_dir=config.output_dir,
        config=config.dataset,
        threads=config.threads,
        basis_ref=reference,
    )
    click.echo(f"Wrote {len(samples)} triplets to {config.output_dir}")


@cli.command(name="fit")
@click.option(
    "--manifest",
    "manifest_path",
    type=click.Path(exists=True),
    required=True,
    help="Dataset manifest or directory",
)
@click.option("--triplet", required=True, help="Sample id (e.g. i000_s00) or index (e.g. t0)")
@click.option(
    "--mode", type=click.Choice(["guidance", "rogue"]), default="rogue", show_default=True
)
@click.option("--basis", "basis_path", type=BASIS_FILE, help="RGBM basis file")
@click.option("--beta-c", type=float, help="Consistency weight")
@click.option("--consistency", type=click.Choice(CONSISTENCY_MODES), help="Consistency loss mode")
@click.option("--no-discriminator", is_flag=True, help="Fit C_O and C_N without a discriminator")
@click.option("--iterations", type=int, help="Iterations for each pipeline")
@click.pass_context
def fit(
    ctx, manifest_path, triplet, mode, basis_path, beta_c, consistency, no_discriminator, iterations
):
    """Fit one triplet; writes coefficients, renders and the loss history."""
    config = _config(ctx).override(
        {
            "weights.beta_c": beta_c,
            "fit.consistency_mode": consistency,
            "fit.guidance_iterations": iterations,
            "fit.robust_iterations": iterations,
            "fit.discriminator_enabled": False if no_discriminator else None,
        }
    )
    manifest = Manifest.load(manifest_path)
    basis = _load_basis(config, basis_path, manifest.basis)
    samples = manifest.load_samples(basis)
    sample = samples[_select_sample(manifest, triplet)]
    camera = manifest.camera_model()

    session = FitSession.from_sample(
        basis, camera, sample, weights=config.weights, config=config.fit, seed=config.seed
    )
    out = pathlib.Path(config.output_dir) / f"fit_{sample.sample_id}"
    c_g = fit_guidance(session)
    write_coefficients(c_g, out / "c_g.rgcv")
    write_image(out / "c_g.ppm", render_face(basis, c_g, camera).image)
    if mode == "rogue":
        c_o, c_n = fit_robust(session)
        write_coefficients(c_o, out / "c_o.rgcv")
        write_coefficients(c_n, out / "c_n.rgcv")
        write_image(out / "c_o.ppm", render_face(basis, c_o, camera).image)
        write_image(out / "c_n.ppm", render_face(basis, c_n, camera).image)
    write_history(out / "history.csv", session.history)
    click.echo(f"Wrote {mode} fit of {sample.sample_id} to {out}")


@cli.command(name="eval")
@click.option(
    "--manifest",
    "manifest_path",
    type=click.Path(exists=True),
    required=True,
    help="Dataset manifest or directory",
)
@click.option("--protocol", type=click.Choice(PROTOCOLS), help="Evaluation protocol")
@click.option("--fitter", type=click.Choice(FITTERS), help="Degraded-image fitter")
@click.option(
    "--warm-start/--cold-start",
    default=None,
    help="Start degraded fits at the guiding fit",
)
@click.option("--basis", "basis_path", type=BASIS_FILE, help="RGBM basis file")
@click.option(
    "--embeddings",
    type=click.Path(exists=True, dir_okay=False),
    help=".npz of precomputed embeddings",
)
@click.option("--iterations", type=int, help="Iterations for each pipeline")
@click.pass_context
def evaluate(
    ctx, manifest_path, protocol, fitter, warm_start, basis_path, embeddings, iterations
):
    """Evaluate a dataset; writes report.csv and summary.json into --out."""
    config = _config(ctx).override(
        {
            "eval.protocol": protocol,
            "eval.fitter": fitter,
            "eval.warm_start": warm_start,
            "fit.guidance_iterations": iterations,
            "fit.robust_iterations": iterations,
        }
    )
    manifest = Manifest.load(manifest_path)
    basis = _load_basis(config, basis_path, manifest.basis)
    embedder = ExternalEmbedder(embeddings) if embeddings else None
    report = evaluate_dataset(manifest, basis, config, embedder, out_dir=config.output_dir)
    csv_path, summary_path = report.write(config.output_dir)
    click.echo(
        f"{report.protocol}: mean {report.mean:.6g} std {report.std:.6g} "
        f"({len(report.results) - report.failures} ok, {report.failures} failed)"
    )
    click.echo(f"Wrote {csv_path} and {summary_path}")
    if report.failures == len(report.results):
        raise CommandFailed("every sample failed", EXIT_DEGENERATE)


@cli.command(name="render")
@click.option(
    "--coefficients",
    type=click.Path(exists=True, dir_okay=False),
    required=True,
    help="RGCV file",
)
@click.option("--basis", "basis_path", type=BASIS_FILE, help="RGBM basis file")
@click.option(
    "--background",
    type=click.Path(exists=True, dir_okay=False),
    help="PPM to composite over",
)
@click.option(
    "--output",
    "-o",
    type=click.Path(dir_okay=False),
    required=True,
    help="PPM file to write",
)
@click.pass_context
def render(ctx, coefficients, basis_path, background, output):
    """Render a coefficient file with the configured camera."""
    config = _config(ctx)
    basis = _load_basis(config, basis_path)
    frame = render_face(
        basis,
        read_coefficients(coefficients),
        config.camera.to_camera(),
        background=read_image(background) if background else None,
    )
    write_image(output, frame.image)
    click.echo(f"Wrote {output}: {frame.covered_pixels} covered pixels")


@cli.command(name="export-obj")
@click.option(
    "--coefficients",
    type=click.Path(exists=True, dir_okay=False),
    help="RGCV file (default: mean face)",
)
@click.option("--basis", "basis_path", type=BASIS_FILE, help="RGBM basis file")
@click.option(
    "--output",
    "-o",
    type=click.Path(dir_okay=False),
    required=True,
    help="OBJ file to write",
)
@click.pass_context
def export_obj(ctx, coefficients, basis_path, output):
    """Export the morphed mesh with per-vertex albedo as OBJ."""
    config = _config(ctx)
    basis = _load_basis(config, basis_path)
    coeffs = read_coefficients(coefficients) if coefficients else CoefficientVector.zeros()
    geometry = morph_geometry(basis, coeffs).numpy()
    texture = morph_texture(basis, coeffs).clamp(0.0, 1.0).numpy()
    write_obj(geometry, texture, basis.triangles, output)
    click.echo(f"Wrote {output}: {basis.vertex_count} vertices")


if __name__ == "__main__":
    cli()
