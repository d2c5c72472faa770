"""End-to-end fitting behaviour on synthetic faces with known coefficients.

These run hundreds of render/backward passes and are marked slow;
select them with ``pytest -m slow``.
"""

import numpy as np
import pytest

from rogue_face.config import DatasetConfig, EvalConfig, FitConfig, RunConfig
from rogue_face.degrade import build_triplet_dataset
from rogue_face.evaluate import evaluate_samples
from rogue_face.losses import Discriminator, landmark_loss
from rogue_face.model import CoefficientVector
from rogue_face.pipelines import (
    AmortizedRegressor,
    FitSession,
    discriminator_accuracy,
    fit_guidance,
    fit_naive,
    fit_robust,
    mean_guidance_loss,
    train_amortized,
    train_discriminator,
)
from rogue_face.render import frame_rmse, project_landmarks, render_face

from tests.conftest import perturbed

pytestmark = pytest.mark.slow

ITERATIONS = 600


def _self_rendered_session(basis, camera, truth, seed=0, **kwargs):
    target = render_face(basis, truth, camera).image
    return FitSession(
        basis=basis,
        camera=camera,
        guiding_image=target,
        target_landmarks=project_landmarks(basis, truth, camera),
        config=FitConfig(guidance_iterations=ITERATIONS, robust_iterations=ITERATIONS, log_every=0),
        seed=seed,
        **kwargs,
    )


def test_self_reconstruction(basis, camera64):
    passed = 0
    for seed in range(10):
        truth = perturbed(seed)
        session = _self_rendered_session(basis, camera64, truth, seed=seed)
        fitted = fit_guidance(session)
        rmse = frame_rmse(render_face(basis, fitted, camera64), session.guiding_image)
        lk = float(landmark_loss(project_landmarks(basis, fitted, camera64), session.target_landmarks))
        assert len(session.stage_history("guidance")) == ITERATIONS
        if rmse < 2 / 255 and lk < 0.5:
            passed += 1
    assert passed >= 9


def test_history_settles_after_transient(basis, camera64):
    session = _self_rendered_session(basis, camera64, perturbed(3))
    fit_guidance(session)
    totals = [r.total for r in session.stage_history("guidance")]
    rising = [i for i in range(100, len(totals) - 50) if totals[i + 50] > totals[i]]
    assert rising == []


def test_clean_triplet_keeps_guidance_coefficients(basis, camera64):
    session = _self_rendered_session(basis, camera64, perturbed(3))
    session.occluded_image = session.guiding_image.copy()
    session.noisy_image = session.guiding_image.copy()
    c_g = fit_guidance(session)
    c_o, c_n = fit_robust(session)
    scale = 0.05 * np.linalg.norm(c_g.values)
    assert np.linalg.norm(c_o.values - c_g.values) < scale
    assert np.linalg.norm(c_n.values - c_g.values) < scale


def _triplets(basis, camera, **dataset):
    config = DatasetConfig(identities=10, per_identity=2, **dataset)
    samples, _ = build_triplet_dataset(
        basis, camera, identities=10, per_identity=2, seed=21, config=config
    )
    return samples


@pytest.fixture(scope="module")
def occluded_triplets(small_basis, camera32):
    return _triplets(small_basis, camera32, occlusion_min=0.3, occlusion_max=0.5)


def _evaluate(samples, basis, camera, fitter, protocol="synthetic_paired", **fit):
    config = RunConfig(
        seed=21,
        fit=FitConfig(
            guidance_iterations=ITERATIONS, robust_iterations=ITERATIONS, log_every=0, **fit
        ),
        eval=EvalConfig(protocol=protocol, fitter=fitter),
    )
    report = evaluate_samples(samples, basis, camera, config)
    assert report.failures == 0
    return report


def _compare(robust, naive):
    """(fraction of trials where robust is no worse, ratio of mean shape errors)"""
    naive_errors = {r.sample_id: r.shape_error for r in naive.results}
    improved = [r.shape_error <= naive_errors[r.sample_id] for r in robust.results]
    return float(np.mean(improved)), robust.mean_shape_error() / naive.mean_shape_error()


@pytest.fixture(scope="module")
def occlusion_reports(occluded_triplets, small_basis, camera32):
    return {
        fitter: _evaluate(occluded_triplets, small_basis, camera32, fitter)
        for fitter in ("naive", "rogue")
    }


def test_robust_fit_beats_naive_under_occlusion(occlusion_reports):
    improved, ratio = _compare(occlusion_reports["rogue"], occlusion_reports["naive"])
    assert improved >= 0.8
    assert ratio <= 0.8


@pytest.mark.parametrize(
    "dataset",
    [
        {"noise_kinds": ("gaussian",), "gaussian_sigma": 0.15},
        {"noise_kinds": ("salt_pepper",), "salt_pepper_p": 0.1},
    ],
    ids=["gaussian", "salt_pepper"],
)
def test_robust_fit_beats_naive_under_noise(small_basis, camera32, dataset):
    samples = _triplets(small_basis, camera32, **dataset)
    naive = _evaluate(samples, small_basis, camera32, "naive", protocol="noise")
    robust = _evaluate(samples, small_basis, camera32, "rogue", protocol="noise")
    improved, ratio = _compare(robust, naive)
    assert improved >= 0.8
    assert ratio <= 0.85


def test_adversarial_consistency_no_worse_than_l2(
    occlusion_reports, occluded_triplets, small_basis, camera32
):
    l2 = _evaluate(occluded_triplets, small_basis, camera32, "rogue", consistency_mode="l2")
    assert occlusion_reports["rogue"].mean_shape_error() <= l2.mean_shape_error()


def test_discriminator_is_confused_only_by_robust_fits(occluded_triplets, small_basis, camera32):
    config = FitConfig(guidance_iterations=300, robust_iterations=300, log_every=0)
    disc = Discriminator(seed=21)
    guiding: dict = {}
    c_gs, c_os, naive = [], [], []
    for sample in occluded_triplets:
        session = FitSession.from_sample(small_basis, camera32, sample, config=config, discriminator=disc)
        if sample.identity not in guiding:
            guiding[sample.identity] = fit_guidance(session)
        session.c_g = guiding[sample.identity]
        session.guidance_done = True
        c_o, _ = fit_robust(session)
        c_gs.append(session.c_g)
        c_os.append(c_o)
        naive.append(fit_naive(session, sample.occluded, init=CoefficientVector.canonical()))

    assert 0.35 <= discriminator_accuracy(disc, c_gs, c_os) <= 0.65

    alone = Discriminator(seed=21)
    train_discriminator(alone, c_gs, naive, steps=2000)
    assert discriminator_accuracy(alone, c_gs, naive) >= 0.9


def test_amortized_training_lowers_guidance_loss(small_basis, camera32):
    samples, _ = build_triplet_dataset(small_basis, camera32, identities=10, per_identity=1, seed=4)
    regressor = AmortizedRegressor(seed=0)
    before = mean_guidance_loss(regressor, samples, basis=small_basis, camera=camera32)
    train_amortized(
        regressor, samples, 200, basis=small_basis, camera=camera32, config=FitConfig(log_every=0)
    )
    after = mean_guidance_loss(regressor, samples, basis=small_basis, camera=camera32)
    assert after < before
