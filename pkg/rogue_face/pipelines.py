"""Guidance and robustification pipelines.

The primary estimator is per-image coefficient optimization: a
:class:`FitSession` owns the coefficient vectors C_G, C_O, C_N, their Adam
states and the discriminator. :class:`AmortizedRegressor` is a small shared
network trained on triplet batches with the same objectives.
"""

import dataclasses
import logging
import math
import typing as ty

import numpy as np
import torch
from torch import nn

from .config import FitConfig
from .embed import Embedder, ReferenceEmbedder, grayscale_thumbnail
from .errors import DegenerateRenderError, InvalidArgumentError
from .grad import AdamState, GradientTape, adam_step, adam_update_module, backward
from .losses import (
    D_G,
    D_N,
    D_O,
    Discriminator,
    GuideTerms,
    consistency_loss,
    discriminator_forward,
    guide_total,
    huber,
    l2_consistency_loss,
    landmark_loss,
    perceptual_loss,
    photometric_loss,
    robust_total,
)
from .model import (
    COEFF_DIM,
    DTYPE,
    CoefficientVector,
    LossWeights,
    MorphableBasis,
    as_coefficient_tensor,
    regularization_loss,
)
from .render import Camera, LandmarkSet, project_landmarks, render_face

if ty.TYPE_CHECKING:
    from .degrade import TripletSample

LOG = logging.getLogger(__name__)

HISTORY_COLUMNS = (
    "stage",
    "iteration",
    "L_K",
    "L_GP",
    "L_P",
    "L_R",
    "L_O",
    "L_N",
    "L_C",
    "total",
)


@dataclasses.dataclass
class LossRecord:
    """Loss components of one iteration; components a stage does not compute stay None."""

    stage: str
    iteration: int
    total: float
    l_k: ty.Optional[float] = None
    l_gp: ty.Optional[float] = None
    l_p: ty.Optional[float] = None
    l_r: ty.Optional[float] = None
    l_o: ty.Optional[float] = None
    l_n: ty.Optional[float] = None
    l_c: ty.Optional[float] = None

    def row(self) -> ty.Tuple:
        return (
            self.stage,
            self.iteration,
            self.l_k,
            self.l_gp,
            self.l_p,
            self.l_r,
            self.l_o,
            self.l_n,
            self.l_c,
            self.total,
        )


def _value(x) -> ty.Optional[float]:
    if x is None:
        return None
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def _as_image(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        return image.detach().to(DTYPE)
    return torch.as_tensor(np.asarray(image, dtype=np.float64))


@dataclasses.dataclass
class FitSession:
    """State of one per-image fitting run over a triplet."""

    basis: MorphableBasis
    camera: Camera
    guiding_image: np.ndarray
    occluded_image: ty.Optional[np.ndarray] = None
    noisy_image: ty.Optional[np.ndarray] = None
    target_landmarks: ty.Optional[LandmarkSet] = None
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    config: FitConfig = dataclasses.field(default_factory=FitConfig)
    seed: int = 0
    embedder: ty.Optional[Embedder] = None
    c_g: CoefficientVector = dataclasses.field(default_factory=CoefficientVector.canonical)
    c_o: CoefficientVector = dataclasses.field(default_factory=CoefficientVector.canonical)
    c_n: CoefficientVector = dataclasses.field(default_factory=CoefficientVector.canonical)
    discriminator: ty.Optional[Discriminator] = None
    guidance_state: ty.Optional[AdamState] = None
    robust_state: ty.Optional[AdamState] = None
    discriminator_state: ty.Optional[AdamState] = None
    history: ty.List[LossRecord] = dataclasses.field(default_factory=list)
    guidance_done: bool = False

    def __post_init__(self):
        expected = (self.camera.image_height, self.camera.image_width, 3)
        for name in ("guiding_image", "occluded_image", "noisy_image"):
            image = getattr(self, name)
            if image is not None and tuple(np.shape(image)) != expected:
                raise InvalidArgumentError(
                    f"{name} has shape {tuple(np.shape(image))}, camera expects {expected}"
                )
        if self.embedder is None:
            self.embedder = ReferenceEmbedder(
                dim=self.config.embedding_dim, seed=self.config.embedder_seed
            )
        if self.discriminator is None and self.config.discriminator_enabled:
            self.discriminator = Discriminator(
                seed=self.config.discriminator_seed + self.seed,
                negative_slope=self.config.negative_slope,
            )

    @classmethod
    def from_sample(
        cls,
        basis: MorphableBasis,
        camera: Camera,
        sample: "TripletSample",
        weights: ty.Optional[LossWeights] = None,
        config: ty.Optional[FitConfig] = None,
        seed: int = 0,
        **kwargs,
    ) -> "FitSession":
        return cls(
            basis=basis,
            camera=camera,
            guiding_image=sample.guiding,
            occluded_image=sample.occluded,
            noisy_image=sample.noisy,
            target_landmarks=sample.landmarks,
            weights=weights or LossWeights(),
            config=config or FitConfig(),
            seed=seed,
            **kwargs,
        )

    def stage_history(self, stage: str) -> ty.List[LossRecord]:
        return [record for record in self.history if record.stage == stage]


def _guidance_objective(
    session: FitSession,
    coeffs: torch.Tensor,
    target: torch.Tensor,
    target_embedding: torch.Tensor,
    landmarks: ty.Optional[LandmarkSet],
) -> ty.Tuple[GuideTerms, torch.Tensor]:
    weights = session.weights
    frame = render_face(session.basis, coeffs, session.camera, background=target)
    l_gp = photometric_loss(frame, target)
    l_p = perceptual_loss(session.embedder.embed(frame.rgb), target_embedding)
    l_r = regularization_loss(coeffs, weights)
    if landmarks is not None:
        l_k = landmark_loss(project_landmarks(session.basis, coeffs, session.camera), landmarks)
    else:
        l_k = torch.zeros((), dtype=DTYPE)
    terms = GuideTerms(l_k=l_k, l_gp=l_gp, l_p=l_p, l_r=l_r)
    return terms, guide_total(terms, weights)


def decayed_learning_rate(config: FitConfig, iteration: int, iterations: int) -> float:
    """Exponential decay from ``learning_rate`` to ``learning_rate * lr_decay`` on the last iteration."""
    return config.learning_rate * config.lr_decay ** (iteration / max(1, iterations - 1))


def _fit_image(
    session: FitSession,
    stage: str,
    image,
    init: CoefficientVector,
    iterations: int,
    landmarks: ty.Optional[LandmarkSet],
) -> ty.Tuple[CoefficientVector, AdamState]:
    """Adam on the guidance objective, keeping the lowest-loss iterate.

    A step that raises the total is rejected: the next step starts again from
    the best iterate with its gradient and a step size shrunk by
    ``config.backtrack``. Accepted steps grow the step size back. The history
    records the loss of the iterate each step starts from, so it never
    increases.
    """
    config = session.config
    target = _as_image(image)
    target_embedding = session.embedder.embed(target).detach()
    state = AdamState(lr=config.learning_rate)
    coeffs = init.tensor()
    best: ty.Optional[ty.Tuple[torch.Tensor, torch.Tensor, LossRecord]] = None
    scale = 1.0
    for iteration in range(iterations):
        try:
            with GradientTape() as tape:
                c = tape.watch("coeffs", coeffs)
                terms, total = _guidance_objective(session, c, target, target_embedding, landmarks)
            grads = backward(tape, total)
        except DegenerateRenderError as e:
            raise DegenerateRenderError(f"{stage} fit aborted: {e}", iteration) from e
        record = LossRecord(
            stage=stage,
            iteration=iteration,
            total=_value(total),
            l_k=_value(terms.l_k) if landmarks is not None else None,
            l_gp=_value(terms.l_gp),
            l_p=_value(terms.l_p),
            l_r=_value(terms.l_r),
        )
        if not math.isfinite(record.total):
            raise DegenerateRenderError(f"{stage} fit reached a non-finite loss", iteration)
        gradient = grads["coeffs"]
        if best is not None and record.total > best[2].total:
            coeffs, gradient, record = best[0], best[1], dataclasses.replace(best[2], iteration=iteration)
            scale *= config.backtrack
        else:
            best = (coeffs, gradient, record)
            scale = min(1.0, scale / config.backtrack)
        session.history.append(record)

        state.lr = decayed_learning_rate(config, iteration, iterations) * scale
        (coeffs,), state = adam_step(state, [coeffs], [gradient])
        if not torch.isfinite(coeffs).all():
            raise DegenerateRenderError(f"{stage} fit diverged to non-finite coefficients", iteration)
        if config.log_every and iteration % config.log_every == 0:
            LOG.debug(
                f"{stage} it={iteration} total={record.total:.6g} L_GP={record.l_gp:.6g} "
                f"lr={state.lr:.3g}"
            )
    if best is None:
        return CoefficientVector(coeffs), state
    return CoefficientVector(best[0]), state


def fit_guidance(session: FitSession) -> CoefficientVector:
    """Fit C_G to the guiding image with landmark, photometric, perceptual and prior terms."""
    LOG.info(f"Guidance fit: {session.config.guidance_iterations} iterations")
    session.c_g, session.guidance_state = _fit_image(
        session,
        "guidance",
        session.guiding_image,
        session.c_g,
        session.config.guidance_iterations,
        session.target_landmarks,
    )
    session.guidance_done = True
    return session.c_g


def fit_naive(
    session: FitSession,
    image,
    init: ty.Optional[CoefficientVector] = None,
    landmarks: ty.Optional[LandmarkSet] = None,
    iterations: ty.Optional[int] = None,
) -> CoefficientVector:
    """Baseline: fit a degraded image on its own, with the guidance objective."""
    fitted, _ = _fit_image(
        session,
        "naive",
        image,
        init if init is not None else CoefficientVector.canonical(),
        session.config.guidance_iterations if iterations is None else iterations,
        landmarks,
    )
    return fitted


def _consistency_active(session: FitSession) -> bool:
    return session.config.use_consistency_loss and (
        session.config.consistency_mode == "l2" or session.discriminator is not None
    )


def fit_robust(session: FitSession) -> ty.Tuple[CoefficientVector, CoefficientVector]:
    """Fit C_O and C_N against the guiding image with adversarial consistency.

    C_G stays frozen. Each iteration takes one coefficient step on
    ``beta_O L_O + beta_N L_N - beta_C L_C`` followed by one discriminator step
    minimizing L_C. In ``l2`` consistency mode the consistency term is the
    direct coefficient distance and is added instead of subtracted.

    With ``config.robust_prior`` the coefficient step also carries
    ``alpha_R L_R`` for both vectors and, when the session has target
    landmarks, ``alpha_K L_K`` of both against the guiding landmarks. The
    step size decays as in the guidance fit.
    """
    if not session.guidance_done:
        raise InvalidArgumentError("fit_robust needs a completed guidance fit")
    config = session.config
    weights = session.weights
    guiding = _as_image(session.guiding_image)
    c_g = session.c_g.tensor()
    disc = session.discriminator
    adversarial = _consistency_active(session) and config.consistency_mode == "adversarial"
    l2_mode = _consistency_active(session) and config.consistency_mode == "l2"

    state = session.robust_state or AdamState(lr=config.learning_rate)
    disc_state = session.discriminator_state or AdamState(lr=config.discriminator_learning_rate)
    c_o = session.c_o.tensor()
    c_n = session.c_n.tensor()
    zero = torch.zeros((), dtype=DTYPE)
    landmarks = session.target_landmarks if config.robust_prior else None

    LOG.info(
        f"Robust fit: {config.robust_iterations} iterations, "
        f"consistency={'adversarial' if adversarial else 'l2' if l2_mode else 'off'}"
    )
    for iteration in range(config.robust_iterations):
        try:
            with GradientTape() as tape:
                co = tape.watch("c_o", c_o)
                cn = tape.watch("c_n", c_n)
                l_o = (
                    photometric_loss(render_face(session.basis, co, session.camera), guiding)
                    if config.use_occlusion_loss
                    else zero
                )
                l_n = (
                    photometric_loss(render_face(session.basis, cn, session.camera), guiding)
                    if config.use_noise_loss
                    else zero
                )
                if adversarial:
                    l_c = consistency_loss(disc, c_g, co, cn, (D_G, D_O, D_N), weights.huber_delta)
                    total = robust_total(l_o, l_n, l_c, weights)
                elif l2_mode:
                    l_c = l2_consistency_loss(c_g, co, cn)
                    total = robust_total(l_o, l_n, zero, weights) + weights.beta_c * l_c
                else:
                    l_c = None
                    total = robust_total(l_o, l_n, zero, weights)
                l_r = l_k = None
                if config.robust_prior:
                    l_r = regularization_loss(co, weights) + regularization_loss(cn, weights)
                    total = total + weights.alpha_r * l_r
                if landmarks is not None:
                    l_k = landmark_loss(
                        project_landmarks(session.basis, co, session.camera), landmarks
                    ) + landmark_loss(project_landmarks(session.basis, cn, session.camera), landmarks)
                    total = total + weights.alpha_k * l_k
            if not total.requires_grad:
                break
            grads = backward(tape, total)
        except DegenerateRenderError as e:
            raise DegenerateRenderError(f"robust fit aborted: {e}", iteration) from e

        session.history.append(
            LossRecord(
                stage="robust",
                iteration=iteration,
                total=_value(total),
                l_k=_value(l_k),
                l_r=_value(l_r),
                l_o=_value(l_o) if config.use_occlusion_loss else None,
                l_n=_value(l_n) if config.use_noise_loss else None,
                l_c=_value(l_c),
            )
        )
        state.lr = decayed_learning_rate(config, iteration, config.robust_iterations)
        (c_o, c_n), state = adam_step(state, [c_o, c_n], [grads["c_o"], grads["c_n"]])
        if not (torch.isfinite(c_o).all() and torch.isfinite(c_n).all()):
            raise DegenerateRenderError("robust fit diverged to non-finite coefficients", iteration)

        if adversarial:
            with GradientTape() as tape:
                tape.watch_module("disc", disc)
                l_d = consistency_loss(disc, c_g, c_o, c_n, (D_G, D_O, D_N), weights.huber_delta)
            disc_grads = backward(tape, l_d)
            adam_update_module(
                disc_state, disc, [disc_grads[f"disc.{name}"] for name, _ in disc.named_parameters()]
            )
        if config.log_every and iteration % config.log_every == 0:
            LOG.debug(f"robust it={iteration} total={_value(total):.6g} L_C={_value(l_c)}")

    session.c_o = CoefficientVector(c_o)
    session.c_n = CoefficientVector(c_n)
    session.robust_state = state
    session.discriminator_state = disc_state
    return session.c_o, session.c_n


def discriminator_accuracy(
    disc: Discriminator,
    guiding: ty.Sequence,
    robust: ty.Sequence,
) -> float:
    """Fraction of vectors whose argmax logit matches its label (guiding 0, robust 1).

    Ties resolve to index 0.
    """
    if len(guiding) == 0 or len(robust) == 0:
        raise InvalidArgumentError("discriminator_accuracy needs two nonempty sets")
    correct = 0
    with torch.no_grad():
        for label, vectors in ((0, guiding), (1, robust)):
            for c in vectors:
                logits = discriminator_forward(disc, c).numpy()
                correct += int(np.argmax(logits) == label)
    return correct / (len(guiding) + len(robust))


def train_discriminator(
    disc: Discriminator,
    guiding: ty.Sequence,
    robust: ty.Sequence,
    steps: int,
    lr: float = 1e-2,
    delta: float = 1.0,
    state: ty.Optional[AdamState] = None,
) -> AdamState:
    """Train ``disc`` alone to tell frozen guiding vectors from frozen robust ones.

    Full-batch Adam on the mean per-vector Huber loss against the one-hot
    labels used by the consistency loss. Returns the optimizer state.
    """
    if len(guiding) == 0 or len(robust) == 0:
        raise InvalidArgumentError("train_discriminator needs two nonempty sets")
    if steps < 0:
        raise InvalidArgumentError(f"steps must be nonnegative, got {steps}")
    inputs = torch.stack([as_coefficient_tensor(c).detach() for c in (*guiding, *robust)])
    labels = torch.tensor([D_G] * len(guiding) + [D_O] * len(robust), dtype=DTYPE)
    state = state or AdamState(lr=lr)
    names = [name for name, _ in disc.named_parameters()]
    for step in range(steps):
        with GradientTape() as tape:
            tape.watch_module("disc", disc)
            loss = huber(discriminator_forward(disc, inputs) - labels, delta).sum(dim=1).mean()
        grads = backward(tape, loss)
        adam_update_module(state, disc, [grads[f"disc.{name}"] for name in names])
        if step % 100 == 0:
            LOG.debug(f"discriminator step={step} loss={float(loss.detach()):.6g}")
    return state


class AmortizedRegressor(nn.Module):
    """Tiny shared coefficient estimator: 32x32 grayscale -> 256 hidden -> 257.

    Outputs are offsets from the canonical coefficient vector, so a zero
    network predicts the canonical face.
    """

    def __init__(self, seed: int = 0, hidden: int = 256, size: int = 32, negative_slope: float = 0.2):
        super().__init__()
        self.size = size
        self.negative_slope = negative_slope
        self.fc1 = nn.Linear(size * size, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, COEFF_DIM, dtype=DTYPE)
        self.register_buffer("offset", CoefficientVector.canonical().tensor())
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer, scale in ((self.fc1, 1.0), (self.fc2, 1e-2)):
                bound = scale / math.sqrt(layer.in_features)
                for parameter in (layer.weight, layer.bias):
                    uniform = torch.rand(parameter.shape, generator=generator, dtype=DTYPE)
                    parameter.copy_((2.0 * uniform - 1.0) * bound)
        self.state: ty.Optional[AdamState] = None
        self.steps = 0
        self.history: ty.List[float] = []

    def forward(self, image) -> torch.Tensor:
        x = grayscale_thumbnail(image, self.size).reshape(-1)
        hidden = nn.functional.leaky_relu(self.fc1(x), self.negative_slope)
        return self.fc2(hidden) + self.offset

    def predict(self, image) -> CoefficientVector:
        with torch.no_grad():
            return CoefficientVector(self(image))


def _regressor_guidance(
    regressor: AmortizedRegressor,
    sample: "TripletSample",
    basis: MorphableBasis,
    camera: Camera,
    weights: LossWeights,
    embedder: Embedder,
) -> ty.Tuple[torch.Tensor, torch.Tensor]:
    guiding = _as_image(sample.guiding)
    c_g = regressor(guiding)
    frame = render_face(basis, c_g, camera, background=guiding)
    l_gp = photometric_loss(frame, guiding)
    l_p = perceptual_loss(embedder.embed(frame.rgb), embedder.embed(guiding).detach())
    l_r = regularization_loss(c_g, weights)
    if sample.landmarks is not None:
        l_k = landmark_loss(project_landmarks(basis, c_g, camera), sample.landmarks)
    else:
        l_k = torch.zeros((), dtype=DTYPE)
    return c_g, guide_total(GuideTerms(l_k, l_gp, l_p, l_r), weights)


def train_amortized(
    regressor: AmortizedRegressor,
    dataset: ty.Sequence["TripletSample"],
    epochs: int,
    *,
    basis: MorphableBasis,
    camera: Camera,
    weights: ty.Optional[LossWeights] = None,
    config: ty.Optional[FitConfig] = None,
    discriminator: ty.Optional[Discriminator] = None,
    embedder: ty.Optional[Embedder] = None,
    seed: int = 0,
) -> AmortizedRegressor:
    """Train the regressor on sub-batches of ``batch_size`` triplets.

    Each sub-batch contributes ``batch_size`` clean, occluded and noisy images
    (15 at the default of 5) and takes exactly one optimizer step. Clean
    predictions get the guidance objective; occluded and noisy predictions get
    the robust objective against the guiding images, with the clean predictions
    frozen as consistency targets.
    """
    if len(dataset) == 0:
        raise InvalidArgumentError("train_amortized needs a nonempty dataset")
    weights = weights or LossWeights()
    config = config or FitConfig()
    embedder = embedder or ReferenceEmbedder(dim=config.embedding_dim, seed=config.embedder_seed)
    if discriminator is None and config.discriminator_enabled:
        discriminator = Discriminator(seed=config.discriminator_seed, negative_slope=config.negative_slope)
    if regressor.state is None:
        regressor.state = AdamState(lr=config.regressor_learning_rate)
    disc_state = AdamState(lr=config.discriminator_learning_rate)
    adversarial = (
        discriminator is not None
        and config.use_consistency_loss
        and config.consistency_mode == "adversarial"
    )
    rng = np.random.default_rng(seed)
    names = [name for name, _ in regressor.named_parameters()]

    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        epoch_guidance = []
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start : start + config.batch_size]]
            with GradientTape() as tape:
                tape.watch_module("regressor", regressor)
                guide_losses, robust_losses = [], []
                preds_g, preds_o, preds_n = [], [], []
                for sample in batch:
                    c_g, g_loss = _regressor_guidance(regressor, sample, basis, camera, weights, embedder)
                    guiding = _as_image(sample.guiding)
                    c_o = regressor(_as_image(sample.occluded))
                    c_n = regressor(_as_image(sample.noisy))
                    l_o = photometric_loss(render_face(basis, c_o, camera), guiding)
                    l_n = photometric_loss(render_face(basis, c_n, camera), guiding)
                    frozen = c_g.detach()
                    if adversarial:
                        l_c = consistency_loss(discriminator, frozen, c_o, c_n, delta=weights.huber_delta)
                        robust = robust_total(l_o, l_n, l_c, weights)
                    elif config.use_consistency_loss and config.consistency_mode == "l2":
                        robust = robust_total(l_o, l_n, 0.0, weights) + weights.beta_c * l2_consistency_loss(
                            frozen, c_o, c_n
                        )
                    else:
                        robust = robust_total(l_o, l_n, 0.0, weights)
                    guide_losses.append(g_loss)
                    robust_losses.append(robust)
                    preds_g.append(frozen)
                    preds_o.append(c_o.detach())
                    preds_n.append(c_n.detach())
                guidance = torch.stack(guide_losses).mean()
                total = guidance + torch.stack(robust_losses).mean()
            grads = backward(tape, total)
            adam_update_module(regressor.state, regressor, [grads[f"regressor.{n}"] for n in names])
            regressor.steps += 1
            epoch_guidance.append(float(guidance.detach()))

            if adversarial:
                with GradientTape() as tape:
                    tape.watch_module("disc", discriminator)
                    l_d = sum(
                        consistency_loss(discriminator, g, o, n, delta=weights.huber_delta)
                        for g, o, n in zip(preds_g, preds_o, preds_n)
                    ) / len(batch)
                disc_grads = backward(tape, l_d)
                adam_update_module(
                    disc_state,
                    discriminator,
                    [disc_grads[f"disc.{name}"] for name, _ in discriminator.named_parameters()],
                )
        regressor.history.append(float(np.mean(epoch_guidance)))
        LOG.debug(f"epoch {epoch}: mean guidance loss {regressor.history[-1]:.6g}")
    return regressor


def mean_guidance_loss(
    regressor: AmortizedRegressor,
    dataset: ty.Sequence["TripletSample"],
    *,
    basis: MorphableBasis,
    camera: Camera,
    weights: ty.Optional[LossWeights] = None,
    embedder: ty.Optional[Embedder] = None,
) -> float:
    """Mean guidance objective of the regressor's clean predictions over ``dataset``."""
    weights = weights or LossWeights()
    embedder = embedder or ReferenceEmbedder()
    with torch.no_grad():
        losses = [
            float(_regressor_guidance(regressor, sample, basis, camera, weights, embedder)[1])
            for sample in dataset
        ]
    return float(np.mean(losses))
