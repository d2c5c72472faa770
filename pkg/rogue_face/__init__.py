"""Robust 3D morphable model fitting for occluded and noisy face images."""

__version__ = "0.1.0"

from .errors import (  # noqa
    ClippedLandmarkError,
    DegenerateRenderError,
    FormatError,
    InvalidArgumentError,
    RogueError,
)
from .model import (  # noqa
    CoefficientVector,
    LossWeights,
    MorphableBasis,
    generate_synthetic_basis,
    morph_geometry,
    morph_texture,
    regularization_loss,
)
from .render import Camera, LandmarkSet, RenderedFrame, project_landmarks, render_face  # noqa
