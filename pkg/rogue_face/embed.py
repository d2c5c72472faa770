"""Image embedders used by the perceptual loss and the perceptual evaluation metric."""

import logging
import os
import typing as ty

import numpy as np
import torch
import torch.nn.functional as F

from .errors import FormatError, InvalidArgumentError
from .model import DTYPE

LOG = logging.getLogger(__name__)

Embedding = torch.Tensor

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def normalize(vector: torch.Tensor) -> Embedding:
    norm = torch.linalg.norm(vector)
    if float(norm.detach()) == 0.0:
        raise InvalidArgumentError("cannot normalize a zero-norm feature vector")
    return vector / norm


def grayscale_thumbnail(image, size: int = 32) -> torch.Tensor:
    """Luma of an HxWx3 image, area-averaged down to ``size`` x ``size``."""
    if not isinstance(image, torch.Tensor):
        image = torch.as_tensor(np.asarray(image, dtype=np.float64))
    image = image.to(DTYPE)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidArgumentError(f"expected an HxWx3 image, got {tuple(image.shape)}")
    gray = image @ torch.tensor(GRAY_WEIGHTS, dtype=DTYPE)
    return F.adaptive_avg_pool2d(gray[None, None], (size, size))[0, 0]


class Embedder(ty.Protocol):
    """Maps an image to a unit-norm embedding; deterministic per image."""

    dim: int

    def embed(self, image, key: ty.Optional[str] = None) -> Embedding: ...


class ReferenceEmbedder:
    """Seeded random-projection embedder.

    The image is reduced to a 32x32 grayscale thumbnail, projected by a fixed
    Gaussian matrix and L2-normalized. Differentiable with respect to the image.
    """

    def __init__(self, dim: int = 128, size: int = 32, seed: int = 0):
        self.dim = dim
        self.size = size
        self.seed = seed
        rng = np.random.default_rng(seed)
        projection = rng.normal(0.0, 1.0 / np.sqrt(size * size), size=(dim, size * size))
        self._projection = torch.as_tensor(projection, dtype=DTYPE)

    def embed(self, image, key: ty.Optional[str] = None) -> Embedding:
        thumbnail = grayscale_thumbnail(image, self.size)
        return normalize(self._projection @ thumbnail.reshape(-1))

    __call__ = embed


class ExternalEmbedder:
    """Embeddings precomputed offline, looked up by image path.

    The archive is an ``.npz`` whose array names are image paths relative to
    ``root`` and whose values are unit vectors of one common dimension.
    """

    def __init__(self, path: ty.Union[str, os.PathLike], root: ty.Optional[str] = None):
        self.path = os.fspath(path)
        self.root = root
        with np.load(self.path) as archive:
            self._table = {name: np.asarray(archive[name], dtype=np.float64) for name in archive.files}
        if not self._table:
            raise FormatError(self.path, 0, "embedding archive is empty")
        dims = {vector.shape for vector in self._table.values()}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise FormatError(self.path, 0, f"embeddings must share one 1-D shape, got {dims}")
        for name, vector in self._table.items():
            if abs(np.linalg.norm(vector) - 1.0) > 1e-6:
                raise FormatError(self.path, 0, f"embedding for '{name}' is not unit norm")
        self.dim = next(iter(dims))[0]
        LOG.info(f"Loaded {len(self._table)} external embeddings of dim {self.dim}")

    def _lookup(self, key: str) -> np.ndarray:
        candidates = [key]
        if self.root is not None:
            candidates.append(os.path.relpath(key, self.root))
        for candidate in candidates:
            if candidate in self._table:
                return self._table[candidate]
        raise InvalidArgumentError(f"no precomputed embedding for '{key}' in {self.path}")

    def embed(self, image, key: ty.Optional[str] = None) -> Embedding:
        if key is None:
            raise InvalidArgumentError("ExternalEmbedder needs the image path as key")
        return torch.as_tensor(self._lookup(key), dtype=DTYPE)

    __call__ = embed
