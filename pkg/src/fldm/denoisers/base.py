from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum

import numpy as np


class Role(str, Enum):
    IMAGE = "image"  # frames are predicted independently
    VIDEO = "video"  # frames may interact


class DenoiserError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ConditionEmbedding:
    """Prompt embedding fed to a denoiser.

    ``label`` names the class the vector came from (None for null / optimized
    embeddings). Analytic denoisers read the label, trained ones the vector.
    """

    vector: np.ndarray
    is_null: bool = False
    label: str | None = None

    def __post_init__(self) -> None:
        v = np.array(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise DenoiserError("condition vector must be a finite 1-d array")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    def with_vector(self, vector: np.ndarray) -> "ConditionEmbedding":
        return ConditionEmbedding(vector, self.is_null, self.label)


class Denoiser(ABC):
    """Noise predictor eps_hat(z_t, t, cond) over an ``(f, d)`` latent."""

    role: Role

    @abstractmethod
    def predict_eps(
        self,
        z: np.ndarray,
        t: int,
        cond: ConditionEmbedding,
        image_cond: ConditionEmbedding | None = None,
    ) -> np.ndarray: ...

    @abstractmethod
    def embed(self, label: str) -> ConditionEmbedding: ...

    @property
    @abstractmethod
    def null_embedding(self) -> ConditionEmbedding: ...

    def condition(self, c: "ConditionEmbedding | str | None") -> ConditionEmbedding:
        """Accept a label, an embedding or None (meaning the null embedding)."""
        if c is None:
            return self.null_embedding
        if isinstance(c, str):
            return self.embed(c)
        return c
