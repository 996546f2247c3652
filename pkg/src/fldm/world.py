"""Toy data universe: Gaussian video priors, a linear codec and a frozen embedder.

A "video" is an ``(f, d)`` float array, one row per frame. Class ``c`` draws
frame ``k`` around ``mu_c + k * v_c`` with stationary AR(1) noise of scale
``sigma_c`` and lag-one correlation ``rho``, so the stacked video is Gaussian
with covariance blocks ``sigma_c**2 * rho**|j-k| * I_d``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np


class WorldError(ValueError):
    """Bad prior / codec / embedder parameters or inputs."""


class UnknownClassError(WorldError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0])


@dataclass(frozen=True, eq=False)
class SyntheticVideoPrior:
    d: int
    f: int
    class_means: Mapping[str, np.ndarray]
    sigma: Mapping[str, float]
    drift: Mapping[str, np.ndarray]
    rho: float

    def __post_init__(self) -> None:
        if self.d < 1 or self.f < 1:
            raise WorldError("d and f must be positive")
        if not 0.0 <= self.rho < 1.0:
            raise WorldError(f"rho must lie in [0, 1), got {self.rho}")
        labels = list(self.class_means)
        if not labels:
            raise WorldError("prior needs at least one class")
        if set(labels) != set(self.sigma) or set(labels) != set(self.drift):
            raise WorldError("class_means, sigma and drift must share labels")
        means, drifts = {}, {}
        for c in labels:
            mu = np.asarray(self.class_means[c], dtype=np.float64)
            v = np.asarray(self.drift[c], dtype=np.float64)
            if mu.shape != (self.d,) or v.shape != (self.d,):
                raise WorldError(f"class {c!r}: mean and drift must have length d={self.d}")
            if not self.sigma[c] > 0:
                raise WorldError(f"class {c!r}: sigma must be positive")
            mu.setflags(write=False)
            v.setflags(write=False)
            means[c], drifts[c] = mu, v
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "drift", drifts)
        object.__setattr__(self, "sigma", {c: float(self.sigma[c]) for c in labels})

    @property
    def labels(self) -> list[str]:
        return list(self.class_means)

    def check_label(self, c: str) -> None:
        if c not in self.class_means:
            raise UnknownClassError(f"unknown class label {c!r}; known: {self.labels}")

    def frame_means(self, c: str) -> np.ndarray:
        """``(f, d)`` array of per-frame means ``mu_c + k * v_c``."""
        self.check_label(c)
        k = np.arange(self.f, dtype=np.float64)[:, None]
        return self.class_means[c][None, :] + k * self.drift[c][None, :]

    def temporal_correlation(self) -> np.ndarray:
        k = np.arange(self.f)
        return self.rho ** np.abs(k[:, None] - k[None, :])

    def joint_covariance(self, c: str) -> np.ndarray:
        """Covariance of the row-major flattened ``(f*d,)`` video."""
        self.check_label(c)
        return self.sigma[c] ** 2 * np.kron(self.temporal_correlation(), np.eye(self.d))

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "f": self.f,
            "rho": self.rho,
            "classes": {
                c: {
                    "mean": self.class_means[c].tolist(),
                    "sigma": self.sigma[c],
                    "drift": self.drift[c].tolist(),
                }
                for c in self.labels
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SyntheticVideoPrior":
        classes = data["classes"]
        return cls(
            d=int(data["d"]),
            f=int(data["f"]),
            rho=float(data["rho"]),
            class_means={c: v["mean"] for c, v in classes.items()},
            sigma={c: v["sigma"] for c, v in classes.items()},
            drift={c: v.get("drift", [0.0] * int(data["d"])) for c, v in classes.items()},
        )


def sample_video(
    prior: SyntheticVideoPrior, c: str, seed: int | np.random.Generator
) -> np.ndarray:
    """Draw one clean ``(f, d)`` video of class ``c``."""
    prior.check_label(c)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    e = rng.standard_normal((prior.f, prior.d))
    noise = np.empty_like(e)
    noise[0] = e[0]
    innov = np.sqrt(1.0 - prior.rho**2)
    for k in range(1, prior.f):
        noise[k] = prior.rho * noise[k - 1] + innov * e[k]
    return prior.frame_means(c) + prior.sigma[c] * noise


@dataclass(frozen=True, eq=False)
class LatentCodec:
    """Frame-wise affine map ``z = A x + b`` and its exact inverse."""

    matrix: np.ndarray
    offset: np.ndarray
    inverse: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        A = np.asarray(self.matrix, dtype=np.float64)
        b = np.asarray(self.offset, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or b.shape != (A.shape[0],):
            raise WorldError("codec needs a square matrix and matching offset")
        cond = np.linalg.cond(A)
        if not cond < 100:
            raise WorldError(f"codec matrix condition number {cond:.3g} >= 100")
        A.setflags(write=False)
        b.setflags(write=False)
        inv = np.linalg.inv(A)
        inv.setflags(write=False)
        object.__setattr__(self, "matrix", A)
        object.__setattr__(self, "offset", b)
        object.__setattr__(self, "inverse", inv)

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def identity(cls, d: int) -> "LatentCodec":
        return cls(np.eye(d), np.zeros(d))

    @classmethod
    def random(cls, d: int, seed: int, offset_scale: float = 0.5) -> "LatentCodec":
        """Seeded random rotation times a diagonal scaling in [0.5, 2]."""
        rng = np.random.default_rng(seed)
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        q = q * np.sign(np.diag(r))
        scales = rng.uniform(0.5, 2.0, size=d)
        offset = offset_scale * rng.standard_normal(d)
        return cls(q * scales[None, :], offset)

    def to_dict(self) -> dict:
        return {"matrix": self.matrix.tolist(), "offset": self.offset.tolist()}


def _check_frames(codec: LatentCodec, arr) -> np.ndarray:
    x = np.asarray(arr, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codec.d:
        raise WorldError(f"expected (frames, {codec.d}) array, got shape {x.shape}")
    return x


def encode(codec: LatentCodec, video) -> np.ndarray:
    x = _check_frames(codec, video)
    return x @ codec.matrix.T + codec.offset


def decode(codec: LatentCodec, latent) -> np.ndarray:
    z = _check_frames(codec, latent)
    return (z - codec.offset) @ codec.inverse.T


class EmbeddingError(WorldError):
    """A projection collapsed to the zero vector."""


@dataclass(frozen=True, eq=False)
class FrozenEmbedder:
    """Fixed linear feature map with orthonormal columns, plus class text anchors.

    Orthonormal columns preserve inner products, so orthogonal class means give
    orthogonal anchors.
    """

    projection: np.ndarray
    anchors: Mapping[str, np.ndarray]

    @classmethod
    def build(cls, prior: SyntheticVideoPrior, k: int | None = None, seed: int = 0) -> "FrozenEmbedder":
        k = prior.d if k is None else k
        if k < prior.d:
            raise WorldError("embedding dimension must be >= d")
        rng = np.random.default_rng(seed)
        q, r = np.linalg.qr(rng.standard_normal((k, prior.d)))
        proj = q * np.sign(np.diag(r))[None, :]
        proj.setflags(write=False)
        anchors = {}
        for c in prior.labels:
            anchors[c] = _normalize(proj @ prior.class_means[c])
            anchors[c].setflags(write=False)
        return cls(proj, anchors)

    @property
    def k(self) -> int:
        return self.projection.shape[0]


def _normalize(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise EmbeddingError("cannot normalize a zero or non-finite projection")
    return v / norm


def embed_frames(embedder: FrozenEmbedder, video) -> np.ndarray:
    """Unit-norm feature per frame, shape ``(f, k)``."""
    x = np.asarray(video, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != embedder.projection.shape[1]:
        raise WorldError(f"video shape {x.shape} does not match embedder input")
    return _normalize(x @ embedder.projection.T)


def embed_text(embedder: FrozenEmbedder, c: str) -> np.ndarray:
    try:
        return embedder.anchors[c]
    except KeyError:
        raise UnknownClassError(f"unknown class label {c!r}") from None


def standard_world(
    codec_seed: int = 7, embedder_seed: int = 11, mean_scale: float = 2.0
) -> tuple[SyntheticVideoPrior, LatentCodec, FrozenEmbedder]:
    """The pinned fixture: d=4, f=8, two classes with orthogonal means,
    rho=0.9, sigma=1, per-frame drift of norm 0.1."""
    d = 4
    prior = SyntheticVideoPrior(
        d=d,
        f=8,
        class_means={
            "source": mean_scale * np.eye(d)[0],
            "target": mean_scale * np.eye(d)[1],
        },
        sigma={"source": 1.0, "target": 1.0},
        drift={"source": 0.1 * np.eye(d)[2], "target": 0.1 * np.eye(d)[2]},
        rho=0.9,
    )
    codec = LatentCodec.random(d, codec_seed)
    embedder = FrozenEmbedder.build(prior, seed=embedder_seed)
    return prior, codec, embedder


def write_video_csv(path: str | Path, video: np.ndarray) -> None:
    """One row per frame, columns ``frame, x0..x{d-1}``."""
    video = np.asarray(video)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame"] + [f"x{j}" for j in range(video.shape[1])])
        for k, row in enumerate(video):
            w.writerow([k] + [repr(float(v)) for v in row])


def read_video_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r[1:]] for r in rows])
