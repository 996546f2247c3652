"""Deterministic DDIM sampling / inversion with classifier-free guidance."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import kernels
from .denoisers.base import ConditionEmbedding, Denoiser
from .schedule import NoiseSchedule


class EngineError(ValueError):
    pass


@dataclass(frozen=True)
class GuidanceConfig:
    """Classifier-free guidance settings.

    ``image_scale`` switches on dual guidance with ``image_cond`` as the second
    channel. ``null_overrides`` maps every timestep to its own null embedding
    (the output of null-text inversion).
    """

    text_scale: float = 1.0
    image_scale: float | None = None
    image_cond: ConditionEmbedding | str | None = None
    null: ConditionEmbedding | None = None
    null_overrides: Mapping[int, ConditionEmbedding] | None = None

    def __post_init__(self) -> None:
        if not (np.isfinite(self.text_scale) and self.text_scale >= 0):
            raise EngineError("text guidance scale must be finite and >= 0")
        if self.image_scale is not None:
            if not (np.isfinite(self.image_scale) and self.image_scale >= 0):
                raise EngineError("image guidance scale must be finite and >= 0")
            if self.image_cond is None:
                raise EngineError("dual guidance needs an image condition")

    def validate(self, T: int) -> None:
        if self.null_overrides is not None:
            missing = [t for t in range(1, T + 1) if t not in self.null_overrides]
            if missing:
                raise EngineError(f"null-embedding overrides missing for t={missing[:5]}")

    def null_for(self, denoiser: Denoiser, t: int) -> ConditionEmbedding:
        if self.null_overrides is not None:
            try:
                return self.null_overrides[t]
            except KeyError:
                raise EngineError(f"no null-embedding override for t={t}") from None
        return self.null if self.null is not None else denoiser.null_embedding


@dataclass
class Trajectory:
    """Latents in the order they were produced, with their timesteps.

    Sampling runs store ``z_T .. z_0`` (``timesteps`` T..0); inversion runs
    store ``z_0 .. z_T``.
    """

    latents: list[np.ndarray]
    timesteps: list[int]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.latents)

    def at(self, t: int) -> np.ndarray:
        return self.latents[self.timesteps.index(t)]

    def to_csv(self, path: str | Path) -> None:
        """Columns ``timestep, frame, dim, value``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["timestep", "frame", "dim", "value"])
            for t, z in zip(self.timesteps, self.latents):
                for (k, j), v in np.ndenumerate(z):
                    w.writerow([t, k, j, repr(float(v))])


def _check_t(t: int, schedule: NoiseSchedule) -> None:
    if not 1 <= t <= schedule.T:
        raise EngineError(f"timestep {t} outside [1, {schedule.T}]")


def _check_pair(z, eps) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z.shape != eps.shape:
        raise EngineError(f"latent shape {z.shape} != eps shape {eps.shape}")
    return z, eps


def ddim_sample_step(z_t, eps_hat, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """One deterministic denoising step z_t -> z_{t-1}."""
    _check_t(t, schedule)
    z, eps = _check_pair(z_t, eps_hat)
    return kernels.ddim_step(z, eps, schedule.alpha_bars[t], schedule.alpha_bars[t - 1])


def ddim_invert_step(z_prev, eps_hat, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """One inversion step z_{t-1} -> z_t, the algebraic inverse of the above."""
    _check_t(t, schedule)
    z, eps = _check_pair(z_prev, eps_hat)
    return kernels.ddim_invert(z, eps, schedule.alpha_bars[t], schedule.alpha_bars[t - 1])


def guided_eps(
    denoiser: Denoiser,
    z_t,
    t: int,
    cond: ConditionEmbedding | str,
    guidance: GuidanceConfig,
) -> np.ndarray:
    cond = denoiser.condition(cond)
    null = guidance.null_for(denoiser, t)
    if guidance.image_scale is None:
        s = guidance.text_scale
        if s == 1.0:
            return denoiser.predict_eps(z_t, t, cond)
        eps_c = denoiser.predict_eps(z_t, t, cond)
        eps_u = denoiser.predict_eps(z_t, t, null)
        if s == 0.0:
            return eps_u
        return kernels.cfg(eps_u, eps_c, s)
    img = denoiser.condition(guidance.image_cond)
    eps_uu = denoiser.predict_eps(z_t, t, null)
    eps_ui = denoiser.predict_eps(z_t, t, null, image_cond=img)
    eps_ci = denoiser.predict_eps(z_t, t, cond, image_cond=img)
    # image term first, then text on top of the image-conditioned prediction
    return kernels.cfg(eps_uu, eps_ui, guidance.image_scale) + guidance.text_scale * (eps_ci - eps_ui)


def _check_latent(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1 or z.shape[1] < 1:
        raise EngineError(f"latent must be a non-empty (f, d) array, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise EngineError("latent has non-finite entries")
    return z


def ddim_sample_loop(
    denoiser: Denoiser,
    z_T,
    cond: ConditionEmbedding | str,
    guidance: GuidanceConfig,
    schedule: NoiseSchedule,
) -> tuple[np.ndarray, Trajectory]:
    """Denoise from t=T down to 0. Image-role denoisers see frames
    independently, which is the frame-by-frame application."""
    z = _check_latent(z_T)
    guidance.validate(schedule.T)
    cond = denoiser.condition(cond)
    lat, ts = [z], [schedule.T]
    for t in range(schedule.T, 0, -1):
        eps = guided_eps(denoiser, z, t, cond, guidance)
        z = ddim_sample_step(z, eps, t, schedule)
        lat.append(z)
        ts.append(t - 1)
    return z, Trajectory(lat, ts, {"direction": "sample", "text_scale": guidance.text_scale})


def ddim_invert_loop(
    denoiser: Denoiser,
    z_0,
    cond: ConditionEmbedding | str,
    schedule: NoiseSchedule,
    guidance: GuidanceConfig | None = None,
) -> tuple[np.ndarray, Trajectory]:
    """Invert a clean latent up to t=T; eps at step t is evaluated on z_{t-1}."""
    guidance = guidance if guidance is not None else GuidanceConfig(1.0)
    z = _check_latent(z_0)
    cond = denoiser.condition(cond)
    lat, ts = [z], [0]
    for t in range(1, schedule.T + 1):
        eps = guided_eps(denoiser, z, t, cond, guidance)
        z = ddim_invert_step(z, eps, t, schedule)
        lat.append(z)
        ts.append(t)
    return z, Trajectory(lat, ts, {"direction": "invert", "text_scale": guidance.text_scale})
