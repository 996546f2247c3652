"""Latent fusion of a video-role and an image-role denoising branch.

Both branches take their own DDIM step from their own latent. Once
``t <= T - tau`` the two results are mixed as ``alpha * z_video +
(1 - alpha) * z_image``, alpha is moved towards one by
``(1 - alpha_tau) / (T - tau)`` (linear mode), and both branches continue
from the mixed latent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import kernels
from .ddim import GuidanceConfig, ddim_sample_step, guided_eps
from .denoisers.base import ConditionEmbedding, Denoiser
from .schedule import NoiseSchedule


class FusionConfigError(ValueError):
    pass


class FusionMode(str, Enum):
    FIXED = "fixed"
    LINEAR = "linear"  # linear-to-one alpha update


@dataclass(frozen=True)
class FusionConfig:
    T: int
    tau: int
    alpha_tau: float
    mode: FusionMode = FusionMode.LINEAR

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", FusionMode(self.mode))
        if self.T < 1:
            raise FusionConfigError("T must be positive")
        if not 0 <= self.tau <= self.T:
            raise FusionConfigError(f"tau={self.tau} outside [0, T={self.T}]")
        if not 0.0 <= self.alpha_tau <= 1.0:
            raise FusionConfigError(f"alpha_tau={self.alpha_tau} outside [0, 1]")

    @property
    def n_fused(self) -> int:
        return self.T - self.tau

    def alpha_increment(self) -> float:
        if self.mode is FusionMode.FIXED:
            return 0.0
        if self.tau >= self.T:
            raise FusionConfigError("alpha update undefined when tau == T")
        return (1.0 - self.alpha_tau) / (self.T - self.tau)


def fuse_latents(z_video, z_image, alpha: float) -> np.ndarray:
    zv = np.asarray(z_video, dtype=np.float64)
    zi = np.asarray(z_image, dtype=np.float64)
    if zv.shape != zi.shape:
        raise ValueError(f"shape mismatch: {zv.shape} vs {zi.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha={alpha} outside [0, 1]")
    return kernels.fuse(zv, zi, float(alpha))


def next_alpha(alpha_t: float, alpha_tau: float, T: int, tau: int) -> float:
    if tau >= T:
        raise FusionConfigError("alpha update undefined when tau == T")
    return alpha_t + (1.0 - alpha_tau) / (T - tau)


@dataclass
class FusionTrace:
    t: list[int] = field(default_factory=list)
    fused: list[bool] = field(default_factory=list)
    alpha_used: list[float | None] = field(default_factory=list)
    divergence: list[float] = field(default_factory=list)
    final_alpha: float | None = None

    def record(self, t: int, fused: bool, alpha: float | None, divergence: float) -> None:
        self.t.append(t)
        self.fused.append(fused)
        self.alpha_used.append(alpha)
        self.divergence.append(divergence)

    @property
    def n_fused(self) -> int:
        return sum(self.fused)

    def first_fused_divergence(self) -> float | None:
        for f, dv in zip(self.fused, self.divergence):
            if f:
                return dv
        return None

    def rows(self):
        for t, f, a, dv in zip(self.t, self.fused, self.alpha_used, self.divergence):
            yield t, int(f), "" if a is None else repr(a), repr(dv)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "fused", "alpha_used", "divergence"])
            w.writerows(self.rows())


def fldm_edit(
    video_denoiser: Denoiser,
    image_denoiser: Denoiser,
    zT_video,
    zT_image,
    target_cond: ConditionEmbedding | str,
    guidance_video: GuidanceConfig,
    guidance_image: GuidanceConfig,
    schedule: NoiseSchedule,
    fusion: FusionConfig,
) -> tuple[np.ndarray, FusionTrace]:
    """Run both branches from ``t = T`` to 1 with fusion; returns ``z*_0``."""
    if fusion.T != schedule.T:
        raise FusionConfigError(
            f"fusion T={fusion.T} differs from schedule T={schedule.T}; "
            "both branches must share one schedule"
        )
    for name, den in (("video", video_denoiser), ("image", image_denoiser)):
        sched = getattr(den, "schedule", schedule)
        if sched != schedule:
            raise FusionConfigError(f"{name} denoiser uses a different noise schedule")
    zv = np.asarray(zT_video, dtype=np.float64)
    zi = np.asarray(zT_image, dtype=np.float64)
    if zv.shape != zi.shape:
        raise FusionConfigError(f"branch shapes differ: {zv.shape} vs {zi.shape}")
    guidance_video.validate(schedule.T)
    guidance_image.validate(schedule.T)
    cond_v = video_denoiser.condition(target_cond) if isinstance(target_cond, str) else target_cond
    cond_i = image_denoiser.condition(target_cond) if isinstance(target_cond, str) else target_cond
    step = fusion.alpha_increment() if fusion.n_fused > 0 else 0.0

    alpha = fusion.alpha_tau
    trace = FusionTrace()
    for t in range(schedule.T, 0, -1):
        zi_next = ddim_sample_step(zi, guided_eps(image_denoiser, zi, t, cond_i, guidance_image), t, schedule)
        zv_next = ddim_sample_step(zv, guided_eps(video_denoiser, zv, t, cond_v, guidance_video), t, schedule)
        div = float(np.linalg.norm(zv_next - zi_next))
        if t <= schedule.T - fusion.tau:
            fused = kernels.fuse(zv_next, zi_next, alpha)
            trace.record(t, True, alpha, div)
            if fusion.mode is FusionMode.LINEAR:
                alpha = alpha + step
            zv, zi = fused, fused
        else:
            trace.record(t, False, None, div)
            zv, zi = zv_next, zi_next
    trace.final_alpha = alpha
    # with no fused step the video branch's own output is returned
    return zv, trace
