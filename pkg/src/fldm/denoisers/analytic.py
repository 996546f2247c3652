"""Exact posterior-mean noise predictors for Gaussian video priors.

For ``z0 ~ N(m, C)`` and ``z_t = a z0 + s eps`` with ``a = sqrt(abar_t)``,
``s = sqrt(1 - abar_t)``, the pair (eps, z_t) is jointly Gaussian with
``Cov(eps, z_t) = s I`` and ``Cov(z_t) = a^2 C + s^2 I``. Hence

    E[eps | z_t] = s (a^2 C + s^2 I)^{-1} (z_t - a m),

which equals ``(z_t - a E[z0 | z_t]) / s``. With ``C = U diag(lam) U^T`` the
inverse is diagonal in the eigenbasis. The null prediction is the posterior
mean under the equal-weight mixture of all classes.
"""

from __future__ import annotations

import numpy as np

from ..schedule import NoiseSchedule
from ..world import LatentCodec, SyntheticVideoPrior, UnknownClassError
from .base import ConditionEmbedding, Denoiser, DenoiserError, Role


class _ClassModel:
    __slots__ = ("mean", "basis", "eigvals")

    def __init__(self, mean: np.ndarray, cov: np.ndarray) -> None:
        lam, U = np.linalg.eigh(cov)
        self.mean = mean
        self.basis = U
        self.eigvals = np.clip(lam, 0.0, None)


class AnalyticGaussianDenoiser(Denoiser):
    """Oracle denoiser for a :class:`SyntheticVideoPrior` seen through a codec.

    ``role=Role.VIDEO`` conditions on the full ``f*d`` covariance (frames
    coupled through rho). ``role=Role.IMAGE`` sees single frames with no frame
    index, like a text-to-image model: its prior is the Gaussian fitted to the
    pooled frame distribution (mean of the frame means, frame covariance plus
    the spread of the drift). Every output row then depends on its own input
    row only, and permuting frames permutes the output.
    """

    def __init__(
        self,
        prior: SyntheticVideoPrior,
        schedule: NoiseSchedule,
        role: Role = Role.VIDEO,
        codec: LatentCodec | None = None,
    ) -> None:
        self.prior = prior
        self.schedule = schedule
        self.role = Role(role)
        codec = codec if codec is not None else LatentCodec.identity(prior.d)
        if codec.d != prior.d:
            raise DenoiserError("codec dimension does not match prior")
        self.codec = codec
        self.labels = prior.labels
        A, b = codec.matrix, codec.offset
        frame_cov = A @ A.T
        self._models: dict[str, _ClassModel] = {}
        for c in self.labels:
            mean = prior.frame_means(c) @ A.T + b
            if self.role is Role.VIDEO:
                R = prior.temporal_correlation()
                cov = prior.sigma[c] ** 2 * np.kron(R, frame_cov)
                self._models[c] = _ClassModel(mean.reshape(-1), cov)
            else:
                spread = np.cov(mean.T, bias=True) if prior.f > 1 else 0.0
                cov = prior.sigma[c] ** 2 * frame_cov + spread
                self._models[c] = _ClassModel(mean.mean(axis=0), cov)
        self._null = ConditionEmbedding(np.zeros(len(self.labels)), is_null=True)

    # -- conditions ---------------------------------------------------------
    def embed(self, label: str) -> ConditionEmbedding:
        if label not in self._models:
            raise UnknownClassError(f"unknown class label {label!r}; known: {self.labels}")
        vec = np.zeros(len(self.labels))
        vec[self.labels.index(label)] = 1.0
        return ConditionEmbedding(vec, label=label)

    @property
    def null_embedding(self) -> ConditionEmbedding:
        return self._null

    def _resolve(self, cond, image_cond) -> str | None:
        for c in (cond, image_cond):
            if c is None:
                continue
            if isinstance(c, str):
                c = self.embed(c)
            if not c.is_null:
                if c.label is None or c.label not in self._models:
                    raise UnknownClassError(f"condition has no known class label: {c.label!r}")
                return c.label
        return None

    # -- prediction ---------------------------------------------------------
    def predict_eps(self, z, t, cond, image_cond=None):
        """Exact E[eps | z_t]; text condition wins over the image condition,
        and with neither the class mixture is used.

        ``z`` is ``(f, d)`` or a batch ``(..., f, d)`` of independent latents.
        """
        if not 1 <= t <= self.schedule.T:
            raise DenoiserError(f"timestep {t} outside [1, {self.schedule.T}]")
        z = np.asarray(z, dtype=np.float64)
        if z.ndim < 2 or z.shape[-1] != self.prior.d:
            raise DenoiserError(f"latent must be (frames, {self.prior.d}), got {z.shape}")
        if self.role is Role.VIDEO and z.shape[-2] != self.prior.f:
            raise DenoiserError(f"video-role denoiser needs {self.prior.f} frames")
        label = self._resolve(cond, image_cond)
        abar = self.schedule.alpha_bars[t]
        a, s = np.sqrt(abar), np.sqrt(1.0 - abar)
        if label is not None:
            eps, _ = self._class_eps(self._models[label], z, a, s)
            return eps
        return self._mixture_eps(z, a, s)

    def _class_eps(self, m: _ClassModel, z, a, s):
        denom = a * a * m.eigvals + s * s
        lognorm = np.sum(np.log(denom))
        if self.role is Role.VIDEO:
            r = z.reshape(z.shape[:-2] + (-1,)) - a * m.mean
            coords = r @ m.basis
            eps = (s * ((coords / denom) @ m.basis.T)).reshape(z.shape)
            loglik = -0.5 * (lognorm + np.sum(coords**2 / denom, axis=-1))
        else:
            r = z - a * m.mean
            coords = r @ m.basis
            eps = s * ((coords / denom) @ m.basis.T)
            loglik = -0.5 * (lognorm + np.sum(coords**2 / denom, axis=-1))
        # loglik: one value per video (video role) or per frame (image role)
        return eps, loglik

    def _mixture_eps(self, z, a, s):
        parts = [self._class_eps(self._models[c], z, a, s) for c in self.labels]
        eps = np.stack([p[0] for p in parts])
        ll = np.stack([np.asarray(p[1]) for p in parts])
        w = np.exp(ll - ll.max(axis=0, keepdims=True))
        w /= w.sum(axis=0, keepdims=True)
        if self.role is Role.VIDEO:
            w = w[..., None, None]
        else:
            w = w[..., None]
        return np.sum(w * eps, axis=0)

    def posterior_mean_z0(self, z, t, cond) -> np.ndarray:
        """E[z0 | z_t] recovered from the eps prediction."""
        abar = self.schedule.alpha_bars[t]
        eps = self.predict_eps(z, t, cond)
        return (np.asarray(z) - np.sqrt(1.0 - abar) * eps) / np.sqrt(abar)
