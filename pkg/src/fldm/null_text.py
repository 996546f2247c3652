"""Null-text inversion: per-timestep null embeddings that make guided DDIM
sampling retrace the unguided inversion trajectory."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ddim import GuidanceConfig, ddim_invert_loop, ddim_sample_step
from .denoisers.base import ConditionEmbedding
from .denoisers.trained import TrainedDenoiser, grad_wrt_condition
from .schedule import NoiseSchedule

logger = logging.getLogger(__name__)


class NullTextError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class NullTextOptions:
    inner_steps: int = 10
    step_size: float = 3e-2
    method: str = "adam"  # or "sgd"
    max_halvings: int = 5
    # relative rise below which an exhausted line search counts as converged
    tolerance: float = 1e-4


@dataclass
class NullTextResult:
    z_T: np.ndarray
    null_embeddings: dict[int, np.ndarray]  # keys T..1 in insertion order
    loss_before: dict[int, float] = field(default_factory=dict)
    loss_after: dict[int, float] = field(default_factory=dict)
    pivot: list[np.ndarray] = field(default_factory=list)

    def overrides(self, template: ConditionEmbedding) -> dict[int, ConditionEmbedding]:
        return {
            t: ConditionEmbedding(v, is_null=True, label=template.label)
            for t, v in self.null_embeddings.items()
        }

    def guidance(self, text_scale: float) -> GuidanceConfig:
        return GuidanceConfig(
            text_scale,
            null_overrides={
                t: ConditionEmbedding(v, is_null=True) for t, v in self.null_embeddings.items()
            },
        )

    def save(self, path: str | Path) -> None:
        """``<path>.json`` header plus ``<path>.csv`` rows ``t, loss_before,
        loss_after, e0..e{k-1}``."""
        path = Path(path)
        k = len(next(iter(self.null_embeddings.values())))
        header = {
            "format": "fldm-nulltext",
            "timesteps": list(self.null_embeddings),
            "embedding_dim": k,
            "z_T": self.z_T.tolist(),
        }
        path.with_suffix(".json").write_text(json.dumps(header, indent=2))
        with open(path.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "loss_before", "loss_after"] + [f"e{j}" for j in range(k)])
            for t, v in self.null_embeddings.items():
                w.writerow(
                    [t, repr(self.loss_before[t]), repr(self.loss_after[t])]
                    + [repr(float(x)) for x in v]
                )

    @classmethod
    def load(cls, path: str | Path) -> "NullTextResult":
        path = Path(path)
        header = json.loads(path.with_suffix(".json").read_text())
        if header.get("format") != "fldm-nulltext":
            raise NullTextError("not a null-text result file")
        emb, before, after = {}, {}, {}
        with open(path.with_suffix(".csv"), newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        for r in rows:
            t = int(r[0])
            before[t], after[t] = float(r[1]), float(r[2])
            emb[t] = np.array([float(x) for x in r[3:]])
        return cls(np.array(header["z_T"]), emb, before, after)


def null_text_invert(
    denoiser: TrainedDenoiser,
    z_0,
    cond: ConditionEmbedding | str,
    guidance: GuidanceConfig,
    schedule: NoiseSchedule,
    opt: NullTextOptions = NullTextOptions(),
) -> NullTextResult:
    """Invert ``z_0`` and optimise one null embedding per timestep.

    For ``t = T..1`` the null vector (warm-started from the previous step)
    is moved by gradient descent on ``||z*_{t-1}(null) - pivot_{t-1}||^2``,
    halving the step whenever the loss would rise. ``method="adam"`` uses
    bias-corrected Adam directions with fresh moments per timestep;
    ``"sgd"`` uses the raw gradient.
    """
    cond = denoiser.condition(cond)
    s = guidance.text_scale
    z_T, pivot = ddim_invert_loop(denoiser, z_0, cond, schedule)
    null = np.array(denoiser.null_embedding.vector, dtype=np.float64)
    latent = z_T
    result = NullTextResult(z_T, {}, pivot=pivot.latents)
    ab = schedule.alpha_bars

    for t in range(schedule.T, 0, -1):
        target = pivot.latents[t - 1]
        eps_c = denoiser.predict_eps(latent, t, cond)
        # z*_{t-1} is affine in the guided eps; its eps coefficient
        c_eps = np.sqrt(1.0 - ab[t - 1]) - np.sqrt(ab[t - 1]) * np.sqrt(1.0 - ab[t]) / np.sqrt(ab[t])

        def step_for(vec: np.ndarray) -> np.ndarray:
            if s == 1.0:
                eps = eps_c
            else:
                eps_u = denoiser.predict_eps(latent, t, ConditionEmbedding(vec, is_null=True))
                eps = eps_u + s * (eps_c - eps_u)
            return ddim_sample_step(latent, eps, t, schedule)

        def loss_of(vec: np.ndarray) -> float:
            r = step_for(vec) - target
            return float(np.sum(r * r))

        def d_loss(eps_u: np.ndarray) -> tuple[float, np.ndarray]:
            eps = eps_u + s * (eps_c - eps_u)
            r = ddim_sample_step(latent, eps, t, schedule) - target
            return float(np.sum(r * r)), 2.0 * r * c_eps * (1.0 - s)

        current = loss_of(null)
        result.loss_before[t] = current
        lr = opt.step_size
        m1 = np.zeros_like(null)
        m2 = np.zeros_like(null)
        for j in range(opt.inner_steps):
            if s == 1.0:
                break  # guided step does not depend on the null embedding
            g = grad_wrt_condition(denoiser, d_loss, latent, t, null)
            if opt.method == "adam":
                m1 = 0.9 * m1 + 0.1 * g
                m2 = 0.999 * m2 + 0.001 * g * g
                direction = (m1 / (1 - 0.9 ** (j + 1))) / (
                    np.sqrt(m2 / (1 - 0.999 ** (j + 1))) + 1e-8
                )
                if float(direction @ g) <= 0.0:
                    # momentum points uphill; take a plain gradient step of the same length
                    direction = g * (np.linalg.norm(direction) / max(np.linalg.norm(g), 1e-300))
            else:
                direction = g
            for _ in range(opt.max_halvings + 1):
                cand = null - lr * direction
                new = loss_of(cand)
                if new <= current:
                    break
                lr *= 0.5
            else:
                if new - current > opt.tolerance * max(current, 1e-300):
                    raise NullTextError(
                        f"loss rose at t={t} after {opt.max_halvings} step halvings",
                        {"t": t, "inner_step": j, "loss": current, "candidate_loss": new,
                         "step_size": lr, "grad_norm": float(np.linalg.norm(g)),
                         "method": opt.method},
                    )
                break  # at the round-off floor
            null, current = cand, new
        result.loss_after[t] = current
        result.null_embeddings[t] = null.copy()
        latent = step_for(null)
    return result
