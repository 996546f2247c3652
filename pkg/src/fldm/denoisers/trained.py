"""Small tanh MLP noise predictors with hand-written reverse mode.

Per frame the input is ``[z_j, time features(t), cond]``. Two hidden tanh
layers follow; the video-role variant feeds the second layer with
``[h1_j, mean_k h1_k]`` so that every frame sees a summary of the clip.
Trained on ``E || eps - net(z_t, t, cond) ||^2`` with plain SGD.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..schedule import NoiseSchedule
from .base import ConditionEmbedding, Denoiser, DenoiserError, Role

logger = logging.getLogger(__name__)

N_TIME_FEATURES = 8
_PARAM_ORDER = ("W1", "b1", "W2", "b2", "W3", "b3")
FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int | None = None) -> None:
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class GradientError(DenoiserError):
    """Non-finite gradient; ``where`` names the offending tensor."""

    def __init__(self, where: str) -> None:
        super().__init__(f"non-finite gradient in {where}")
        self.where = where


def time_features(t, T: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.pi * np.array([0.5, 1.0, 2.0, 4.0])
    ang = (t / T)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass(frozen=True)
class TrainingConfig:
    steps: int = 4000
    batch_size: int = 128
    lr: float = 0.05
    hidden: int = 64
    cond_dim: int = 8
    p_uncond: float = 0.15
    seed: int = 0
    heldout_size: int = 512
    loss_threshold: float | None = None


@dataclass(eq=False)
class _Cache:
    x: np.ndarray
    h1: np.ndarray
    g: np.ndarray
    h2: np.ndarray


@dataclass(eq=False)
class TrainedDenoiser(Denoiser):
    """Feed-forward noise predictor; parameters are read-only arrays."""

    role: Role
    d: int
    schedule: NoiseSchedule
    params: dict[str, np.ndarray]
    class_embeddings: dict[str, np.ndarray]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.role = Role(self.role)
        for k in _PARAM_ORDER:
            a = np.array(self.params[k], dtype=np.float64)
            a.setflags(write=False)
            self.params[k] = a
        for k, v in list(self.class_embeddings.items()):
            v = np.array(v, dtype=np.float64)
            v.setflags(write=False)
            self.class_embeddings[k] = v
        self._null = ConditionEmbedding(np.zeros(self.cond_dim), is_null=True)

    # -- shapes -------------------------------------------------------------
    @property
    def hidden(self) -> int:
        return self.params["b1"].shape[0]

    @property
    def cond_dim(self) -> int:
        return self.params["W1"].shape[0] - self.d - N_TIME_FEATURES

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    @classmethod
    def init(
        cls,
        role: Role,
        d: int,
        schedule: NoiseSchedule,
        labels: list[str],
        hidden: int = 64,
        cond_dim: int = 8,
        seed: int = 0,
    ) -> "TrainedDenoiser":
        rng = np.random.default_rng(seed)
        n_in = d + N_TIME_FEATURES + cond_dim
        n_mid = 2 * hidden if Role(role) is Role.VIDEO else hidden
        params = {
            "W1": rng.standard_normal((n_in, hidden)) / np.sqrt(n_in),
            "b1": np.zeros(hidden),
            "W2": rng.standard_normal((n_mid, hidden)) / np.sqrt(n_mid),
            "b2": np.zeros(hidden),
            "W3": rng.standard_normal((hidden, d)) / np.sqrt(hidden),
            "b3": np.zeros(d),
        }
        emb = {}
        for c in labels:
            v = rng.standard_normal(cond_dim)
            emb[c] = v / np.linalg.norm(v) * np.sqrt(cond_dim) / 2
        return cls(Role(role), d, schedule, params, emb, seed)

    # -- conditions ---------------------------------------------------------
    def embed(self, label: str) -> ConditionEmbedding:
        from ..world import UnknownClassError

        if label not in self.class_embeddings:
            raise UnknownClassError(f"unknown class label {label!r}")
        return ConditionEmbedding(self.class_embeddings[label], label=label)

    @property
    def null_embedding(self) -> ConditionEmbedding:
        return self._null

    # -- forward / backward -------------------------------------------------
    def _inputs(self, z: np.ndarray, t, cond: np.ndarray) -> np.ndarray:
        B, F, _ = z.shape
        tf = time_features(t, self.schedule.T)
        tf = np.broadcast_to(tf, (B, N_TIME_FEATURES))
        cond = np.broadcast_to(np.asarray(cond, dtype=np.float64), (B, self.cond_dim))
        side = np.concatenate([tf, cond], axis=1)
        return np.concatenate([z, np.broadcast_to(side[:, None, :], (B, F, side.shape[1]))], axis=2)

    def forward(self, z, t, cond) -> tuple[np.ndarray, _Cache]:
        """Batched forward on ``z`` of shape ``(B, F, d)``; ``t`` scalar or ``(B,)``,
        ``cond`` ``(e,)`` or ``(B, e)``."""
        p = self.params
        x = self._inputs(z, t, cond)
        h1 = np.tanh(x @ p["W1"] + p["b1"])
        if self.role is Role.VIDEO:
            pooled = np.broadcast_to(h1.mean(axis=1, keepdims=True), h1.shape)
            g = np.concatenate([h1, pooled], axis=2)
        else:
            g = h1
        h2 = np.tanh(g @ p["W2"] + p["b2"])
        out = h2 @ p["W3"] + p["b3"]
        return out, _Cache(x, h1, g, h2)

    def backward(self, cache: _Cache, d_out: np.ndarray, need_params: bool = True):
        """Reverse pass. Returns ``(param_grads or None, d_input)`` where
        ``d_input`` has the shape of the concatenated per-frame input."""
        p = self.params
        H = self.hidden
        grads = {}
        flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
        if need_params:
            grads["W3"] = flat(cache.h2).T @ flat(d_out)
            grads["b3"] = flat(d_out).sum(axis=0)
        da2 = (d_out @ p["W3"].T) * (1.0 - cache.h2**2)
        if need_params:
            grads["W2"] = flat(cache.g).T @ flat(da2)
            grads["b2"] = flat(da2).sum(axis=0)
        dg = da2 @ p["W2"].T
        if self.role is Role.VIDEO:
            F = dg.shape[1]
            dh1 = dg[..., :H] + dg[..., H:].sum(axis=1, keepdims=True) / F
        else:
            dh1 = dg
        da1 = dh1 * (1.0 - cache.h1**2)
        if need_params:
            grads["W1"] = flat(cache.x).T @ flat(da1)
            grads["b1"] = flat(da1).sum(axis=0)
        dx = da1 @ p["W1"].T
        return (grads if need_params else None), dx

    def predict_eps(self, z, t, cond, image_cond=None):
        if image_cond is not None:
            raise DenoiserError("trained denoisers have a single condition channel")
        if not 1 <= t <= self.schedule.T:
            raise DenoiserError(f"timestep {t} outside [1, {self.schedule.T}]")
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.d:
            raise DenoiserError(f"latent must be (frames, {self.d}), got {z.shape}")
        cond = self.condition(cond)
        out, _ = self.forward(z[None], t, cond.vector)
        return out[0]

    def with_params(self, params: dict[str, np.ndarray]) -> "TrainedDenoiser":
        return TrainedDenoiser(
            self.role, self.d, self.schedule, dict(params), dict(self.class_embeddings),
            self.seed, dict(self.meta),
        )


def grad_wrt_condition(
    model: TrainedDenoiser,
    loss: Callable[[np.ndarray], tuple[float, np.ndarray]],
    z,
    t: int,
    cond: ConditionEmbedding | np.ndarray,
) -> np.ndarray:
    """Exact gradient of ``loss(eps_hat)`` with respect to the condition vector.

    ``loss`` returns ``(value, d value / d eps_hat)``. The same vector feeds
    every frame, so per-frame contributions are summed.
    """
    vec = cond.vector if isinstance(cond, ConditionEmbedding) else np.asarray(cond, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    out, cache = model.forward(z[None], t, vec)
    _, d_eps = loss(out[0])
    d_eps = np.asarray(d_eps, dtype=np.float64)
    if not np.all(np.isfinite(d_eps)):
        raise GradientError("loss output gradient")
    _, dx = model.backward(cache, d_eps[None], need_params=False)
    g = dx[0, :, model.d + N_TIME_FEATURES:].sum(axis=0)
    if not np.all(np.isfinite(g)):
        raise GradientError("condition vector")
    return g


def _heldout_batch(X, labels, model, n, rng):
    idx = rng.integers(0, len(X), size=n)
    t = rng.integers(1, model.schedule.T + 1, size=n)
    eps = rng.standard_normal((n,) + X.shape[1:])
    return idx, t, eps


def epsilon_mse(model: Denoiser, z0, labels, t, eps, schedule: NoiseSchedule) -> float:
    """Mean squared noise-prediction error on a fixed noisy batch."""
    total = 0.0
    for i in range(len(z0)):
        ab = schedule.alpha_bars[t[i]]
        zt = np.sqrt(ab) * z0[i] + np.sqrt(1.0 - ab) * eps[i]
        pred = model.predict_eps(zt, int(t[i]), model.condition(labels[i]))
        total += float(np.mean((pred - eps[i]) ** 2))
    return total / len(z0)


def train_denoiser(
    videos: np.ndarray,
    labels,
    schedule: NoiseSchedule,
    config: TrainingConfig = TrainingConfig(),
    role: Role = Role.IMAGE,
) -> TrainedDenoiser:
    """Fit a :class:`TrainedDenoiser` to clean latent videos ``(N, f, d)``.

    With probability ``p_uncond`` the condition is replaced by the null
    embedding so the same network also gives the unconditional prediction.
    The per-step minibatch losses are stored in ``model.meta["losses"]``.
    """
    X = np.asarray(videos, dtype=np.float64)
    labels = list(labels)
    if X.ndim != 3 or len(X) == 0 or len(labels) != len(X):
        raise TrainingError("need a non-empty (N, f, d) dataset with one label per video")
    classes = sorted(set(labels))
    model = TrainedDenoiser.init(
        role, X.shape[2], schedule, classes, config.hidden, config.cond_dim, config.seed
    )
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    emb = np.stack([model.class_embeddings[c] for c in labels])
    params = {k: v.copy() for k, v in model.params.items()}
    sqrt_ab = np.sqrt(schedule.alpha_bars)
    sqrt_1m = np.sqrt(1.0 - schedule.alpha_bars)
    losses = np.empty(config.steps)
    work = model.with_params(params)
    for step in range(config.steps):
        idx = rng.integers(0, len(X), size=config.batch_size)
        t = rng.integers(1, schedule.T + 1, size=config.batch_size)
        eps = rng.standard_normal((config.batch_size,) + X.shape[1:])
        zt = sqrt_ab[t][:, None, None] * X[idx] + sqrt_1m[t][:, None, None] * eps
        cond = emb[idx] * (rng.random(config.batch_size) >= config.p_uncond)[:, None]
        work.params = params
        out, cache = work.forward(zt, t, cond)
        diff = out - eps
        loss = float(np.mean(diff**2))
        if not np.isfinite(loss):
            raise TrainingError("training loss is not finite", step)
        losses[step] = loss
        grads, _ = work.backward(cache, 2.0 * diff / diff.size)
        for k in _PARAM_ORDER:
            params[k] -= config.lr * grads[k]
    trained = model.with_params(params)
    trained.meta.update(
        losses=losses,
        config=asdict(config),
        init_loss=float(losses[0]) if config.steps else None,
    )
    if config.loss_threshold is not None:
        hrng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
        idx, t, eps = _heldout_batch(X, labels, trained, config.heldout_size, hrng)
        held = epsilon_mse(trained, X[idx], [labels[i] for i in idx], t, eps, schedule)
        trained.meta["heldout_loss"] = held
        if held > config.loss_threshold:
            raise TrainingError(
                f"held-out loss {held:.4g} above threshold {config.loss_threshold:.4g}"
            )
    return trained


# -- serialization ------------------------------------------------------------


def save_denoiser(model: TrainedDenoiser, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.json`` (header) and ``<path>.bin`` (little-endian float64
    tensors in header order)."""
    path = Path(path)
    header = {
        "format": "fldm-mlp",
        "version": FORMAT_VERSION,
        "role": model.role.value,
        "d": model.d,
        "seed": model.seed,
        "schedule_T": model.schedule.T,
        "schedule_hash": model.schedule.fingerprint(),
        "tensors": [[k, list(model.params[k].shape)] for k in _PARAM_ORDER],
        "class_embeddings": {c: v.tolist() for c, v in model.class_embeddings.items()},
    }
    json_path, bin_path = path.with_suffix(".json"), path.with_suffix(".bin")
    json_path.write_text(json.dumps(header, indent=2))
    with open(bin_path, "wb") as fh:
        for k in _PARAM_ORDER:
            fh.write(model.params[k].astype("<f8").tobytes())
    return json_path, bin_path


def load_denoiser(path: str | Path, schedule: NoiseSchedule) -> TrainedDenoiser:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    if header.get("format") != "fldm-mlp" or header.get("version") != FORMAT_VERSION:
        raise DenoiserError("not an fldm-mlp weight file")
    if header["schedule_hash"] != schedule.fingerprint():
        raise DenoiserError("weights were trained with a different noise schedule")
    raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    expected = sum(int(np.prod(s)) for _, s in header["tensors"])
    if raw.size != expected:
        raise DenoiserError(f"weight file holds {raw.size} values, header expects {expected}")
    params, off = {}, 0
    for name, shape in header["tensors"]:
        n = int(np.prod(shape))
        params[name] = raw[off:off + n].reshape(shape).astype(np.float64)
        off += n
    return TrainedDenoiser(
        Role(header["role"]), int(header["d"]), schedule, params,
        {c: np.array(v) for c, v in header["class_embeddings"].items()}, int(header["seed"]),
    )
