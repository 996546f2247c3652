"""Frame consistency and textual alignment, reported x100.

Scores come from the toy :class:`~fldm.world.FrozenEmbedder`, so they are
only comparable between runs of this package.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .world import FrozenEmbedder, embed_frames, embed_text


class MetricError(ValueError):
    pass


_UNIT_TOL = 1e-9


def _unit_rows(features) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise MetricError("features must be a (frames, k) array")
    if not np.all(np.isfinite(f)):
        raise MetricError("features contain non-finite values")
    if np.any(np.abs(np.linalg.norm(f, axis=1) - 1.0) > _UNIT_TOL):
        raise MetricError("features must be unit-normalized")
    return f


def frame_consistency(frame_features) -> float:
    """Mean cosine over all unordered frame pairs, x100."""
    f = _unit_rows(frame_features)
    if f.shape[0] < 2:
        raise MetricError("frame consistency needs at least two frames")
    return 100.0 * kernels.mean_pairwise_cosine(f)


def textual_alignment(frame_features, text_feature) -> float:
    f = _unit_rows(frame_features)
    if f.shape[0] < 1:
        raise MetricError("need at least one frame")
    txt = _unit_rows(np.atleast_2d(text_feature))[0]
    if txt.shape[0] != f.shape[1]:
        raise MetricError("text feature dimension does not match frame features")
    return 100.0 * float(np.mean(f @ txt))


@dataclass(frozen=True)
class MetricsReport:
    frame_consistency: float
    textual_alignment: float
    n_frames: int
    seed: int | None = None
    config_fingerprint: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate_video(
    embedder: FrozenEmbedder,
    video,
    target: str,
    seed: int | None = None,
    config_fingerprint: str = "",
) -> MetricsReport:
    feats = embed_frames(embedder, video)
    return MetricsReport(
        frame_consistency=frame_consistency(feats),
        textual_alignment=textual_alignment(feats, embed_text(embedder, target)),
        n_frames=int(feats.shape[0]),
        seed=seed,
        config_fingerprint=config_fingerprint,
    )
