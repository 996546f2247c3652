"""Pure-numpy versions of the elementwise kernels in ``_kernels.pyx``.

The elementwise functions evaluate their formula in the same operation order
as the compiled versions, so both backends agree to the last bit on IEEE
hardware (the extension is built with ``-ffp-contract=off``). The pairwise
cosine reduction sums in a different order and agrees to round-off only.
"""

from __future__ import annotations

import math

import numpy as np


def ddim_step(z, eps, ab_t, ab_prev):
    sa_t = math.sqrt(ab_t)
    s1_t = math.sqrt(1.0 - ab_t)
    sa_p = math.sqrt(ab_prev)
    s1_p = math.sqrt(1.0 - ab_prev)
    return sa_p * ((z - s1_t * eps) / sa_t) + s1_p * eps


def ddim_invert(z, eps, ab_t, ab_prev):
    sa_t = math.sqrt(ab_t)
    s1_t = math.sqrt(1.0 - ab_t)
    sa_p = math.sqrt(ab_prev)
    s1_p = math.sqrt(1.0 - ab_prev)
    return sa_t * ((z - s1_p * eps) / sa_p) + s1_t * eps


def fuse(z_video, z_image, alpha):
    return alpha * z_video + (1.0 - alpha) * z_image


def cfg(eps_uncond, eps_cond, scale):
    return eps_uncond + scale * (eps_cond - eps_uncond)


def mean_pairwise_cosine(features):
    feats = np.asarray(features, dtype=np.float64)
    n = feats.shape[0]
    gram = feats @ feats.T
    iu = np.triu_indices(n, k=1)
    return float(gram[iu].sum() / len(iu[0]))
