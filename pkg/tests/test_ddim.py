import csv
import math

import numpy as np
import pytest

from fldm.ddim import (
    EngineError,
    GuidanceConfig,
    ddim_invert_loop,
    ddim_invert_step,
    ddim_sample_loop,
    ddim_sample_step,
    guided_eps,
)
from fldm.denoisers.base import ConditionEmbedding, Denoiser, Role
from fldm import kernels
from fldm.schedule import NoiseSchedule, make_linear_schedule
from fldm.world import encode, sample_video


class Scripted(Denoiser):
    """Returns a fixed per-label eps field, ignoring z."""

    role = Role.IMAGE

    def __init__(self, values: dict, shape=(2, 3)):
        self.values = values
        self.shape = shape

    def embed(self, label):
        return ConditionEmbedding(np.zeros(1), label=label)

    @property
    def null_embedding(self):
        return ConditionEmbedding(np.zeros(1), is_null=True)

    def predict_eps(self, z, t, cond, image_cond=None):
        key = (cond.label if not cond.is_null else None,
               None if image_cond is None else image_cond.label)
        return np.full(np.shape(z), self.values[key], dtype=np.float64)


def sample_ref(z, e, ab_t, ab_p):
    return math.sqrt(ab_p) * (z - math.sqrt(1 - ab_t) * e) / math.sqrt(ab_t) + math.sqrt(1 - ab_p) * e


def invert_ref(z, e, ab_t, ab_p):
    return math.sqrt(ab_t) * (z - math.sqrt(1 - ab_p) * e) / math.sqrt(ab_p) + math.sqrt(1 - ab_t) * e


def schedule_from_betas(betas):
    betas = np.asarray(betas, dtype=np.float64)
    return NoiseSchedule(len(betas), betas, np.concatenate([[1.0], np.cumprod(1 - betas)]))


def test_hand_example_and_back():
    # abar_1 = 0.64, abar_2 = 0.25
    s = schedule_from_betas([0.36, 1 - 0.25 / 0.64])
    assert s.alpha_bars[2] == pytest.approx(0.25, abs=1e-15)
    z = ddim_sample_step(np.array([[1.0]]), np.array([[0.5]]), 2, s)
    assert z[0, 0] == pytest.approx(1.207180, abs=1e-6)
    back = ddim_invert_step(z, np.array([[0.5]]), 2, s)
    assert back[0, 0] == pytest.approx(1.0, abs=1e-9)


def test_identity_cases():
    # equal alpha-bars cannot occur in a valid schedule, so go to the kernels
    z = np.random.default_rng(0).standard_normal((3, 2))
    zero = np.zeros_like(z)
    np.testing.assert_allclose(kernels.ddim_step(z, zero, 0.4, 0.4), z, rtol=1e-15)
    np.testing.assert_allclose(kernels.ddim_invert(z, zero, 0.4, 0.4), z, rtol=1e-15)


def test_steps_match_scripted_oracle(sched):
    rng = np.random.default_rng(1)
    for _ in range(200):
        t = int(rng.integers(1, sched.T + 1))
        z = rng.standard_normal((2, 3)) * 3
        e = rng.standard_normal((2, 3))
        ab_t, ab_p = float(sched.alpha_bars[t]), float(sched.alpha_bars[t - 1])
        got_s = ddim_sample_step(z, e, t, sched)
        got_i = ddim_invert_step(z, e, t, sched)
        for idx in np.ndindex(z.shape):
            ref = sample_ref(z[idx], e[idx], ab_t, ab_p)
            assert abs(got_s[idx] - ref) <= 1e-12 * max(abs(ref), 1.0)
            ref = invert_ref(z[idx], e[idx], ab_t, ab_p)
            assert abs(got_i[idx] - ref) <= 1e-12 * max(abs(ref), 1.0)


def test_inverse_identity(sched):
    rng = np.random.default_rng(2)
    for _ in range(300):
        t = int(rng.integers(1, sched.T + 1))
        z = rng.standard_normal((8, 4))
        e = rng.standard_normal((8, 4))
        back = ddim_invert_step(ddim_sample_step(z, e, t, sched), e, t, sched)
        assert np.max(np.abs(back - z)) < 1e-10


def test_step_errors(sched):
    z = np.zeros((2, 2))
    for t in (0, sched.T + 1):
        with pytest.raises(EngineError):
            ddim_sample_step(z, z, t, sched)
        with pytest.raises(EngineError):
            ddim_invert_step(z, z, t, sched)
    with pytest.raises(EngineError):
        ddim_sample_step(z, np.zeros((2, 3)), 1, sched)


# -- guidance ------------------------------------------------------------------


def test_cfg_scale_collapse():
    den = Scripted({("c", None): 0.4, (None, None): 0.2})
    z = np.zeros((2, 3))
    assert np.array_equal(guided_eps(den, z, 1, "c", GuidanceConfig(1.0)), np.full((2, 3), 0.4))
    assert np.array_equal(guided_eps(den, z, 1, "c", GuidanceConfig(0.0)), np.full((2, 3), 0.2))
    np.testing.assert_allclose(guided_eps(den, z, 1, "c", GuidanceConfig(12.5)), 2.7, rtol=1e-14)


def test_dual_guidance_formula():
    vals = {(None, None): 0.1, (None, "img"): 0.3, ("c", "img"): 0.7}
    den = Scripted(vals)
    g = GuidanceConfig(12.5, image_scale=1.5, image_cond="img")
    out = guided_eps(den, np.zeros((2, 3)), 1, "c", g)
    expect = 0.1 + 1.5 * (0.3 - 0.1) + 12.5 * (0.7 - 0.3)
    np.testing.assert_allclose(out, expect, rtol=1e-14)


def test_guidance_validation():
    with pytest.raises(EngineError):
        GuidanceConfig(-1.0)
    with pytest.raises(EngineError):
        GuidanceConfig(float("nan"))
    with pytest.raises(EngineError):
        GuidanceConfig(2.0, image_scale=1.5)
    partial = {t: ConditionEmbedding(np.zeros(1), is_null=True) for t in (1, 2)}
    g = GuidanceConfig(2.0, null_overrides=partial)
    with pytest.raises(EngineError):
        g.validate(3)
    den = Scripted({("c", None): 0.4, (None, None): 0.2})
    with pytest.raises(EngineError):
        guided_eps(den, np.zeros((2, 3)), 3, "c", g)


def test_null_overrides_used_per_step():
    class ByVector(Scripted):
        def predict_eps(self, z, t, cond, image_cond=None):
            return np.full(np.shape(z), 1.0 if not cond.is_null else float(cond.vector[0]))

    den = ByVector({})
    over = {t: ConditionEmbedding(np.array([float(t)]), is_null=True) for t in (1, 2, 3)}
    g = GuidanceConfig(2.0, null_overrides=over)
    for t in (1, 2, 3):
        # eps_u + 2 (1 - eps_u) = 2 - t
        np.testing.assert_array_equal(guided_eps(den, np.zeros((1, 1)), t, "c", g), [[2.0 - t]])


# -- loops ---------------------------------------------------------------------


def test_trajectory_bookkeeping(analytic, sched):
    z = np.random.default_rng(3).standard_normal((8, 4))
    z0, tr = ddim_sample_loop(analytic["video"], z, "source", GuidanceConfig(1.0), sched)
    assert len(tr) == sched.T + 1
    assert tr.timesteps == list(range(sched.T, -1, -1))
    assert np.array_equal(tr.latents[0], z) and np.array_equal(tr.latents[-1], z0)
    assert all(x.shape == z.shape for x in tr.latents)
    zT, piv = ddim_invert_loop(analytic["video"], z0, "source", sched)
    assert piv.timesteps == list(range(sched.T + 1))
    assert np.array_equal(piv.at(sched.T), zT)


def test_single_step_loop_matches_hand():
    s = make_linear_schedule(1, 0.3, 0.3)
    den = Scripted({("c", None): 0.4, (None, None): 0.2})
    z = np.array([[0.7, -1.1, 2.0], [0.0, 0.3, -0.2]])
    z0, tr = ddim_sample_loop(den, z, "c", GuidanceConfig(1.0), s)
    ref = np.vectorize(lambda v: sample_ref(v, 0.4, 0.7, 1.0))(z)
    np.testing.assert_allclose(z0, ref, rtol=1e-14)
    assert len(tr) == 2


def test_single_step_round_trip_exact():
    s = make_linear_schedule(1, 0.3, 0.3)
    den = Scripted({("c", None): 0.4, (None, None): 0.2})
    z0 = np.random.default_rng(4).standard_normal((2, 3))
    zT, _ = ddim_invert_loop(den, z0, "c", s)
    rec, _ = ddim_sample_loop(den, zT, "c", GuidanceConfig(1.0), s)
    assert np.max(np.abs(rec - z0)) < 1e-10


def test_zero_eps_inversion_is_rescaling(sched):
    den = Scripted({("c", None): 0.0, (None, None): 0.0})
    z0 = np.random.default_rng(5).standard_normal((2, 3))
    zT, _ = ddim_invert_loop(den, z0, "c", sched)
    np.testing.assert_allclose(zT, np.sqrt(sched.alpha_bars[sched.T]) * z0, rtol=1e-12)


@pytest.mark.parametrize("role", ["video", "image"])
def test_round_trip_reconstruction(world, analytic, sched, role):
    prior, codec, _ = world
    rng = np.random.default_rng(6)
    den = analytic[role]
    for _ in range(5):
        z0 = encode(codec, sample_video(prior, "source", rng))
        zT, _ = ddim_invert_loop(den, z0, "source", sched)
        rec, _ = ddim_sample_loop(den, zT, "source", GuidanceConfig(1.0), sched)
        assert np.linalg.norm(rec - z0) / np.linalg.norm(z0) < 1e-2


def test_image_role_permutation_contract(analytic, sched):
    z = np.random.default_rng(7).standard_normal((8, 4))
    perm = np.random.default_rng(8).permutation(8)
    g = GuidanceConfig(3.0)
    a, _ = ddim_sample_loop(analytic["image"], z, "target", g, sched)
    b, _ = ddim_sample_loop(analytic["image"], z[perm], "target", g, sched)
    np.testing.assert_array_equal(b, a[perm])


def test_loop_determinism(analytic, sched):
    z = np.random.default_rng(9).standard_normal((8, 4))
    g = GuidanceConfig(12.5)
    _, t1 = ddim_sample_loop(analytic["video"], z, "target", g, sched)
    _, t2 = ddim_sample_loop(analytic["video"], z, "target", g, sched)
    assert all(np.array_equal(a, b) for a, b in zip(t1.latents, t2.latents))


def test_loop_rejects_bad_latent(analytic, sched):
    with pytest.raises(EngineError):
        ddim_sample_loop(analytic["video"], np.zeros(4), "source", GuidanceConfig(1.0), sched)
    bad = np.zeros((8, 4))
    bad[0, 0] = np.nan
    with pytest.raises(EngineError):
        ddim_invert_loop(analytic["video"], bad, "source", sched)


def test_trajectory_csv(tmp_path):
    s = make_linear_schedule(2)
    den = Scripted({("c", None): 0.1, (None, None): 0.0})
    _, tr = ddim_sample_loop(den, np.ones((2, 3)), "c", GuidanceConfig(1.0), s)
    tr.to_csv(tmp_path / "tr.csv")
    with open(tmp_path / "tr.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["timestep", "frame", "dim", "value"]
    assert len(rows) == 1 + 3 * 6
    assert float(rows[-1][3]) == tr.latents[-1][1, 2]
