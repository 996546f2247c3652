import numpy as np
import pytest

from fldm.world import (
    EmbeddingError,
    FrozenEmbedder,
    LatentCodec,
    SyntheticVideoPrior,
    UnknownClassError,
    WorldError,
    decode,
    embed_frames,
    embed_text,
    encode,
    read_video_csv,
    sample_video,
    write_video_csv,
)


def two_class_prior(sigma=1.0, rho=0.9, d=2, f=8, drift=0.0):
    e = np.eye(d)
    return SyntheticVideoPrior(
        d=d, f=f,
        class_means={"a": 2 * e[0], "b": 2 * e[1]},
        sigma={"a": sigma, "b": sigma},
        drift={"a": drift * e[0], "b": drift * e[1]},
        rho=rho,
    )


def noise_draws(prior, n, seed=0):
    rng = np.random.default_rng(seed)
    means = prior.frame_means("a")
    return np.stack([sample_video(prior, "a", rng) - means for _ in range(n)])


def test_tiny_sigma_gives_frame_means():
    p = two_class_prior(sigma=1e-14, drift=0.3)
    v = sample_video(p, "a", 5)
    np.testing.assert_allclose(v, p.frame_means("a"), atol=1e-12)
    assert np.allclose(p.frame_means("a")[3], [2 + 0.9, 0])


def test_rho_zero_frames_uncorrelated():
    N = noise_draws(two_class_prior(rho=0.0), 10_000)
    for lag in range(1, N.shape[1]):
        x = N[:, :-lag, :].reshape(-1)
        y = N[:, lag:, :].reshape(-1)
        assert abs(np.corrcoef(x, y)[0, 1]) < 0.02


def test_rho_lag_one_correlation():
    N = noise_draws(two_class_prior(rho=0.9), 10_000)
    x = N[:, :-1, :].reshape(-1)
    y = N[:, 1:, :].reshape(-1)
    assert abs(np.corrcoef(x, y)[0, 1] - 0.9) < 0.02


def test_sample_moments():
    p = two_class_prior(drift=0.1)
    rng = np.random.default_rng(1)
    n = 10_000
    V = np.stack([sample_video(p, "a", rng) for _ in range(n)])
    bound = 4 * p.sigma["a"] / np.sqrt(n)
    assert np.all(np.abs(V.mean(axis=0) - p.frame_means("a")) < bound)


def test_sampling_deterministic():
    p = two_class_prior()
    assert np.array_equal(sample_video(p, "b", 42), sample_video(p, "b", 42))


def test_unknown_class():
    with pytest.raises(UnknownClassError):
        sample_video(two_class_prior(), "c", 0)


@pytest.mark.parametrize(
    "kw",
    [dict(rho=1.0), dict(rho=-0.1), dict(sigma=0.0)],
)
def test_prior_validation(kw):
    with pytest.raises(WorldError):
        two_class_prior(**kw)


def test_prior_dict_round_trip():
    p = two_class_prior(drift=0.2)
    q = SyntheticVideoPrior.from_dict(p.to_dict())
    assert q.to_dict() == p.to_dict()


def test_codec_round_trip_and_condition():
    codec = LatentCodec.random(4, 7)
    assert np.linalg.cond(codec.matrix) < 100
    v = np.random.default_rng(0).standard_normal((8, 4)) * 3
    assert np.max(np.abs(decode(codec, encode(codec, v)) - v)) < 1e-10


def test_identity_codec():
    v = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(encode(LatentCodec.identity(4), v), v)


def test_zero_video_maps_to_offset():
    codec = LatentCodec.random(3, 2)
    z = encode(codec, np.zeros((5, 3)))
    np.testing.assert_array_equal(z, np.tile(codec.offset, (5, 1)))


def test_codec_errors():
    codec = LatentCodec.random(3, 2)
    with pytest.raises(WorldError):
        encode(codec, np.zeros((5, 4)))
    with pytest.raises(WorldError):
        LatentCodec(np.diag([1.0, 1e-3]), np.zeros(2))


def test_embedder_anchor_cosines():
    p = two_class_prior()
    emb = FrozenEmbedder.build(p, seed=3)
    at_mean = embed_frames(emb, p.class_means["a"][None, :])[0]
    assert at_mean @ embed_text(emb, "a") == pytest.approx(1.0, abs=1e-12)
    assert embed_text(emb, "a") @ embed_text(emb, "b") == pytest.approx(0.0, abs=1e-12)
    mid = embed_frames(emb, (0.5 * (p.class_means["a"] + p.class_means["b"]))[None, :])[0]
    assert mid @ embed_text(emb, "a") == pytest.approx(0.7071, abs=1e-4)
    assert mid @ embed_text(emb, "b") == pytest.approx(0.7071, abs=1e-4)


def test_embedder_unit_norm_and_deterministic():
    p = two_class_prior()
    a = FrozenEmbedder.build(p, k=6, seed=9)
    b = FrozenEmbedder.build(p, k=6, seed=9)
    assert np.array_equal(a.projection, b.projection)
    f = embed_frames(a, sample_video(p, "a", 0))
    np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-12)


def test_embedder_zero_projection_errors():
    emb = FrozenEmbedder.build(two_class_prior(), seed=0)
    with pytest.raises(EmbeddingError):
        embed_frames(emb, np.zeros((2, 2)))
    with pytest.raises(UnknownClassError):
        embed_text(emb, "nope")


def test_video_csv_round_trip(tmp_path):
    v = sample_video(two_class_prior(), "a", 3)
    write_video_csv(tmp_path / "v.csv", v)
    assert np.array_equal(read_video_csv(tmp_path / "v.csv"), v)
    assert (tmp_path / "v.csv").read_text().splitlines()[0] == "frame,x0,x1"
