import numpy as np
import pytest

from fldm.denoisers import (
    AnalyticGaussianDenoiser,
    ConditionEmbedding,
    DenoiserError,
    Role,
    TrainedDenoiser,
    TrainingConfig,
    TrainingError,
    grad_wrt_condition,
    load_denoiser,
    save_denoiser,
    train_denoiser,
)
from fldm.denoisers.trained import GradientError, epsilon_mse, time_features
from fldm.schedule import make_linear_schedule
from fldm.world import LatentCodec, SyntheticVideoPrior, UnknownClassError, encode


def prior_1d(sigma=1.0, mu=2.0):
    return SyntheticVideoPrior(
        d=1, f=1, class_means={"c": [mu]}, sigma={"c": sigma}, drift={"c": [0.0]}, rho=0.0
    )


def small_model(role, seed=0, d=3, hidden=7, cond_dim=5):
    s = make_linear_schedule(20)
    return TrainedDenoiser.init(role, d, s, ["a", "b"], hidden=hidden, cond_dim=cond_dim, seed=seed)


# -- analytic oracle ----------------------------------------------------------


def test_point_mass_limit(world, sched):
    prior, _, _ = world
    tiny = SyntheticVideoPrior(
        d=prior.d, f=prior.f, class_means=prior.class_means,
        sigma={c: 1e-9 for c in prior.labels}, drift=prior.drift, rho=prior.rho,
    )
    den = AnalyticGaussianDenoiser(tiny, sched, Role.VIDEO)
    z = np.random.default_rng(0).standard_normal((prior.f, prior.d))
    t = 17
    a, s = np.sqrt(sched.alpha_bars[t]), np.sqrt(1 - sched.alpha_bars[t])
    expect = (z - a * prior.frame_means("source")) / s
    np.testing.assert_allclose(den.predict_eps(z, t, "source"), expect, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("role", [Role.VIDEO, Role.IMAGE])
def test_eps_zero_at_forward_mean(world, sched, role):
    prior, _, _ = world
    den = AnalyticGaussianDenoiser(prior, sched, role)
    a = np.sqrt(sched.alpha_bars[9])
    if role is Role.VIDEO:
        z = a * prior.frame_means("target")
    else:
        z = a * np.tile(prior.frame_means("target").mean(axis=0), (prior.f, 1))
    assert np.max(np.abs(den.predict_eps(z, 9, "target"))) < 1e-15


def test_monte_carlo_posterior():
    # d=1, sigma=1, mu=2, abar=0.25, z_t=1
    sched = make_linear_schedule(1, 0.75, 0.75)
    den = AnalyticGaussianDenoiser(prior_1d(), sched, Role.VIDEO)
    z_t = np.array([[1.0]])
    eps_hat = den.predict_eps(z_t, 1, "c")[0, 0]
    x0_hat = den.posterior_mean_z0(z_t, 1, "c")[0, 0]

    rng = np.random.default_rng(2024)
    n = 1_000_000
    x0 = 2.0 + rng.standard_normal(n)
    a, s = 0.5, np.sqrt(0.75)
    # self-normalised importance weights p(z_t | x0) over prior draws
    w = np.exp(-0.5 * ((1.0 - a * x0) / s) ** 2)
    w /= w.sum()
    eps = (1.0 - a * x0) / s
    for est, samples in ((x0_hat, x0), (eps_hat, eps)):
        mc = np.sum(w * samples)
        se = np.sqrt(np.sum(w**2 * (samples - mc) ** 2))
        assert abs(est - mc) < 3 * se


def test_image_role_locality_bitwise(analytic):
    den = analytic["image"]
    rng = np.random.default_rng(4)
    z = rng.standard_normal((8, 4))
    base = den.predict_eps(z, 30, "target")
    for j in range(8):
        zp = z.copy()
        zp[j] += rng.standard_normal(4)
        out = den.predict_eps(zp, 30, "target")
        keep = np.arange(8) != j
        assert np.array_equal(out[keep], base[keep])
        # null (mixture) prediction is per-frame too
        assert np.array_equal(den.predict_eps(zp, 30, None)[keep], den.predict_eps(z, 30, None)[keep])


def test_image_role_permutation(analytic):
    den = analytic["image"]
    z = np.random.default_rng(5).standard_normal((8, 4))
    perm = np.random.default_rng(6).permutation(8)
    np.testing.assert_array_equal(den.predict_eps(z[perm], 12, "source"), den.predict_eps(z, 12, "source")[perm])


def test_video_role_coupling(analytic):
    den = analytic["video"]
    z = np.random.default_rng(7).standard_normal((8, 4))
    zp = z.copy()
    zp[3] += 0.5
    delta = den.predict_eps(zp, 25, "source") - den.predict_eps(z, 25, "source")
    assert np.linalg.norm(np.delete(delta, 3, axis=0)) > 0


def test_mixture_null_prediction(world, sched):
    prior, _, _ = world
    den = AnalyticGaussianDenoiser(prior, sched, Role.VIDEO)
    a = np.sqrt(sched.alpha_bars[3])
    # deep inside the source class the mixture collapses onto it
    z = a * prior.frame_means("source") * 5
    np.testing.assert_allclose(den.predict_eps(z, 3, None), den.predict_eps(z, 3, "source"), atol=1e-9)
    z = np.zeros((8, 4))
    mix = den.predict_eps(z, 30, None)
    both = [den.predict_eps(z, 30, c) for c in prior.labels]
    lo, hi = np.minimum(*both), np.maximum(*both)
    assert np.all(mix >= lo - 1e-12) and np.all(mix <= hi + 1e-12)


def test_batched_prediction_matches_loop(analytic):
    for den in analytic.values():
        Z = np.random.default_rng(8).standard_normal((5, 8, 4))
        batch = den.predict_eps(Z, 20, "target")
        for i in range(5):
            np.testing.assert_allclose(batch[i], den.predict_eps(Z[i], 20, "target"), rtol=1e-13, atol=1e-13)


def test_analytic_errors(analytic):
    den = analytic["video"]
    z = np.zeros((8, 4))
    with pytest.raises(UnknownClassError):
        den.predict_eps(z, 3, "zebra")
    for t in (0, 51):
        with pytest.raises(DenoiserError):
            den.predict_eps(z, t, "source")
    with pytest.raises(DenoiserError):
        den.predict_eps(np.zeros((7, 4)), 3, "source")


def test_analytic_deterministic_and_shape(analytic):
    z = np.random.default_rng(9).standard_normal((8, 4))
    for den in analytic.values():
        a = den.predict_eps(z, 11, "source")
        assert a.shape == z.shape
        assert np.array_equal(a, den.predict_eps(z, 11, "source"))


# -- trained network: gradients ----------------------------------------------------


def fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def quad_loss(w):
    def loss(eps):
        return float(np.sum(w * eps**2) + np.sum(eps)), 2 * w * eps + 1.0
    return loss


@pytest.mark.parametrize("role", [Role.IMAGE, Role.VIDEO])
def test_condition_gradient_finite_differences(role):
    rng = np.random.default_rng(10)
    for k in range(10):
        m = small_model(role, seed=k)
        z = rng.standard_normal((4, 3))
        t = int(rng.integers(1, 21))
        cond = rng.standard_normal(m.cond_dim)
        w = rng.uniform(0.5, 1.5, (4, 3))
        loss = quad_loss(w)
        g = grad_wrt_condition(m, loss, z, t, cond)
        num = fd_grad(lambda c: loss(m.predict_eps(z, t, ConditionEmbedding(c)))[0], cond)
        rel = np.abs(g - num) / np.maximum(np.abs(num), 1e-6)
        assert np.all(rel < 1e-4)


def test_condition_gradient_constant_loss_is_zero():
    m = small_model(Role.VIDEO)
    z = np.ones((4, 3))
    g = grad_wrt_condition(m, lambda e: (1.0, np.zeros_like(e)), z, 5, np.ones(m.cond_dim))
    assert np.array_equal(g, np.zeros(m.cond_dim))


def test_condition_gradient_through_first_layer_weights():
    """With a zero condition and zero biases, dL/dcond = W1_cond @ dL/db1."""
    base = small_model(Role.IMAGE, seed=3)
    params = {k: v.copy() for k, v in base.params.items()}
    params["b1"][:] = 0.0
    m = base.with_params(params)
    z = np.random.default_rng(11).standard_normal((4, 3))
    loss = quad_loss(np.ones((4, 3)))
    g = grad_wrt_condition(m, loss, z, 7, np.zeros(m.cond_dim))

    def loss_b1(b1):
        p = dict(params)
        p["b1"] = b1
        return loss(m.with_params(p).predict_eps(z, 7, ConditionEmbedding(np.zeros(m.cond_dim))))[0]

    upstream = fd_grad(loss_b1, np.zeros(m.hidden))
    W1_cond = params["W1"][m.d + 8:]
    np.testing.assert_allclose(g, W1_cond @ upstream, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("role", [Role.IMAGE, Role.VIDEO])
def test_parameter_gradients_finite_differences(role):
    m = small_model(role, seed=4)
    rng = np.random.default_rng(12)
    z = rng.standard_normal((2, 4, 3))
    t = np.array([3, 15])
    cond = rng.standard_normal((2, m.cond_dim))
    target = rng.standard_normal((2, 4, 3))
    out, cache = m.forward(z, t, cond)
    grads, _ = m.backward(cache, 2 * (out - target))
    for name in ("W1", "b2", "W3"):
        def f(v, name=name):
            p = dict(m.params)
            p[name] = v
            o, _ = m.with_params(p).forward(z, t, cond)
            return float(np.sum((o - target) ** 2))
        np.testing.assert_allclose(grads[name], fd_grad(f, m.params[name].copy()), rtol=1e-5, atol=1e-7)


def test_non_finite_gradient_reported():
    m = small_model(Role.IMAGE)
    with pytest.raises(GradientError) as err:
        grad_wrt_condition(m, lambda e: (0.0, np.full_like(e, np.nan)), np.zeros((4, 3)), 2, np.zeros(m.cond_dim))
    assert "loss output" in err.value.where


# -- trained network: structure ------------------------------------------------------


def test_trained_locality_and_coupling():
    rng = np.random.default_rng(13)
    z = rng.standard_normal((5, 3))
    zp = z.copy()
    zp[2] += 1.0
    img = small_model(Role.IMAGE)
    d = img.predict_eps(zp, 4, "a") - img.predict_eps(z, 4, "a")
    assert np.max(np.abs(np.delete(d, 2, axis=0))) <= 1e-12
    vid = small_model(Role.VIDEO)
    d = vid.predict_eps(zp, 4, "a") - vid.predict_eps(z, 4, "a")
    assert np.linalg.norm(np.delete(d, 2, axis=0)) > 0


def test_parameter_budget(trained):
    for m in trained.values():
        assert m.n_params < 100_000


def test_trained_rejects_image_condition():
    m = small_model(Role.IMAGE)
    with pytest.raises(DenoiserError):
        m.predict_eps(np.zeros((4, 3)), 2, "a", image_cond=m.embed("b"))


def test_time_features_shape_and_range():
    f = time_features(np.arange(1, 51), 50)
    assert f.shape == (50, 8)
    assert np.all(np.abs(f) <= 1.0)


# -- training -------------------------------------------------------------------------


def test_zero_steps_is_initialisation(train_data, sched):
    X, labels = train_data
    cfg = TrainingConfig(steps=0, seed=5)
    m = train_denoiser(X[:20], labels[:20], sched, cfg, Role.IMAGE)
    init = TrainedDenoiser.init(Role.IMAGE, 4, sched, sorted(set(labels)), seed=5)
    for k in init.params:
        assert np.array_equal(m.params[k], init.params[k])
    rng = np.random.default_rng(1)
    t = rng.integers(1, 51, 30)
    eps = rng.standard_normal((30, 8, 4))
    assert epsilon_mse(m, X[:30], labels[:30], t, eps, sched) == epsilon_mse(init, X[:30], labels[:30], t, eps, sched)


def test_training_deterministic(train_data, sched):
    X, labels = train_data
    cfg = TrainingConfig(steps=30, seed=2)
    a = train_denoiser(X, labels, sched, cfg, Role.VIDEO)
    b = train_denoiser(X, labels, sched, cfg, Role.VIDEO)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_divergence_reports_step(train_data, sched):
    X, labels = train_data
    with pytest.raises(TrainingError) as err:
        with np.errstate(over="ignore", invalid="ignore"):
            train_denoiser(X, labels, sched, TrainingConfig(steps=500, lr=1e4), Role.IMAGE)
    assert err.value.step is not None


def test_heldout_threshold(train_data, sched):
    X, labels = train_data
    with pytest.raises(TrainingError):
        train_denoiser(X, labels, sched, TrainingConfig(steps=5, loss_threshold=1e-3, heldout_size=16), Role.IMAGE)
    m = train_denoiser(X, labels, sched, TrainingConfig(steps=5, loss_threshold=10.0, heldout_size=16), Role.IMAGE)
    assert m.meta["heldout_loss"] < 10.0


def test_training_rejects_bad_dataset(sched):
    with pytest.raises(TrainingError):
        train_denoiser(np.zeros((0, 8, 4)), [], sched)


def smoothed(losses, window=100):
    return np.convolve(losses, np.ones(window) / window, mode="valid")


def test_smoothed_loss_decreases_within_noise(trained):
    for m in trained.values():
        L = m.meta["losses"]
        tail = L[int(0.2 * len(L)):]
        ma = smoothed(tail)
        # a window mean of minibatch losses fluctuates with this standard error
        se = tail.std() / np.sqrt(100)
        assert np.max(np.diff(ma)) < 3 * se
        assert ma[-1] < ma[0]


@pytest.mark.xfail(strict=True, reason="minibatch noise makes the window-100 average rise by a few 1e-4")
def test_smoothed_loss_strictly_non_increasing(trained):
    L = trained["image"].meta["losses"]
    ma = smoothed(L)
    assert np.all(np.diff(ma[int(0.2 * len(L)):]) <= 0)


@pytest.mark.xfail(strict=True, reason="eps-prediction of a point mass needs gain 1/sqrt(1-abar_t) ~ 100 at t=1")
def test_single_point_dataset_fits(world, sched):
    prior, codec, _ = world
    x = encode(codec, np.tile(prior.class_means["source"], (prior.f, 1)))
    m = train_denoiser(x[None], ["source"], sched, TrainingConfig(steps=6000, lr=0.2, batch_size=32), Role.IMAGE)
    rng = np.random.default_rng(5)
    n = 300
    t = rng.integers(1, sched.T + 1, n)
    eps = rng.standard_normal((n, prior.f, prior.d))
    assert epsilon_mse(m, np.repeat(x[None], n, axis=0), ["source"] * n, t, eps, sched) < 0.01


# -- serialization ---------------------------------------------------------------------


def test_weights_round_trip(tmp_path, trained, sched):
    m = trained["video"]
    json_path, bin_path = save_denoiser(m, tmp_path / "w")
    back = load_denoiser(tmp_path / "w", sched)
    assert back.role is m.role
    for k in m.params:
        assert np.array_equal(back.params[k], m.params[k])
    z = np.random.default_rng(0).standard_normal((8, 4))
    assert np.array_equal(back.predict_eps(z, 9, "target"), m.predict_eps(z, 9, "target"))


def test_weights_validation(tmp_path, trained, sched):
    save_denoiser(trained["image"], tmp_path / "w")
    with pytest.raises(DenoiserError):
        load_denoiser(tmp_path / "w", make_linear_schedule(50, 1e-4, 0.03))
    raw = (tmp_path / "w.bin").read_bytes()
    (tmp_path / "w.bin").write_bytes(raw[:-8])
    with pytest.raises(DenoiserError):
        load_denoiser(tmp_path / "w", sched)
    (tmp_path / "w.json").write_text('{"format": "other"}')
    with pytest.raises(DenoiserError):
        load_denoiser(tmp_path / "w", sched)


def test_condition_embedding_validation():
    with pytest.raises(DenoiserError):
        ConditionEmbedding(np.array([np.inf]))
    with pytest.raises(DenoiserError):
        ConditionEmbedding(np.zeros((2, 2)))
    e = ConditionEmbedding([1.0, 2.0])
    with pytest.raises(ValueError):
        e.vector[0] = 3.0


def test_codec_aware_analytic_matches_latent_prior(world, sched):
    """Oracle built through a codec equals one built on the pushed-forward prior."""
    prior, codec, _ = world
    den = AnalyticGaussianDenoiser(prior, sched, Role.VIDEO, codec)
    ident = AnalyticGaussianDenoiser(prior, sched, Role.VIDEO, LatentCodec.identity(4))
    z = np.random.default_rng(1).standard_normal((8, 4))
    assert not np.allclose(den.predict_eps(z, 10, "source"), ident.predict_eps(z, 10, "source"))
