import numpy as np
import pytest

from fldm.denoisers import AnalyticGaussianDenoiser, Role, TrainingConfig, train_denoiser
from fldm.schedule import make_linear_schedule
from fldm.world import encode, sample_video, standard_world

# training setup shared by every test that needs a fitted network
TRAIN_STEPS = 3000
TRAIN_VIDEOS = 1000


@pytest.fixture(scope="session")
def world():
    return standard_world()


@pytest.fixture(scope="session")
def sched():
    return make_linear_schedule(50, 1e-4, 0.02)


@pytest.fixture(scope="session")
def analytic(world, sched):
    prior, codec, _ = world
    return {
        "video": AnalyticGaussianDenoiser(prior, sched, Role.VIDEO, codec),
        "image": AnalyticGaussianDenoiser(prior, sched, Role.IMAGE, codec),
    }


@pytest.fixture(scope="session")
def train_data(world):
    prior, codec, _ = world
    rng = np.random.default_rng(0)
    labels = ["source", "target"] * (TRAIN_VIDEOS // 2)
    X = np.stack([encode(codec, sample_video(prior, c, rng)) for c in labels])
    return X, labels


@pytest.fixture(scope="session")
def trained(train_data, sched):
    X, labels = train_data
    cfg = TrainingConfig(steps=TRAIN_STEPS)
    return {
        "image": train_denoiser(X, labels, sched, cfg, Role.IMAGE),
        "video": train_denoiser(X, labels, sched, cfg, Role.VIDEO),
    }
