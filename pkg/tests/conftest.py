import numpy as np
import pytest

from crowdalign import synth
from crowdalign.data import AnnotatedDataset, render_all
from crowdalign.network import ModelParams


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_scene_cfg():
    # 32x32 keeps every forward pass cheap while satisfying the /16 rule
    return synth.SceneConfig(height=32, width=32, poisson_mean=4.0,
                             head_radius=3.0, seed=99)


@pytest.fixture(scope="session")
def tiny_source(tiny_scene_cfg):
    return synth.gen_source(6, tiny_scene_cfg)


@pytest.fixture(scope="session")
def tiny_target(tiny_scene_cfg):
    public, hidden = synth.gen_target(6, tiny_scene_cfg, synth.DomainShift())
    return public, hidden


@pytest.fixture
def small_params():
    return ModelParams.init(5, channels=4, hidden=6)


def random_dataset(rng, n=4, h=32, w=32, pts_per=3):
    """Labeled dataset of noise images, for tests that only need shapes."""
    images, points = [], []
    for _ in range(n):
        images.append(rng.uniform(0.0, 1.0, size=(3, h, w)))
        pts = np.column_stack([rng.uniform(1, w - 2, pts_per),
                               rng.uniform(1, h - 2, pts_per)])
        points.append(pts)
    dens = render_all(images, points, 4.0, 15)
    return AnnotatedDataset(images, points, dens)
