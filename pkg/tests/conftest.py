import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from d2s import diffcore as dc
from d2s.geometry import CameraPose, Intrinsics
from d2s.network import Architecture, ModelParams
from d2s.synth import RenderConfig, TrajectorySpec, generate_scene, make_dataset

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(200, 16, 0.3, seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_scene):
    spec = TrajectorySpec(n_train=12, n_test=6, n_unlabeled=6)
    return make_dataset(small_scene, spec, RenderConfig(max_points=40, seed=3))


@pytest.fixture
def tiny_params():
    arch = Architecture(16, num_layers=2, num_heads=4, head_widths=(12, 10))
    with dc.precision(np.float64):
        return ModelParams.initialize(arch, np.random.default_rng(7))


def simple_frame(k=None, pose=None, **kw):
    from d2s.frames import Frame
    k = k or Intrinsics(100, 100, 50, 50)
    pose = pose or CameraPose.identity()
    return Frame(intrinsics=k, pose=pose, **kw)
