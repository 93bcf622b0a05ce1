import numpy as np
import pytest

from posefield.synthetic import Dataset, default_scene, generate_dataset


def tiny_scene():
    """Shrunken capture protocol for fast trainer/CLI tests."""
    scene = default_scene()
    scene.image_size = 32
    scene.focal = 46.0
    scene.samples_per_ray = 16
    scene.train_frames = 6
    scene.novel_view_frames = 2
    scene.novel_pose_frames = 2
    return scene


def tiny_model_overrides():
    """Narrow widths so tiny training smoke tests stay fast."""
    return dict(
        feature_dim=12,
        conv_hidden=12,
        coord_features=12,
        part_feature_dim=12,
        gate_hidden=12,
        freq_hidden=16,
        n_layers=2,
        hidden=20,
        color_hidden=16,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinyds")
    generate_dataset(tiny_scene(), root, seed=7)
    return Dataset(root)


@pytest.fixture()
def rng():
    # function-scoped: every test sees the same fresh stream, so results do
    # not depend on test execution order
    return np.random.default_rng(0)
