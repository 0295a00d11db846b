"""Shared fixtures: small synthetic scenes reused across test modules."""

import numpy as np
import pytest

from mocapcal.chain import make_grid_board
from mocapcal.solver import SolverOptions, calibrate
from mocapcal.synth import generate_scene, make_scene_spec

# Per-axis pixel noise whose per-detection RMS magnitude is 0.2 px.
NOISE_AXIS_02 = 0.2 / np.sqrt(2.0)


@pytest.fixture(scope="session")
def small_board():
    return make_grid_board(4, 3)


@pytest.fixture(scope="session")
def clean_scene(small_board):
    """Noise-free 2-camera scene."""
    spec = make_scene_spec(seed=3, camera_count=2, frame_count=60, board=small_board)
    return generate_scene(spec)


@pytest.fixture(scope="session")
def noisy_scene(small_board):
    """2-camera scene with 0.2 px RMS detection noise."""
    spec = make_scene_spec(
        seed=12, camera_count=2, frame_count=60, board=small_board,
        pixel_noise_sigma=NOISE_AXIS_02,
    )
    return generate_scene(spec)


@pytest.fixture(scope="session")
def clean_result(clean_scene):
    return calibrate(clean_scene.dataset, SolverOptions(epsilon=1e-8))


@pytest.fixture(scope="session")
def noisy_result(noisy_scene):
    return calibrate(noisy_scene.dataset)
