import pytest
import torch

from src.grid import grid_new
from src.model import GridConfig
from src.scenes import CameraRing, GaussianBlob, SceneSpec


@pytest.fixture
def small_config():
    """Grille 4³, 4 canaux, blocs 4×4×4 et 4×4."""
    return GridConfig(
        resolution=(4, 4, 4),
        rank=1,
        density_channels=4,
        appearance_channels=4,
        matrix_block=(4, 4, 4),
        vector_block=(4, 4),
    )


@pytest.fixture
def small_grid64(small_config):
    return grid_new(small_config, seed=3, dtype=torch.float64)


@pytest.fixture
def tiny_scene():
    """Deux blobs, 2 caméras d'entraînement et 1 de test en 8×8."""
    return SceneSpec(
        name="tiny",
        blobs=[
            GaussianBlob(center=(0.3, 0.0, 0.0), width=0.3, peak=10.0, color=(0.9, 0.2, 0.1)),
            GaussianBlob(center=(-0.3, 0.1, 0.0), width=0.3, peak=10.0, color=(0.1, 0.3, 0.9)),
        ],
        cameras=CameraRing(train_count=2, test_count=1, width=8, height=8, focal=8.0),
    )
