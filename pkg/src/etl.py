"""
Module pour l'Extraction, la Transformation et le Chargement (ETL) des vues.
- Rendu des vues de référence depuis la scène analytique ou le cache
- Transformation des images en jeu de rayons (origine, direction, couleur)
- Tirage des mini-lots de rayons pour l'entraînement
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch

from src.constants import *
from src.model import Camera, Rays
from src.renderer import all_pixels, generate_rays
from src.repository import ViewRepository
from src.scenes import SceneSpec, cameras, oracle_render, scene_digest

logger = logging.getLogger(__name__)


@dataclass
class RayDataset:
    """Tous les rayons d'une partition, avec leur couleur de référence."""

    origins: torch.Tensor  # (N, 3) float64
    directions: torch.Tensor  # (N, 3) float64
    colors: torch.Tensor  # (N, 3) float64
    near: float
    far: float

    def __len__(self) -> int:
        return self.origins.shape[0]

    def sample_batch(
        self, batch_size: int, generator: torch.Generator
    ) -> Tuple[Rays, torch.Tensor]:
        """Mini-lot tiré uniformément (avec remise) parmi tous les pixels."""
        index = torch.randint(0, len(self), (batch_size,), generator=generator)
        return Rays(self.origins[index], self.directions[index]), self.colors[index]


class SceneDataLoader:
    def __init__(self, spec: SceneSpec, repository: Optional[ViewRepository] = None):
        self.spec = spec
        self.repository = repository
        self.digest = scene_digest(spec)

    def cameras(self, split: str) -> List[Camera]:
        return cameras(self.spec, split)

    def fetch_views(
        self,
        split: str = "train",
        n_samples: int = ORACLE_SAMPLE_FACTOR * DEFAULT_N_SAMPLES,
        use_cache: bool = True,
    ) -> List[np.ndarray]:
        """Images de référence (H, W, 3) d'une partition, depuis le cache ou le rendu analytique."""
        split_cameras = self.cameras(split)
        # Vérifie d'abord le cache
        cached = {}
        if use_cache and self.repository is not None:
            cached = self.repository.get_views(self.digest, split, n_samples)
            if len(cached) == len(split_cameras):
                logger.info("Vues %s de %s lues depuis le cache", split, self.spec.name)
                return [cached[i] for i in range(len(split_cameras))]

        views = []
        for index, camera in enumerate(split_cameras):
            if index in cached:
                views.append(cached[index])
                continue
            image = oracle_render(self.spec, camera, n_samples=n_samples).numpy()
            if use_cache and self.repository is not None:
                self.repository.save_view(self.digest, split, index, n_samples, image)
            views.append(image)
        logger.info("%d vues %s rendues pour %s", len(views), split, self.spec.name)
        return views

    def build_ray_dataset(
        self,
        split: str = "train",
        n_samples: int = ORACLE_SAMPLE_FACTOR * DEFAULT_N_SAMPLES,
        use_cache: bool = True,
    ) -> RayDataset:
        split_cameras = self.cameras(split)
        views = self.fetch_views(split, n_samples, use_cache)
        origins, directions, colors = [], [], []
        for camera, image in zip(split_cameras, views):
            rays = generate_rays(camera, all_pixels(camera))
            origins.append(rays.origins)
            directions.append(rays.directions)
            colors.append(torch.from_numpy(image).reshape(-1, 3))
        ring = self.spec.cameras
        return RayDataset(
            origins=torch.cat(origins),
            directions=torch.cat(directions),
            colors=torch.cat(colors),
            near=ring.near,
            far=ring.far,
        )
