"""
Module des scènes analytiques.
- Document SceneSpec (pydantic) : primitives, boîte englobante, anneau de caméras
- Évaluation du champ analytique et rendu de référence par intégration dense
- Préréglages nommés (blobs3) résolus par la ligne de commande
"""

import hashlib
import json
import logging
import math
from pathlib import Path
from typing import List, Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.constants import *
from src.model import Camera, ConfigurationError, Rays
from src.renderer import all_pixels, clip_to_box, composite, generate_rays, look_at, sample_intervals

logger = logging.getLogger(__name__)

Vec3 = Tuple[float, float, float]


def _check_color(color: Vec3) -> Vec3:
    if any(c < 0.0 or c > 1.0 for c in color):
        raise ValueError(f"couleur hors de [0, 1] : {color}")
    return color


class GaussianBlob(BaseModel):
    model_config = ConfigDict(extra="forbid")

    center: Vec3
    width: float = Field(gt=0, description="écart-type isotrope")
    peak: float = Field(ge=0, description="densité au centre")
    color: Vec3

    @field_validator("color")
    @classmethod
    def check_color(cls, value):
        return _check_color(value)


class Sphere(BaseModel):
    model_config = ConfigDict(extra="forbid")

    center: Vec3
    radius: float = Field(gt=0)
    density: float = Field(ge=0)
    color: Vec3

    @field_validator("color")
    @classmethod
    def check_color(cls, value):
        return _check_color(value)


class CameraRing(BaseModel):
    """Caméras réparties sur un cercle incliné, toutes dirigées vers le centre de la boîte."""

    model_config = ConfigDict(extra="forbid")

    train_count: int = Field(24, ge=1)
    test_count: int = Field(8, ge=1)
    radius: float = Field(3.0, gt=0)
    elevation_deg: float = Field(25.0, gt=-90, lt=90)
    width: int = Field(64, ge=1)
    height: int = Field(64, ge=1)
    focal: float = Field(64.0, gt=0)
    near: float = Field(0.5, ge=0)
    far: float = Field(6.0, gt=0)

    @model_validator(mode="after")
    def _near_far(self):
        if not self.near < self.far:
            raise ValueError(f"near {self.near} >= far {self.far}")
        return self


class SceneSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    blobs: List[GaussianBlob] = []
    spheres: List[Sphere] = []
    bounding_box: Tuple[Vec3, Vec3] = DEFAULT_BOUNDING_BOX
    cameras: CameraRing = CameraRing()
    background: Vec3 = DEFAULT_BACKGROUND

    @field_validator("bounding_box")
    @classmethod
    def _box(cls, box):
        lo, hi = box
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"boîte englobante invalide : {box}")
        return box

    @property
    def center(self) -> Vec3:
        lo, hi = self.bounding_box
        return tuple((a + b) / 2.0 for a, b in zip(lo, hi))


def field_eval(spec: SceneSpec, points) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Densité = somme des densités des primitives ; couleur = moyenne des couleurs
    pondérée par la densité (gris uniforme là où la densité est nulle).
    """
    points = torch.as_tensor(points, dtype=torch.float64)
    sigma = torch.zeros(points.shape[:-1], dtype=torch.float64)
    weighted = torch.zeros((*points.shape[:-1], 3), dtype=torch.float64)
    for blob in spec.blobs:
        d2 = ((points - torch.tensor(blob.center, dtype=torch.float64)) ** 2).sum(-1)
        density = blob.peak * torch.exp(-d2 / (2.0 * blob.width**2))
        sigma = sigma + density
        weighted = weighted + density.unsqueeze(-1) * torch.tensor(blob.color, dtype=torch.float64)
    for sphere in spec.spheres:
        d2 = ((points - torch.tensor(sphere.center, dtype=torch.float64)) ** 2).sum(-1)
        density = torch.where(
            d2 <= sphere.radius**2,
            torch.full_like(d2, sphere.density),
            torch.zeros_like(d2),
        )
        sigma = sigma + density
        weighted = weighted + density.unsqueeze(-1) * torch.tensor(sphere.color, dtype=torch.float64)
    gray = torch.full_like(weighted, 0.5)
    rgb = torch.where(
        sigma.unsqueeze(-1) > 0, weighted / sigma.clamp_min(1e-300).unsqueeze(-1), gray
    )
    return sigma, rgb


def ring_camera(ring: CameraRing, target: Vec3, azimuth: float) -> Camera:
    elevation = math.radians(ring.elevation_deg)
    eye = (
        target[0] + ring.radius * math.cos(elevation) * math.cos(azimuth),
        target[1] + ring.radius * math.cos(elevation) * math.sin(azimuth),
        target[2] + ring.radius * math.sin(elevation),
    )
    return look_at(eye, target, ring.focal, ring.width, ring.height, ring.near, ring.far)


def cameras(spec: SceneSpec, split: str = "train") -> List[Camera]:
    """Caméras d'entraînement, ou de test décalées d'un demi-pas angulaire."""
    ring = spec.cameras
    if split == "train":
        count, offset = ring.train_count, 0.0
    elif split == "test":
        count, offset = ring.test_count, 0.5
    else:
        raise ConfigurationError(ERR_RUN_CONFIG.format(f"split={split}"))
    return [
        ring_camera(ring, spec.center, 2.0 * math.pi * (i + offset) / count)
        for i in range(count)
    ]


def oracle_render_rays(
    spec: SceneSpec, rays: Rays, near: float, far: float, n_samples: int
) -> torch.Tensor:
    lo, hi = spec.bounding_box
    box_min = torch.tensor(lo, dtype=torch.float64)
    box_max = torch.tensor(hi, dtype=torch.float64)
    t_start, t_end, _ = clip_to_box(rays, box_min, box_max, near, far)
    t, deltas = sample_intervals(t_start, t_end, n_samples)
    points = rays.origins.unsqueeze(1) + t.unsqueeze(-1) * rays.directions.unsqueeze(1)
    sigma, rgb = field_eval(spec, points)
    background = torch.tensor(spec.background, dtype=torch.float64)
    color, _ = composite(sigma, rgb, deltas, background)
    return color


@torch.no_grad()
def oracle_render(
    spec: SceneSpec,
    camera: Camera,
    n_samples: int = ORACLE_SAMPLE_FACTOR * DEFAULT_N_SAMPLES,
    chunk: int = 1024,
) -> torch.Tensor:
    """Image de référence (H, W, 3) en float64, même quadrature que le rendu appris."""
    rays = generate_rays(camera, all_pixels(camera))
    colors = [
        oracle_render_rays(spec, rays[i : i + chunk], camera.near, camera.far, n_samples)
        for i in range(0, len(rays), chunk)
    ]
    return torch.cat(colors).reshape(camera.height, camera.width, 3)


def blobs3() -> SceneSpec:
    """Trois blobs gaussiens rouge, vert et bleu dans [-1, 1]^3."""
    return SceneSpec(
        name="blobs3",
        blobs=[
            GaussianBlob(center=(0.35, 0.0, 0.0), width=0.22, peak=20.0, color=(0.9, 0.1, 0.1)),
            GaussianBlob(center=(-0.2, 0.3, 0.05), width=0.22, peak=20.0, color=(0.1, 0.85, 0.15)),
            GaussianBlob(center=(-0.15, -0.3, -0.1), width=0.22, peak=20.0, color=(0.1, 0.2, 0.9)),
        ],
    )


def empty() -> SceneSpec:
    return SceneSpec(name="empty")


def sphere() -> SceneSpec:
    return SceneSpec(
        name="sphere",
        spheres=[Sphere(center=(0.0, 0.0, 0.0), radius=0.5, density=15.0, color=(0.8, 0.6, 0.2))],
    )


PRESETS = {"blobs3": blobs3, "empty": empty, "sphere": sphere}


def load_scene(path) -> SceneSpec:
    try:
        return SceneSpec.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(ERR_SCENE_NOT_FOUND.format(path))
    except ValueError as e:
        raise ConfigurationError(ERR_RUN_CONFIG.format(f"scène {path} : {e}"))


def save_scene(spec: SceneSpec, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(spec.model_dump_json(indent=2), encoding="utf-8")
    return path


def resolve_scene(name_or_path: str) -> SceneSpec:
    """Nom de préréglage ou chemin vers un document SceneSpec JSON."""
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]()
    if not Path(name_or_path).is_file():
        raise ConfigurationError(ERR_SCENE_NOT_FOUND.format(name_or_path))
    return load_scene(name_or_path)


def scene_digest(spec: SceneSpec) -> str:
    """Empreinte stable du document, clé du cache des vues."""
    canonical = json.dumps(spec.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def scene_schema() -> dict:
    return SceneSpec.model_json_schema()
