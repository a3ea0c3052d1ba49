"""
Module de la grille de caractéristiques décomposée en vecteurs et matrices (VM).
- Stockage des plans M et des lignes v pour la densité et l'apparence
- Reconstruction du tenseur dense (tests uniquement)
- Échantillonnage différentiable par interpolation bilinéaire × linéaire
"""

import logging
from typing import Dict

import torch
import torch.nn.functional as F

from src.constants import *
from src.model import ContractError, FeatureVector, GridConfig

logger = logging.getLogger(__name__)

# Tolérance sur l'appartenance à la boîte (arrondis flottants)
BOX_TOLERANCE = 1e-6


class FeatureGrid(torch.nn.Module):
    """Ensemble {M_σ, M_c, v_σ, v_c} des composantes VM."""

    def __init__(self, config: GridConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.params = torch.nn.ParameterDict(
            {
                name: torch.nn.Parameter(
                    torch.zeros(config.component_shape(name), dtype=dtype)
                )
                for name in COMPONENT_NAMES
            }
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.params[COMPONENT_NAMES[0]].dtype

    def components(self) -> Dict[str, torch.Tensor]:
        return {name: self.params[name] for name in COMPONENT_NAMES}

    def plane(self, kind: str, axes: str) -> torch.Tensor:
        return self.params[f"{kind}_plane_{axes}"]

    def line(self, kind: str, axis: str) -> torch.Tensor:
        return self.params[f"{kind}_line_{axis}"]

    def load_components(self, components: Dict[str, torch.Tensor]) -> "FeatureGrid":
        with torch.no_grad():
            for name in COMPONENT_NAMES:
                self.params[name].copy_(components[name])
        return self

    def box_tensors(self):
        lo, hi = self.config.bounding_box
        return (
            torch.tensor(lo, dtype=self.dtype),
            torch.tensor(hi, dtype=self.dtype),
        )

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.params.values())


def grid_new(config: GridConfig, seed: int, dtype: torch.dtype = torch.float32) -> FeatureGrid:
    """Initialise chaque composante selon U(-scale, scale), déterministe pour une graine."""
    grid = FeatureGrid(config, dtype)
    generator = torch.Generator().manual_seed(seed)
    scale = config.init_scale
    with torch.no_grad():
        for name in COMPONENT_NAMES:
            param = grid.params[name]
            noise = torch.rand(param.shape, generator=generator, dtype=torch.float64)
            param.copy_((2.0 * noise - 1.0) * scale)
    return grid


def reconstruct_dense(grid: FeatureGrid, which: str) -> torch.Tensor:
    """Tenseur dense (canaux × I × J × K) : Σ_r v^X∘M^YZ + v^Y∘M^XZ + v^Z∘M^XY."""
    config = grid.config
    I, J, K = config.resolution
    dense = (
        torch.einsum("ri,rjk->rijk", grid.line(which, "x"), grid.plane(which, "yz"))
        + torch.einsum("rj,rik->rijk", grid.line(which, "y"), grid.plane(which, "xz"))
        + torch.einsum("rk,rij->rijk", grid.line(which, "z"), grid.plane(which, "xy"))
    )
    return dense.reshape(config.rank, config.channels(which), I, J, K).sum(0)


def normalize_points(grid: FeatureGrid, points: torch.Tensor) -> torch.Tensor:
    """Coordonnées monde → [-1, 1]^3 (nœuds alignés sur les coins)."""
    lo, hi = grid.box_tensors()
    return 2.0 * (points - lo) / (hi - lo) - 1.0


def _interpolate(grid: FeatureGrid, which: str, normalized: torch.Tensor) -> torch.Tensor:
    """Caractéristiques (P, canaux) aux points normalisés (P, 3)."""
    config = grid.config
    n_points = normalized.shape[0]
    x, y, z = normalized.unbind(-1)
    # grid_sample : la première coordonnée indexe la dernière dimension
    plane_coords = {
        "yz": torch.stack((z, y), -1),
        "xz": torch.stack((z, x), -1),
        "xy": torch.stack((y, x), -1),
    }
    line_coords = {"x": x, "y": y, "z": z}

    rows = config.rows(which)
    features = normalized.new_zeros((rows, n_points))
    for axis, plane_name in PLANE_FOR_LINE.items():
        plane = grid.plane(which, plane_name).unsqueeze(0)
        plane_point = F.grid_sample(
            plane,
            plane_coords[plane_name].view(1, n_points, 1, 2),
            mode="bilinear",
            padding_mode="border",
            align_corners=True,
        ).view(rows, n_points)

        line = grid.line(which, axis).unsqueeze(0).unsqueeze(-1)
        coord = line_coords[axis]
        line_point = F.grid_sample(
            line,
            torch.stack((torch.zeros_like(coord), coord), -1).view(1, n_points, 1, 2),
            mode="bilinear",
            padding_mode="border",
            align_corners=True,
        ).view(rows, n_points)

        features = features + plane_point * line_point

    features = features.view(config.rank, config.channels(which), n_points).sum(0)
    return features.T


def interpolate_features(grid: FeatureGrid, points: torch.Tensor) -> FeatureVector:
    """Échantillonnage sans contrôle de la boîte ; l'appelant a déjà restreint les points."""
    batch_shape = points.shape[:-1]
    flat = normalize_points(grid, points.reshape(-1, 3).to(grid.dtype))
    density = _interpolate(grid, "density", flat)
    appearance = _interpolate(grid, "appearance", flat)
    return FeatureVector(
        density_feature=density.reshape(*batch_shape, -1),
        appearance_feature=appearance.reshape(*batch_shape, -1),
    )


def sample_features(grid: FeatureGrid, point: torch.Tensor) -> FeatureVector:
    """Vecteur de caractéristiques en un point (ou un lot de points) de la boîte."""
    point = torch.as_tensor(point, dtype=grid.dtype)
    lo, hi = grid.box_tensors()
    tolerance = BOX_TOLERANCE * (hi - lo)
    outside = ((point < lo - tolerance) | (point > hi + tolerance)).any(-1)
    if bool(outside.any()):
        raise ContractError(ERR_POINT_OUTSIDE.format(point[outside][:1].tolist()))
    return interpolate_features(grid, point)
