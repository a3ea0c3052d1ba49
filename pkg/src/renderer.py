"""
Module de rendu volumique différentiable.
- Génération des rayons d'une caméra sténopé
- Échantillonnage des points le long des rayons, restreint à la boîte
- Décodage densité / couleur par un MLP peu profond
- Intégration émission-absorption et PSNR
"""

import logging
import math
from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from src.constants import *
from src.grid import FeatureGrid, interpolate_features
from src.model import (
    Camera,
    ContractError,
    FeatureVector,
    Ray,
    Rays,
    RaySampleSet,
    RenderConfig,
)

logger = logging.getLogger(__name__)


class DecoderMLP(torch.nn.Module):
    """Entrée : caractéristique d'apparence (+ direction encodée), 2 couches cachées ReLU, 3 logits."""

    def __init__(
        self,
        appearance_channels: int,
        hidden: int = MLP_HIDDEN,
        view_dependent: bool = False,
        density_bias: float = DEFAULT_DENSITY_BIAS,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.appearance_channels = appearance_channels
        self.hidden = hidden
        self.view_dependent = view_dependent
        in_features = appearance_channels + (direction_encoding_size() if view_dependent else 0)
        self.layers = torch.nn.ModuleList(
            [
                torch.nn.Linear(in_features, hidden, dtype=dtype),
                torch.nn.Linear(hidden, hidden, dtype=dtype),
                torch.nn.Linear(hidden, 3, dtype=dtype),
            ]
        )
        self.density_bias = torch.nn.Parameter(torch.tensor(density_bias, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x

    def flat_parameters(self):
        """Paramètres dans l'ordre déclaré de sérialisation."""
        params = []
        for layer in self.layers:
            params.extend([layer.weight, layer.bias])
        params.append(self.density_bias)
        return params


def decoder_new(
    appearance_channels: int,
    seed: int,
    view_dependent: bool = False,
    hidden: int = MLP_HIDDEN,
    dtype: torch.dtype = torch.float32,
) -> DecoderMLP:
    """MLP initialisé U(-1/√fan_in, 1/√fan_in), déterministe pour une graine."""
    mlp = DecoderMLP(appearance_channels, hidden, view_dependent, dtype=dtype)
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for layer in mlp.layers:
            bound = 1.0 / math.sqrt(layer.in_features)
            for param in (layer.weight, layer.bias):
                noise = torch.rand(param.shape, generator=generator, dtype=torch.float64)
                param.copy_((2.0 * noise - 1.0) * bound)
    return mlp


def direction_encoding_size() -> int:
    return 3 + 3 * 2 * DIRECTION_FREQUENCIES


def encode_direction(direction: torch.Tensor) -> torch.Tensor:
    """Direction brute suivie de sin/cos à 2 fréquences."""
    parts = [direction]
    for k in range(DIRECTION_FREQUENCIES):
        scaled = (2.0**k) * math.pi * direction
        parts.extend([torch.sin(scaled), torch.cos(scaled)])
    return torch.cat(parts, -1)


def decode_appearance(
    feature: FeatureVector, direction: Optional[torch.Tensor], mlp: DecoderMLP
) -> Tuple[torch.Tensor, torch.Tensor]:
    """σ = softplus(Σ densité + b0), c = sigmoid(MLP(apparence [, direction]))."""
    sigma = F.softplus(feature.density_feature.sum(-1) + mlp.density_bias)
    x = feature.appearance_feature
    if mlp.view_dependent:
        encoded = encode_direction(direction.to(x.dtype))
        x = torch.cat([x, encoded.expand(*x.shape[:-1], encoded.shape[-1])], -1)
    rgb = torch.sigmoid(mlp(x))
    return sigma, rgb


def look_at(
    eye: Sequence[float],
    target: Sequence[float],
    focal: float,
    width: int,
    height: int,
    near: float = 0.0,
    far: float = math.inf,
    up: Sequence[float] = (0.0, 0.0, 1.0),
) -> Camera:
    """Caméra placée en eye et regardant target (convention OpenGL)."""
    eye_t = torch.tensor(eye, dtype=torch.float64)
    back = F.normalize(eye_t - torch.tensor(target, dtype=torch.float64), dim=0)
    right = F.normalize(torch.linalg.cross(torch.tensor(up, dtype=torch.float64), back), dim=0)
    true_up = torch.linalg.cross(back, right)
    rotation = torch.stack((right, true_up, back), dim=1)
    return Camera(rotation, eye_t, focal, width, height, near, far)


def all_pixels(camera: Camera) -> torch.Tensor:
    """Indices (colonne, ligne) de tous les pixels, ordre ligne par ligne."""
    rows, cols = torch.meshgrid(
        torch.arange(camera.height), torch.arange(camera.width), indexing="ij"
    )
    return torch.stack((cols.reshape(-1), rows.reshape(-1)), -1)


def generate_rays(camera: Camera, pixels: torch.Tensor) -> Rays:
    """Rayons passant par le centre des pixels (colonne, ligne)."""
    pixels = torch.as_tensor(pixels).reshape(-1, 2)
    cols, rows = pixels[:, 0], pixels[:, 1]
    if bool(((cols < 0) | (cols >= camera.width) | (rows < 0) | (rows >= camera.height)).any()):
        raise ContractError(ERR_PIXEL_OUTSIDE.format(pixels.tolist()[:4]))
    rotation = camera.rotation.to(torch.float64)
    u = cols.to(torch.float64) + 0.5
    v = rows.to(torch.float64) + 0.5
    cx, cy = camera.width / 2.0, camera.height / 2.0
    directions = torch.stack(
        ((u - cx) / camera.focal, -(v - cy) / camera.focal, -torch.ones_like(u)), -1
    )
    directions = F.normalize(directions @ rotation.T, dim=-1)
    origins = camera.translation.to(torch.float64).expand_as(directions)
    return Rays(origins=origins, directions=directions)


def intersect_box(
    origins: torch.Tensor, directions: torch.Tensor, box_min: torch.Tensor, box_max: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Intervalle [t_entrée, t_sortie] de chaque rayon dans la boîte (méthode des dalles)."""
    safe = torch.where(
        directions.abs() < 1e-12, torch.full_like(directions, 1e-12), directions
    )
    inv = 1.0 / safe
    t0 = (box_min - origins) * inv
    t1 = (box_max - origins) * inv
    t_enter = torch.minimum(t0, t1).amax(-1)
    t_exit = torch.maximum(t0, t1).amin(-1)
    return t_enter, t_exit


def sample_intervals(
    t_start: torch.Tensor,
    t_end: torch.Tensor,
    n_samples: int,
    stratified: bool = False,
    generator: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """t (B, N) et δ (B, N) : milieux des N sous-intervalles, ou tirage stratifié."""
    step = (t_end - t_start).unsqueeze(-1) / n_samples
    bins = torch.arange(n_samples, dtype=t_start.dtype)
    if stratified:
        offsets = torch.rand(
            (*t_start.shape, n_samples), generator=generator, dtype=torch.float64
        ).to(t_start.dtype)
    else:
        offsets = torch.full((n_samples,), 0.5, dtype=t_start.dtype)
    t = t_start.unsqueeze(-1) + (bins + offsets) * step
    if n_samples == 1:
        return t, step.clone()
    deltas = t[..., 1:] - t[..., :-1]
    deltas = torch.cat([deltas, deltas[..., -1:]], -1)
    return t, deltas


def clip_to_box(rays: Rays, box_min, box_max, near: float, far: float):
    t_enter, t_exit = intersect_box(rays.origins, rays.directions, box_min, box_max)
    t_start = torch.clamp(t_enter, min=near)
    t_end = torch.clamp(t_exit, max=far)
    hit = t_end > t_start
    t_start = torch.where(hit, t_start, torch.zeros_like(t_start))
    t_end = torch.where(hit, t_end, torch.zeros_like(t_end))
    return t_start, t_end, hit


def sample_points(
    ray: Ray,
    bounding_box,
    config: RenderConfig,
    near: float = 0.0,
    far: float = math.inf,
    generator: Optional[torch.Generator] = None,
) -> RaySampleSet:
    """N points uniformes en t sur [near, far] restreint à la boîte ; vide si le rayon la manque."""
    box_min = torch.tensor(bounding_box[0], dtype=torch.float64)
    box_max = torch.tensor(bounding_box[1], dtype=torch.float64)
    rays = Rays(ray.origin.reshape(1, 3).to(torch.float64), ray.direction.reshape(1, 3).to(torch.float64))
    t_start, t_end, hit = clip_to_box(rays, box_min, box_max, near, far)
    if not bool(hit[0]):
        empty = torch.zeros(0, dtype=torch.float64)
        return RaySampleSet(t=empty, deltas=empty.clone(), points=torch.zeros((0, 3), dtype=torch.float64))
    t, deltas = sample_intervals(t_start, t_end, config.n_samples, config.stratified, generator)
    points = rays.origins.unsqueeze(1) + t.unsqueeze(-1) * rays.directions.unsqueeze(1)
    points = torch.maximum(torch.minimum(points, box_max), box_min)
    return RaySampleSet(t=t[0], deltas=deltas[0], points=points[0])


def composite(
    sigma: torch.Tensor, rgb: torch.Tensor, deltas: torch.Tensor, background: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Ĉ = Σ T_i (1 − exp(−σ_i δ_i)) c_i + T_fin · fond ; renvoie aussi les poids."""
    tau = sigma * deltas
    accumulated = torch.cumsum(tau, -1)
    transmittance = torch.exp(-(accumulated - tau))
    weights = transmittance * (1.0 - torch.exp(-tau))
    remaining = torch.exp(-accumulated[..., -1:]) if tau.shape[-1] else torch.ones_like(tau[..., :1])
    color = (weights.unsqueeze(-1) * rgb).sum(-2) + remaining * background
    return color, weights


def render_rays(
    grid: FeatureGrid,
    mlp: DecoderMLP,
    rays: Rays,
    config: RenderConfig,
    near: float = 0.0,
    far: float = math.inf,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Rendu vectorisé d'un lot de rayons : (B, 3)."""
    dtype = grid.dtype
    lo, hi = grid.config.bounding_box
    box_min = torch.tensor(lo, dtype=torch.float64)
    box_max = torch.tensor(hi, dtype=torch.float64)
    origins = rays.origins.to(torch.float64)
    directions = rays.directions.to(torch.float64)
    t_start, t_end, _ = clip_to_box(Rays(origins, directions), box_min, box_max, near, far)
    t, deltas = sample_intervals(
        t_start, t_end, config.n_samples, config.stratified, generator
    )
    points = origins.unsqueeze(1) + t.unsqueeze(-1) * directions.unsqueeze(1)
    points = torch.maximum(torch.minimum(points, box_max), box_min)

    features = interpolate_features(grid, points.to(dtype))
    sigma, rgb = decode_appearance(features, directions.to(dtype).unsqueeze(1), mlp)
    background = torch.tensor(config.background, dtype=dtype)
    color, _ = composite(sigma, rgb, deltas.to(dtype), background)
    return color


def render_ray(
    grid: FeatureGrid,
    mlp: DecoderMLP,
    ray: Ray,
    config: RenderConfig,
    near: float = 0.0,
    far: float = math.inf,
) -> torch.Tensor:
    """Couleur d'un rayon ; le fond si le rayon manque la boîte."""
    samples = sample_points(ray, grid.config.bounding_box, config, near, far)
    background = torch.tensor(config.background, dtype=grid.dtype)
    if samples.is_empty:
        return background
    features = interpolate_features(grid, samples.points.to(grid.dtype))
    sigma, rgb = decode_appearance(features, ray.direction.to(grid.dtype), mlp)
    color, _ = composite(sigma, rgb, samples.deltas.to(grid.dtype), background)
    return color


@torch.no_grad()
def render_image(
    grid: FeatureGrid, mlp: DecoderMLP, camera: Camera, config: RenderConfig
) -> torch.Tensor:
    """Image (H, W, 3) dans [0, 1], rendu déterministe (pas de tirage stratifié)."""
    deterministic = RenderConfig(
        n_samples=config.n_samples, background=config.background, stratified=False, chunk=config.chunk
    )
    rays = generate_rays(camera, all_pixels(camera))
    colors = [
        render_rays(grid, mlp, rays[i : i + config.chunk], deterministic, camera.near, camera.far)
        for i in range(0, len(rays), config.chunk)
    ]
    return torch.cat(colors).reshape(camera.height, camera.width, 3)


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    """PSNR = 10·log10(1 / MSE) pour des images dans [0, 1], plafonné."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ContractError(ERR_SHAPE_MISMATCH.format(tuple(a.shape), tuple(b.shape)))
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))
