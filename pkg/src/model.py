"""
Modèles de données pour le projet ECRF.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from src.constants import *


class EcrfError(Exception):
    """Erreur de base du projet."""


class ConfigurationError(EcrfError, ValueError):
    pass


class ContractError(EcrfError, ValueError):
    pass


class NonFiniteLossError(EcrfError, RuntimeError):
    def __init__(self, term: str, value: float):
        super().__init__(ERR_NON_FINITE.format(term, value))
        self.term = term


class TableOverflowError(EcrfError, ValueError):
    pass


class BitstreamError(EcrfError, ValueError):
    pass


class BadMagicError(BitstreamError):
    pass


class UnsupportedVersionError(BitstreamError):
    pass


class ChecksumError(BitstreamError):
    pass


class TruncatedStreamError(BitstreamError):
    pass


class CorruptPayloadError(BitstreamError):
    pass


class CheckpointError(EcrfError, ValueError):
    pass


@dataclass(frozen=True)
class BlockDims:
    """Taille de bloc DCT : (K1, K2, K3) pour les matrices, (K1, K2) pour les vecteurs."""

    dims: Tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(k) for k in self.dims)
        if not dims or any(k < 1 for k in dims):
            raise ConfigurationError(ERR_BLOCK_DIMS.format(self.dims))
        object.__setattr__(self, "dims", dims)

    @classmethod
    def parse(cls, text: str) -> "BlockDims":
        """Lit une taille de bloc au format « 16x16x16 »."""
        try:
            return cls(tuple(int(k) for k in text.lower().split("x")))
        except ValueError:
            raise ConfigurationError(ERR_BLOCK_DIMS.format(text))

    @classmethod
    def ones(cls, ndim: int) -> "BlockDims":
        return cls((1,) * ndim)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return math.prod(self.dims)

    def __str__(self) -> str:
        return "x".join(str(k) for k in self.dims)


@dataclass(frozen=True)
class GridConfig:
    resolution: Tuple[int, int, int] = DEFAULT_RESOLUTION
    rank: int = DEFAULT_RANK
    density_channels: int = DEFAULT_CHANNELS
    appearance_channels: int = DEFAULT_CHANNELS
    bounding_box: Tuple[Tuple[float, float, float], Tuple[float, float, float]] = (
        DEFAULT_BOUNDING_BOX
    )
    init_scale: float = DEFAULT_INIT_SCALE
    coeff_step: float = DEFAULT_COEFF_STEP  # taille d'un pas de quantification
    matrix_block: BlockDims = field(
        default_factory=lambda: BlockDims(MATRIX_BLOCK_DEFAULT)
    )
    vector_block: BlockDims = field(
        default_factory=lambda: BlockDims(VECTOR_BLOCK_DEFAULT)
    )

    def __post_init__(self):
        object.__setattr__(
            self, "resolution", tuple(int(n) for n in self.resolution)
        )
        object.__setattr__(
            self,
            "bounding_box",
            tuple(tuple(float(v) for v in corner) for corner in self.bounding_box),
        )
        for name in ("matrix_block", "vector_block"):
            value = getattr(self, name)
            if not isinstance(value, BlockDims):
                object.__setattr__(self, name, BlockDims(tuple(value)))

        if len(self.resolution) != 3:
            raise ConfigurationError(ERR_NOT_POSITIVE.format("resolution", self.resolution))
        for axis, n in zip("IJK", self.resolution):
            if n < 2:
                raise ConfigurationError(ERR_RESOLUTION_MIN.format(axis, n))
        for name in ("rank", "density_channels", "appearance_channels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(ERR_NOT_POSITIVE.format(name, getattr(self, name)))
        if self.init_scale < 0:
            raise ConfigurationError(ERR_NOT_POSITIVE.format("init_scale", self.init_scale))
        if not self.coeff_step > 0:
            raise ConfigurationError(ERR_NOT_POSITIVE.format("coeff_step", self.coeff_step))
        lo, hi = self.bounding_box
        if len(lo) != 3 or len(hi) != 3 or any(a >= b for a, b in zip(lo, hi)):
            raise ConfigurationError(ERR_BOUNDING_BOX.format(self.bounding_box))
        if self.matrix_block.ndim != 3 or self.vector_block.ndim != 2:
            raise ConfigurationError(
                ERR_BLOCK_DIMS.format((self.matrix_block, self.vector_block))
            )
        self._check_multiples()

    def _check_multiples(self):
        k1, k2, k3 = self.matrix_block.dims
        v1, v2 = self.vector_block.dims
        for name in ("density_channels", "appearance_channels"):
            channels = getattr(self, name)
            for block_name, k in (("matrice", k1), ("vecteur", v1)):
                if channels % k:
                    raise ConfigurationError(
                        ERR_NOT_MULTIPLE.format(name, channels, f"{block_name} {k}")
                    )
        for plane, (a, b) in PLANE_AXES.items():
            for axis, k in ((a, k2), (b, k3)):
                n = self.resolution[axis]
                if n % k:
                    raise ConfigurationError(
                        ERR_NOT_MULTIPLE.format(
                            f"resolution[{'IJK'[axis]}] (plan {plane})", n, k
                        )
                    )
        for axis, n in enumerate(self.resolution):
            if n % v2:
                raise ConfigurationError(
                    ERR_NOT_MULTIPLE.format(f"resolution[{'IJK'[axis]}] (ligne)", n, v2)
                )

    def channels(self, kind: str) -> int:
        return self.density_channels if kind == "density" else self.appearance_channels

    def rows(self, kind: str) -> int:
        """Nombre de lignes d'une composante : rang × canaux."""
        return self.rank * self.channels(kind)

    def component_shape(self, name: str) -> Tuple[int, ...]:
        kind, role, axes = name.split("_")
        rows = self.rows(kind)
        if role == "plane":
            a, b = PLANE_AXES[axes]
            return (rows, self.resolution[a], self.resolution[b])
        return (rows, self.resolution[LINE_AXIS[axes]])

    def block_for(self, name: str) -> BlockDims:
        return self.matrix_block if "_plane_" in name else self.vector_block


@dataclass(frozen=True)
class CoefficientTensor:
    """Coefficients DCT par blocs d'une composante, même forme que la source."""

    values: torch.Tensor
    block_dims: BlockDims
    source: str = ""


@dataclass(frozen=True)
class FeatureVector:
    density_feature: torch.Tensor  # (..., canaux densité)
    appearance_feature: torch.Tensor  # (..., canaux apparence)


@dataclass
class Camera:
    rotation: torch.Tensor  # (3, 3), colonnes (droite, haut, arrière)
    translation: torch.Tensor  # (3,)
    focal: float
    width: int
    height: int
    near: float = 0.0
    far: float = math.inf

    def __post_init__(self):
        if not self.focal > 0:
            raise ConfigurationError(ERR_CAMERA.format(f"focale {self.focal}"))
        if not self.near < self.far:
            raise ConfigurationError(ERR_CAMERA.format(f"near {self.near} >= far {self.far}"))
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(ERR_CAMERA.format(f"taille {self.width}x{self.height}"))


@dataclass
class Ray:
    origin: torch.Tensor  # (3,)
    direction: torch.Tensor  # (3,), unitaire


@dataclass
class Rays:
    origins: torch.Tensor  # (N, 3)
    directions: torch.Tensor  # (N, 3)

    def __len__(self) -> int:
        return self.origins.shape[0]

    def __getitem__(self, index) -> "Rays":
        return Rays(self.origins[index], self.directions[index])

    def ray(self, i: int) -> Ray:
        return Ray(self.origins[i], self.directions[i])


@dataclass
class RaySampleSet:
    t: torch.Tensor  # (N,)
    deltas: torch.Tensor  # (N,)
    points: torch.Tensor  # (N, 3)

    @property
    def count(self) -> int:
        return self.t.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.count == 0


@dataclass(frozen=True)
class RenderConfig:
    n_samples: int = DEFAULT_N_SAMPLES
    background: Tuple[float, float, float] = DEFAULT_BACKGROUND
    stratified: bool = False
    chunk: int = 4096

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigurationError(ERR_NOT_POSITIVE.format("n_samples", self.n_samples))
        object.__setattr__(self, "background", tuple(float(c) for c in self.background))


@dataclass(frozen=True)
class QuantSurrogate:
    mode: str = "train"  # "train" : bruit additif, "eval" : arrondi
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("train", "eval"):
            raise ConfigurationError(ERR_SURROGATE_MODE.format(self.mode))


@dataclass
class FrequencyTable:
    """Table de fréquences entières d'un canal, total 2^precision."""

    k_min: int
    k_max: int
    freqs: np.ndarray  # (k_max - k_min + 1,), entiers >= 1
    cumulative: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=np.int64)
        self.cumulative = np.concatenate(([0], np.cumsum(self.freqs)))

    @property
    def total(self) -> int:
        return int(self.cumulative[-1])

    def __len__(self) -> int:
        return len(self.freqs)


@dataclass
class QuantizedCoefficients:
    symbols: Dict[str, np.ndarray]  # entiers dans [-127, 127], forme de la composante
    saturation: int
    support: Dict[str, np.ndarray]  # (lignes, 2) : (k_min, k_max) observés par canal
    block_dims: Dict[str, BlockDims] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return sum(s.size for s in self.symbols.values())


@dataclass(frozen=True)
class LossConfig:
    lambda_e: float = 0.0
    alpha: float = 1.0
    total_iters: int = DEFAULT_ITERATIONS
    entropy_start_fraction: float = ENTROPY_START_FRACTION
    rate_domain: str = "frequency"

    def __post_init__(self):
        if self.lambda_e < 0:
            raise ConfigurationError(ERR_LOSS_CONFIG.format(f"lambda_e={self.lambda_e}"))
        if self.alpha < 0:
            raise ConfigurationError(ERR_LOSS_CONFIG.format(f"alpha={self.alpha}"))
        if not 0 <= self.entropy_start_fraction < 1:
            raise ConfigurationError(
                ERR_LOSS_CONFIG.format(f"entropy_start_fraction={self.entropy_start_fraction}")
            )
        if self.total_iters < 0:
            raise ConfigurationError(ERR_LOSS_CONFIG.format(f"total_iters={self.total_iters}"))
        if self.rate_domain not in RATE_DOMAINS:
            raise ConfigurationError(ERR_LOSS_CONFIG.format(f"rate_domain={self.rate_domain}"))

    @property
    def lambda_r(self) -> float:
        return self.alpha * self.lambda_e

    @property
    def entropy_start(self) -> int:
        """Itération à partir de laquelle les termes de débit sont actifs."""
        # Arrondi préalable : 30000 × 16000/30000 doit donner 16000, pas 16001
        return math.ceil(round(self.total_iters * self.entropy_start_fraction, 9))


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = DEFAULT_BATCH_SIZE
    lr_grid: float = LR_GRID
    lr_mlp: float = LR_MLP
    lr_entropy: float = LR_ENTROPY
    log_every: int = 100
    eval_every: int = 500
    view_dependent: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(ERR_NOT_POSITIVE.format("batch_size", self.batch_size))
        for name in ("lr_grid", "lr_mlp", "lr_entropy"):
            if getattr(self, name) < 0:
                raise ConfigurationError(ERR_NOT_POSITIVE.format(name, getattr(self, name)))
        for name in ("log_every", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigurationError(ERR_NOT_POSITIVE.format(name, getattr(self, name)))


@dataclass(frozen=True)
class SweepConfig:
    """Valeurs par défaut de `rd-sweep` ; `calibration_ratios` sert à `--calibrate`."""

    lambdas: Tuple[float, ...] = DEFAULT_SWEEP_LAMBDAS
    alphas: Tuple[float, ...] = DEFAULT_SWEEP_ALPHAS
    calibration_ratios: Tuple[float, ...] = CALIBRATION_RATIOS

    def __post_init__(self):
        for name in ("lambdas", "alphas"):
            if any(value < 0 for value in getattr(self, name)):
                raise ConfigurationError(ERR_RUN_CONFIG.format(f"sweep.{name}={getattr(self, name)}"))
        if any(ratio <= 0 for ratio in self.calibration_ratios):
            raise ConfigurationError(ERR_NOT_POSITIVE.format("sweep.calibration_ratios", self.calibration_ratios))


@dataclass
class LossBreakdown:
    mse: float
    rate_bits: float
    reg: float
    weighted_rate: float
    weighted_reg: float
    total: float


@dataclass
class SizeReport:
    """Décomposition de la taille d'un flux : en-tête + MLP + charge utile."""

    header_bytes: int
    mlp_bytes: int
    payload_bytes: int
    total_bytes: int
    symbol_count: int
    saturation: int = 0


@dataclass
class GradientReport:
    max_rel_error: Dict[str, float]
    samples: Dict[str, int]

    def passed(self, tolerance: float = 1e-3) -> bool:
        return all(err < tolerance for err in self.max_rel_error.values())


@dataclass(frozen=True)
class RunConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    scene: str = "blobs3"
    seed: int = 0
    output_dir: str = DEFAULT_OUTPUT_ROOT
    cache_path: Optional[str] = None

    def __post_init__(self):
        if not self.scene:
            raise ConfigurationError(ERR_RUN_CONFIG.format("scene"))
        if self.seed < 0:
            raise ConfigurationError(ERR_RUN_CONFIG.format(f"seed={self.seed}"))
