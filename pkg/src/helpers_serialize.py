"""
Module pour la sérialisation et la désérialisation des objets du modèle.
- Configuration d'exécution (JSON, même structure que config.yaml)
- Format binaire des points de contrôle
- Lecture d'octets avec détection de troncature
"""

import json
import struct
import zlib
from dataclasses import asdict, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch

from src.constants import *
from src.entropy import EntropyModel, cdf_parameters, entropy_new
from src.grid import FeatureGrid
from src.model import (
    BlockDims,
    CheckpointError,
    ConfigurationError,
    GridConfig,
    LossConfig,
    RenderConfig,
    RunConfig,
    SweepConfig,
    TrainingConfig,
    TruncatedStreamError,
)
from src.renderer import DecoderMLP

GRID_CONFIG_FORMAT = "<6H8d5H"
MLP_FORMAT = "<BH"


class EcrfEncoder(json.JSONEncoder):
    """Encodeur JSON personnalisé pour les objets du modèle."""

    def default(self, obj):
        if isinstance(obj, BlockDims):
            return str(obj)
        if isinstance(obj, Path):
            return str(obj)
        if isinstance(obj, np.generic):
            return obj.item()
        if is_dataclass(obj):
            return obj.__dict__
        return super().default(obj)


def serialize_run_config(config: RunConfig) -> Dict[str, Any]:
    """RunConfig → dictionnaire de même structure que config.yaml."""
    grid = config.grid
    data = {
        "grid": {
            "resolution": list(grid.resolution),
            "rank": grid.rank,
            "density_channels": grid.density_channels,
            "appearance_channels": grid.appearance_channels,
            "bounding_box": [list(corner) for corner in grid.bounding_box],
            "init_scale": grid.init_scale,
            "coeff_step": grid.coeff_step,
        },
        "blocks": {"matrix": grid.matrix_block, "vector": grid.vector_block},
        "loss": {
            "lambda_e": config.loss.lambda_e,
            "alpha": config.loss.alpha,
            "iterations": config.loss.total_iters,
            "entropy_start_fraction": config.loss.entropy_start_fraction,
            "rate_domain": config.loss.rate_domain,
        },
        "training": asdict(config.training),
        "renderer": asdict(config.render),
        "sweep": {
            "lambdas": list(config.sweep.lambdas),
            "alphas": list(config.sweep.alphas),
            "calibration_ratios": list(config.sweep.calibration_ratios),
        },
        "scene": config.scene,
        "seed": config.seed,
        "output": {"root": config.output_dir},
        "cache": {"path": config.cache_path},
    }
    return json.loads(json.dumps(data, cls=EcrfEncoder))


def deserialize_run_config(data: Dict[str, Any]) -> RunConfig:
    """Dictionnaire (YAML ou JSON) → RunConfig validée ; les sections absentes gardent leurs défauts."""
    try:
        grid_data = dict(data.get("grid") or {})
        blocks = data.get("blocks") or {}
        if "matrix" in blocks:
            grid_data["matrix_block"] = _parse_block(blocks["matrix"])
        if "vector" in blocks:
            grid_data["vector_block"] = _parse_block(blocks["vector"])
        if "resolution" in grid_data:
            grid_data["resolution"] = tuple(grid_data["resolution"])
        if "bounding_box" in grid_data:
            grid_data["bounding_box"] = tuple(tuple(c) for c in grid_data["bounding_box"])

        loss_data = dict(data.get("loss") or {})
        if "iterations" in loss_data:
            loss_data["total_iters"] = loss_data.pop("iterations")

        render_data = dict(data.get("renderer") or {})
        if "background" in render_data:
            render_data["background"] = tuple(render_data["background"])

        sweep_data = {key: tuple(value) for key, value in (data.get("sweep") or {}).items()}

        return RunConfig(
            grid=GridConfig(**grid_data),
            loss=LossConfig(**loss_data),
            training=TrainingConfig(**(data.get("training") or {})),
            render=RenderConfig(**render_data),
            sweep=SweepConfig(**sweep_data),
            scene=data.get("scene", "blobs3"),
            seed=int(data.get("seed", 0)),
            output_dir=(data.get("output") or {}).get("root") or DEFAULT_OUTPUT_ROOT,
            cache_path=(data.get("cache") or {}).get("path"),
        )
    except TypeError as e:
        raise ConfigurationError(ERR_RUN_CONFIG.format(e))


def _parse_block(value) -> BlockDims:
    if isinstance(value, BlockDims):
        return value
    if isinstance(value, str):
        return BlockDims.parse(value)
    return BlockDims(tuple(value))


def save_run_config(config: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(serialize_run_config(config), f, cls=EcrfEncoder, indent=2)
    return path


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return deserialize_run_config(json.load(f))


def zigzag(value: int) -> int:
    """Entier signé → non signé : 0, -1, 1, -2, … → 0, 1, 2, 3, …"""
    return value << 1 if value >= 0 else ((-value) << 1) - 1


def unzigzag(value: int) -> int:
    return value >> 1 if not value & 1 else -((value + 1) >> 1)


def pack_varint(value: int) -> bytes:
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def pack_deltas(values) -> bytes:
    """Écarts successifs (le premier par rapport à 0), zigzag puis LEB128."""
    out = bytearray()
    previous = 0
    for value in np.asarray(values, dtype=np.int64).tolist():
        out += pack_varint(zigzag(value - previous))
        previous = value
    return bytes(out)


class ByteReader:
    """Lecture séquentielle d'un tampon ; toute lecture hors limites lève TruncatedStreamError."""

    def __init__(self, data: bytes, error=TruncatedStreamError):
        self.data = memoryview(data)
        self.pos = 0
        self.error = error

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise self.error(ERR_TRUNCATED.format(n, self.pos, len(self.data) - self.pos))
        chunk = self.data[self.pos : self.pos + n].tobytes()
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.read(itemsize * count), dtype=dtype).copy()

    def varint(self) -> int:
        """Entier non signé LEB128 (7 bits par octet, bit de poids fort = suite)."""
        value, shift = 0, 0
        while True:
            (byte,) = self.read(1)
            value |= (byte & 0x7F) << shift
            if not byte & 0x80:
                return value
            shift += 7
            if shift > 63:
                raise self.error(ERR_VARINT.format(self.pos))

    def deltas(self, count: int) -> np.ndarray:
        """Suite relue depuis ses écarts successifs (zigzag + LEB128)."""
        values = np.empty(count, dtype=np.int64)
        previous = 0
        for i in range(count):
            previous += unzigzag(self.varint())
            if abs(previous) >= 1 << 62:
                raise self.error(ERR_VARINT.format(self.pos))
            values[i] = previous
        return values

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def pack_grid_config(config: GridConfig) -> bytes:
    lo, hi = config.bounding_box
    return struct.pack(
        GRID_CONFIG_FORMAT,
        *config.resolution,
        config.rank,
        config.density_channels,
        config.appearance_channels,
        *lo,
        *hi,
        config.init_scale,
        config.coeff_step,
        *config.matrix_block.dims,
        *config.vector_block.dims,
    )


def unpack_grid_config(reader: ByteReader) -> GridConfig:
    values = reader.unpack(GRID_CONFIG_FORMAT)
    return GridConfig(
        resolution=values[0:3],
        rank=values[3],
        density_channels=values[4],
        appearance_channels=values[5],
        bounding_box=(values[6:9], values[9:12]),
        init_scale=values[12],
        coeff_step=values[13],
        matrix_block=BlockDims(values[14:17]),
        vector_block=BlockDims(values[17:19]),
    )


def pack_mlp(mlp: DecoderMLP) -> Tuple[bytes, bytes]:
    """(configuration, poids float32 précédés de leur nombre)."""
    header = struct.pack(MLP_FORMAT, int(mlp.view_dependent), mlp.hidden)
    weights = mlp_to_array(mlp)
    return header, struct.pack("<I", weights.size) + weights.astype("<f4").tobytes()


def mlp_to_array(mlp: DecoderMLP) -> np.ndarray:
    with torch.no_grad():
        return np.concatenate(
            [p.detach().to(torch.float32).reshape(-1).numpy() for p in mlp.flat_parameters()]
        ).astype("<f4")


def mlp_from_array(
    values: np.ndarray, appearance_channels: int, hidden: int, view_dependent: bool
) -> DecoderMLP:
    mlp = DecoderMLP(appearance_channels, hidden, view_dependent, dtype=torch.float32)
    expected = sum(p.numel() for p in mlp.flat_parameters())
    if values.size != expected:
        raise ValueError(f"{values.size} poids pour un MLP qui en attend {expected}")
    offset = 0
    with torch.no_grad():
        for param in mlp.flat_parameters():
            n = param.numel()
            param.copy_(torch.from_numpy(values[offset : offset + n].astype(np.float32)).reshape(param.shape))
            offset += n
    return mlp


def unpack_mlp(reader: ByteReader, appearance_channels: int) -> DecoderMLP:
    view_dependent, hidden = reader.unpack(MLP_FORMAT)
    (count,) = reader.unpack("<I")
    values = reader.array("<f4", count)
    return mlp_from_array(values, appearance_channels, hidden, bool(view_dependent))


def save_checkpoint(
    path,
    grid: FeatureGrid,
    mlp: DecoderMLP,
    entropy: Optional[EntropyModel] = None,
    rate_domain: str = "frequency",
) -> Path:
    """
    Format : signature "ECKP", version u8, GridConfig, domaine du débit u8,
    composantes float32 little-endian dans l'ordre déclaré, MLP, puis un
    drapeau u8 et les paramètres des CDF du modèle d'entropie s'il est présent.
    Le fichier se termine par le CRC-32 de tout ce qui précède.
    """
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<B", CHECKPOINT_VERSION),
        pack_grid_config(grid.config),
        struct.pack("<B", RATE_DOMAINS.index(rate_domain)),
    ]
    with torch.no_grad():
        for name, component in grid.components().items():
            chunks.append(component.detach().to(torch.float32).numpy().astype("<f4").tobytes())
    chunks.extend(pack_mlp(mlp))
    chunks.append(struct.pack("<B", int(entropy is not None)))
    if entropy is not None:
        with torch.no_grad():
            for name in COMPONENT_NAMES:
                params = cdf_parameters(entropy.cdfs[name])
                chunks.append(struct.pack("<HB", entropy.channels(name), len(params)))
                for tensor in params:
                    chunks.append(tensor.detach().to(torch.float32).numpy().astype("<f4").tobytes())

    body = b"".join(chunks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    return path


def load_checkpoint(path) -> Tuple[FeatureGrid, DecoderMLP, Optional[EntropyModel], str]:
    """Relit un point de contrôle ; toute incohérence lève CheckpointError."""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise ConfigurationError(ERR_CHECKPOINT.format(f"fichier introuvable {path}"))
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(ERR_BAD_MAGIC.format(data[:4], CHECKPOINT_MAGIC))
    if len(data) < 9:
        raise CheckpointError(ERR_TRUNCATED.format(9, 0, len(data)))
    body, (stored,) = data[:-4], struct.unpack("<I", data[-4:])
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if actual != stored:
        raise CheckpointError(ERR_CHECKSUM.format(actual, stored))

    reader = ByteReader(body, error=CheckpointError)
    try:
        reader.read(4)
        (version,) = reader.unpack("<B")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(ERR_BAD_VERSION.format(version))
        config = unpack_grid_config(reader)
        (domain,) = reader.unpack("<B")
        if domain >= len(RATE_DOMAINS):
            raise CheckpointError(ERR_CHECKPOINT.format(f"domaine {domain}"))

        grid = FeatureGrid(config, torch.float32)
        components = {}
        for name in COMPONENT_NAMES:
            shape = config.component_shape(name)
            values = reader.array("<f4", int(np.prod(shape))).reshape(shape)
            components[name] = torch.from_numpy(values)
        grid.load_components(components)
        mlp = unpack_mlp(reader, config.appearance_channels)

        (has_entropy,) = reader.unpack("<B")
        entropy = None
        if has_entropy:
            entropy = entropy_new(config)
            with torch.no_grad():
                for name in COMPONENT_NAMES:
                    params = cdf_parameters(entropy.cdfs[name])
                    channels, count = reader.unpack("<HB")
                    if (channels, count) != (entropy.channels(name), len(params)):
                        raise CheckpointError(ERR_CHECKPOINT.format(f"modèle d'entropie {name}"))
                    for tensor in params:
                        values = reader.array("<f4", tensor.numel()).reshape(tuple(tensor.shape))
                        tensor.copy_(torch.from_numpy(values))
        if reader.remaining:
            raise CheckpointError(ERR_CHECKPOINT.format(f"{reader.remaining} octets en trop"))
    except (ConfigurationError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(ERR_CHECKPOINT.format(e))
    return grid, mlp, entropy, RATE_DOMAINS[domain]


def with_bounding_box(config: RunConfig, bounding_box) -> RunConfig:
    """Copie de la configuration avec la boîte englobante de la scène."""
    box = tuple(tuple(float(v) for v in corner) for corner in bounding_box)
    return replace(config, grid=replace(config.grid, bounding_box=box))
