"""
Module du codec de la grille.
- Quantification entière des coefficients DCT (pas 1, écrêtage sur 8 bits signés)
- Codeur de plage 32 bits sans retenue contre des tables de fréquences gelées
- Flux binaire : en-tête, tables par canal (écarts successifs zigzag + LEB128),
  poids du MLP, charges utiles, CRC-32
"""

import logging
import struct
import zlib
from bisect import bisect_right
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import torch

from src.constants import *
from src.entropy import EntropyModel, freeze_tables, round_half_away
from src.grid import FeatureGrid
from src.helpers_serialize import (
    ByteReader,
    mlp_from_array,
    mlp_to_array,
    pack_deltas,
    pack_grid_config,
    unpack_grid_config,
    MLP_FORMAT,
)
from src.model import (
    BadMagicError,
    BlockDims,
    ChecksumError,
    CoefficientTensor,
    ConfigurationError,
    ContractError,
    CorruptPayloadError,
    FrequencyTable,
    GridConfig,
    QuantizedCoefficients,
    SizeReport,
    TruncatedStreamError,
    UnsupportedVersionError,
)
from src.renderer import DecoderMLP
from src.transform import coding_blocks, dct_forward, grid_from_coefficients

logger = logging.getLogger(__name__)

MASK = (1 << 32) - 1
TOP = 1 << 24
BOT = 1 << 16


def quantize_coeffs(coeffs: Dict[str, CoefficientTensor]) -> QuantizedCoefficients:
    """Arrondi demi-entier loin de zéro puis écrêtage dans [-127, 127] ; l'écrêtage est compté."""
    symbols, support, block_dims = {}, {}, {}
    saturation = 0
    for name, coeff in coeffs.items():
        rounded = round_half_away(coeff.values.detach().to(torch.float64)).numpy()
        saturation += int(((rounded < SYMBOL_MIN) | (rounded > SYMBOL_MAX)).sum())
        quantized = np.clip(rounded, SYMBOL_MIN, SYMBOL_MAX).astype(np.int16)
        symbols[name] = quantized
        rows = quantized.reshape(quantized.shape[0], -1) if quantized.ndim > 1 else quantized.reshape(1, -1)
        support[name] = np.stack((rows.min(1), rows.max(1)), -1).astype(np.int64)
        block_dims[name] = coeff.block_dims
    if saturation:
        logger.warning("Quantification : %d coefficients écrêtés à ±%d", saturation, SYMBOL_MAX)
    return QuantizedCoefficients(symbols, saturation, support, block_dims)


def dequantize(quantized: QuantizedCoefficients) -> Dict[str, CoefficientTensor]:
    """Identité sur les entiers."""
    return {
        name: CoefficientTensor(
            torch.from_numpy(symbols.astype(np.float64)),
            quantized.block_dims.get(name, BlockDims.ones(max(symbols.ndim, 1))),
            name,
        )
        for name, symbols in quantized.symbols.items()
    }


class RangeEncoder:
    """Codeur de plage sans retenue (TOP = 2^24, BOT = 2^16), total de fréquences 2^16."""

    def __init__(self, precision: int = TABLE_PRECISION):
        self.precision = precision
        self.low = 0
        self.range = MASK
        self.out = bytearray()

    def encode(self, cum_freq: int, freq: int) -> None:
        r = self.range >> self.precision
        self.low += cum_freq * r
        self.range = freq * r
        self._normalize()

    def _normalize(self) -> None:
        while True:
            if (self.low ^ (self.low + self.range)) < TOP:
                pass
            elif self.range < BOT:
                self.range = -self.low & (BOT - 1)
            else:
                break
            self.out.append((self.low >> 24) & 0xFF)
            self.range = (self.range << 8) & MASK
            self.low = (self.low << 8) & MASK

    def finish(self) -> bytes:
        for _ in range(4):
            self.out.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & MASK
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes, precision: int = TABLE_PRECISION):
        self.data = data
        self.pos = 0
        self.precision = precision
        self.low = 0
        self.range = MASK
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._read_byte()

    def _read_byte(self) -> int:
        if self.pos >= len(self.data):
            raise TruncatedStreamError(ERR_TRUNCATED.format(1, self.pos, 0))
        byte = self.data[self.pos]
        self.pos += 1
        return byte

    def decode(self, cumulative: List[int]) -> int:
        """Indice du symbole dont l'intervalle cumulé contient la valeur lue."""
        r = self.range >> self.precision
        value = (self.code - self.low) // r
        if value < 0 or value >= (1 << self.precision):
            raise CorruptPayloadError(ERR_CORRUPT_PAYLOAD.format(f"valeur {value} à l'octet {self.pos}"))
        index = bisect_right(cumulative, value) - 1
        self.low += cumulative[index] * r
        self.range = (cumulative[index + 1] - cumulative[index]) * r
        self._normalize()
        return index

    def _normalize(self) -> None:
        while True:
            if (self.low ^ (self.low + self.range)) < TOP:
                pass
            elif self.range < BOT:
                self.range = -self.low & (BOT - 1)
            else:
                break
            self.code = ((self.code << 8) | self._read_byte()) & MASK
            self.range = (self.range << 8) & MASK
            self.low = (self.low << 8) & MASK


def _segments(tables: Union[FrequencyTable, Sequence[FrequencyTable]], rows: int):
    if isinstance(tables, FrequencyTable):
        return [tables] * rows
    tables = list(tables)
    if len(tables) != rows:
        raise ContractError(ERR_SHAPE_MISMATCH.format(len(tables), rows))
    return tables


def _single_symbol(tables: Sequence[FrequencyTable]) -> bool:
    return all(len(table) == 1 for table in tables)


def range_encode(symbols, tables: Union[FrequencyTable, Sequence[FrequencyTable]]) -> bytes:
    """
    Symboles 1D codés avec une seule table, ou 2D (lignes, n) avec une table
    par ligne, dans l'ordre ligne par ligne. Une ligne dont la table n'a qu'un
    symbole ne coûte rien ; si c'est le cas de toutes, la charge utile est vide.
    """
    symbols = np.asarray(symbols, dtype=np.int64)
    rows = symbols.reshape(1, -1) if isinstance(tables, FrequencyTable) else symbols.reshape(len(tables), -1)
    segments = _segments(tables, rows.shape[0])
    encoder = RangeEncoder()
    for table, row in zip(segments, rows):
        if table.total != 1 << TABLE_PRECISION:
            raise ContractError(ERR_TABLE_OVERFLOW.format(len(table), table.total))
        cumulative = table.cumulative.tolist()
        freqs = table.freqs.tolist()
        k_min, k_max = table.k_min, table.k_max
        for symbol in row.tolist():
            if symbol < k_min or symbol > k_max:
                raise ContractError(ERR_SYMBOL_OUTSIDE.format(symbol, k_min, k_max))
            if k_min == k_max:
                continue
            index = symbol - k_min
            encoder.encode(cumulative[index], freqs[index])
    if _single_symbol(segments):
        return b""
    return encoder.finish()


def range_decode(
    data: bytes,
    tables: Union[FrequencyTable, Sequence[FrequencyTable]],
    count: Union[int, Tuple[int, int]],
) -> np.ndarray:
    """Inverse de range_encode ; count vaut n (table unique) ou (lignes, n)."""
    if isinstance(tables, FrequencyTable):
        rows, n = 1, int(count)
    else:
        rows, n = (len(tables), int(count)) if np.isscalar(count) else tuple(int(c) for c in count)
    segments = _segments(tables, rows)
    decoder = None if _single_symbol(segments) else RangeDecoder(data)
    out = np.empty((rows, n), dtype=np.int64)
    for r, table in enumerate(segments):
        if len(table) == 1:
            out[r] = table.k_min
            continue
        cumulative = table.cumulative.tolist()
        for i in range(n):
            out[r, i] = decoder.decode(cumulative) + table.k_min
    return out.reshape(-1) if isinstance(tables, FrequencyTable) else out


def cross_entropy_bits(symbols, tables: Union[FrequencyTable, Sequence[FrequencyTable]]) -> float:
    """Σ −log2(f_k / 2^16) des symboles sous les tables gelées."""
    symbols = np.asarray(symbols, dtype=np.int64)
    rows = symbols.reshape(1, -1) if isinstance(tables, FrequencyTable) else symbols.reshape(len(tables), -1)
    bits = 0.0
    for table, row in zip(_segments(tables, rows.shape[0]), rows):
        freqs = table.freqs[row - table.k_min].astype(np.float64)
        bits += float(-np.log2(freqs / table.total).sum())
    return bits


@dataclass
class Bitstream:
    """Modèle compressé : en-tête, tables, poids bruts du MLP, charges utiles par composante."""

    grid_config: GridConfig
    block_dims: Dict[str, BlockDims]
    tables: Dict[str, List[FrequencyTable]]
    mlp_weights: np.ndarray  # float32
    view_dependent: bool
    hidden: int
    payloads: Dict[str, bytes]
    saturation: int = 0

    def to_bytes(self) -> bytes:
        chunks = [
            BITSTREAM_MAGIC,
            struct.pack("<B", BITSTREAM_VERSION),
            pack_grid_config(self.grid_config),
            struct.pack(MLP_FORMAT, int(self.view_dependent), self.hidden),
        ]
        for name in COMPONENT_NAMES:
            dims = self.block_dims[name].dims
            chunks.append(struct.pack(f"<B{len(dims)}H", len(dims), *dims))
            for table in self.tables[name]:
                chunks.append(struct.pack("<hh", table.k_min, table.k_max))
                chunks.append(pack_deltas(table.freqs))
        chunks.append(struct.pack("<I", self.mlp_weights.size))
        chunks.append(self.mlp_weights.astype("<f4").tobytes())
        for name in COMPONENT_NAMES:
            chunks.append(struct.pack("<I", len(self.payloads[name])))
            chunks.append(self.payloads[name])
        body = b"".join(chunks)
        return body + struct.pack("<I", zlib.crc32(body) & MASK)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        data = bytes(data)
        if len(data) < 4 or data[:4] != BITSTREAM_MAGIC:
            raise BadMagicError(ERR_BAD_MAGIC.format(data[:4], BITSTREAM_MAGIC))
        if len(data) < 9:
            raise TruncatedStreamError(ERR_TRUNCATED.format(9, 0, len(data)))
        if data[4] != BITSTREAM_VERSION:
            raise UnsupportedVersionError(ERR_BAD_VERSION.format(data[4]))
        body, (stored,) = data[:-4], struct.unpack("<I", data[-4:])
        actual = zlib.crc32(body) & MASK
        if actual != stored:
            raise ChecksumError(ERR_CHECKSUM.format(actual, stored))

        reader = ByteReader(body)
        reader.read(5)
        try:
            config = unpack_grid_config(reader)
        except ConfigurationError as e:
            raise CorruptPayloadError(ERR_CORRUPT_PAYLOAD.format(e))
        view_dependent, hidden = reader.unpack(MLP_FORMAT)
        block_dims, tables = {}, {}
        for name in COMPONENT_NAMES:
            (ndim,) = reader.unpack("<B")
            dims = reader.unpack(f"<{ndim}H")
            block_dims[name] = BlockDims(dims)
            channel_tables = []
            for _ in range(config.component_shape(name)[0]):
                k_min, k_max = reader.unpack("<hh")
                if k_max < k_min:
                    raise CorruptPayloadError(ERR_CORRUPT_PAYLOAD.format(f"support [{k_min}, {k_max}]"))
                table = FrequencyTable(k_min, k_max, reader.deltas(k_max - k_min + 1))
                if table.total != 1 << TABLE_PRECISION or table.freqs.min() < 1:
                    raise CorruptPayloadError(ERR_CORRUPT_PAYLOAD.format(f"table [{k_min}, {k_max}]"))
                channel_tables.append(table)
            tables[name] = channel_tables
        (count,) = reader.unpack("<I")
        weights = reader.array("<f4", count)
        payloads = {}
        for name in COMPONENT_NAMES:
            (length,) = reader.unpack("<I")
            payloads[name] = reader.read(length)
        if reader.remaining:
            raise CorruptPayloadError(ERR_CORRUPT_PAYLOAD.format(f"{reader.remaining} octets en trop"))
        return cls(config, block_dims, tables, weights, bool(view_dependent), hidden, payloads)

    @property
    def rate_domain(self) -> str:
        """Domaine de codage déduit des blocs : tous de taille 1 → spatial."""
        if all(dims.size == 1 for dims in self.block_dims.values()):
            return "spatial"
        return "frequency"

    def size_report(self) -> SizeReport:
        total = len(self.to_bytes())
        mlp_bytes = 4 * self.mlp_weights.size
        payload_bytes = sum(len(p) for p in self.payloads.values())
        symbol_count = sum(int(np.prod(self.grid_config.component_shape(n))) for n in COMPONENT_NAMES)
        return SizeReport(
            header_bytes=total - mlp_bytes - payload_bytes,
            mlp_bytes=mlp_bytes,
            payload_bytes=payload_bytes,
            total_bytes=total,
            symbol_count=symbol_count,
            saturation=self.saturation,
        )


def model_coefficients(grid: FeatureGrid, rate_domain: str = "frequency") -> Dict[str, CoefficientTensor]:
    """Coefficients en float64, en pas de quantification."""
    step = grid.config.coeff_step
    with torch.no_grad():
        return {
            name: dct_forward(
                component.detach().to(torch.float64) / step,
                coding_blocks(grid.config, name, rate_domain),
                name,
            )
            for name, component in grid.components().items()
        }


def components_from_symbols(
    symbols: Dict[str, np.ndarray], block_dims: Dict[str, BlockDims], config: GridConfig
) -> FeatureGrid:
    """Chemin de reconstruction unique, partagé par le décodage et le modèle quantifié en mémoire."""
    coeffs = {
        name: CoefficientTensor(
            torch.from_numpy(symbols[name].astype(np.float64)), block_dims[name], name
        )
        for name in COMPONENT_NAMES
    }
    components = grid_from_coefficients(coeffs, config.coeff_step)
    return FeatureGrid(config, torch.float32).load_components(
        {name: value.to(torch.float32) for name, value in components.items()}
    )


def quantized_model(
    grid: FeatureGrid, mlp: DecoderMLP, rate_domain: str = "frequency"
) -> Tuple[FeatureGrid, DecoderMLP]:
    """Modèle en mémoire après quantification, sans passer par le codeur."""
    quantized = quantize_coeffs(model_coefficients(grid, rate_domain))
    decoded = components_from_symbols(quantized.symbols, quantized.block_dims, grid.config)
    weights = mlp_to_array(mlp)
    return decoded, mlp_from_array(weights, grid.config.appearance_channels, mlp.hidden, mlp.view_dependent)


def encode(
    grid: FeatureGrid,
    mlp: DecoderMLP,
    entropy_model: EntropyModel,
    rate_domain: str = "frequency",
) -> Bitstream:
    """DCT, quantification, tables gelées sur le support observé, codage par composante."""
    quantized = quantize_coeffs(model_coefficients(grid, rate_domain))
    tables = freeze_tables(entropy_model, quantized.support)
    payloads = {}
    for name in COMPONENT_NAMES:
        symbols = quantized.symbols[name]
        payloads[name] = range_encode(symbols.reshape(symbols.shape[0], -1), tables[name])
    bitstream = Bitstream(
        grid_config=grid.config,
        block_dims=quantized.block_dims,
        tables=tables,
        mlp_weights=mlp_to_array(mlp),
        view_dependent=mlp.view_dependent,
        hidden=mlp.hidden,
        payloads=payloads,
        saturation=quantized.saturation,
    )
    report = bitstream.size_report()
    logger.info(
        "Flux : %d octets (en-tête %d, MLP %d, charge utile %d) pour %d symboles",
        report.total_bytes,
        report.header_bytes,
        report.mlp_bytes,
        report.payload_bytes,
        report.symbol_count,
    )
    return bitstream


def decode_symbols(bitstream: Bitstream) -> Dict[str, np.ndarray]:
    config = bitstream.grid_config
    symbols = {}
    for name in COMPONENT_NAMES:
        shape = config.component_shape(name)
        rows = shape[0]
        n = int(np.prod(shape[1:]))
        decoded = range_decode(bitstream.payloads[name], bitstream.tables[name], (rows, n))
        symbols[name] = decoded.reshape(shape)
    return symbols


def decode(bitstream: Union[Bitstream, bytes]) -> Tuple[FeatureGrid, DecoderMLP]:
    """Décodage complet ; aucune grille partielle n'est renvoyée en cas d'erreur."""
    if not isinstance(bitstream, Bitstream):
        bitstream = Bitstream.from_bytes(bitstream)
    config = bitstream.grid_config
    symbols = decode_symbols(bitstream)
    grid = components_from_symbols(symbols, bitstream.block_dims, config)
    try:
        mlp = mlp_from_array(
            bitstream.mlp_weights, config.appearance_channels, bitstream.hidden, bitstream.view_dependent
        )
    except ValueError as e:
        raise CorruptPayloadError(ERR_CORRUPT_PAYLOAD.format(e))
    return grid, mlp


def write_bitstream(bitstream: Bitstream, path) -> int:
    data = bitstream.to_bytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return len(data)


def read_bitstream(path) -> Bitstream:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise ConfigurationError(ERR_CHECKPOINT.format(f"fichier introuvable {path}"))
    return Bitstream.from_bytes(data)
