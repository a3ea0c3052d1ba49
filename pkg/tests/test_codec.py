import numpy as np
import pytest
import torch

from src.codec import (
    Bitstream,
    cross_entropy_bits,
    decode,
    dequantize,
    encode,
    model_coefficients,
    quantize_coeffs,
    quantized_model,
    range_decode,
    range_encode,
    read_bitstream,
    write_bitstream,
)
from src.constants import COMPONENT_NAMES
from src.entropy import entropy_new, quantize_pmf
from src.grid import grid_new
from src.helpers_serialize import ByteReader, pack_deltas
from src.model import (
    BadMagicError,
    BitstreamError,
    BlockDims,
    CoefficientTensor,
    ContractError,
    FrequencyTable,
    GridConfig,
    RenderConfig,
    TruncatedStreamError,
    UnsupportedVersionError,
)
from src.renderer import decoder_new, look_at, render_image


def random_table(rng, k_min, k_max):
    pmf = rng.dirichlet(np.ones(k_max - k_min + 1) * 0.5)
    return FrequencyTable(k_min, k_max, quantize_pmf(pmf)), pmf


@pytest.fixture
def small_model(small_config):
    config = GridConfig(**{**small_config.__dict__, "init_scale": 1.0})
    grid = grid_new(config, seed=0)
    mlp = decoder_new(config.appearance_channels, seed=1)
    entropy = entropy_new(config)
    return grid, mlp, entropy


class TestQuantize:
    def test_rounding_and_clamp(self):
        values = torch.tensor([[0.4, -0.5, 1.5, 130.7, -200.0, -126.6]], dtype=torch.float64)
        quantized = quantize_coeffs({"a": CoefficientTensor(values, BlockDims((1, 1)), "a")})
        assert quantized.symbols["a"].tolist() == [[0, -1, 2, 127, -127, -127]]
        assert quantized.saturation == 2
        assert quantized.support["a"].tolist() == [[-127, 127]]

    def test_error_bound(self):
        values = torch.tensor(np.random.default_rng(0).uniform(-127.5, 127.5, size=(4, 256)))
        quantized = quantize_coeffs({"a": CoefficientTensor(values, BlockDims((1, 1)), "a")})
        restored = dequantize(quantized)["a"].values
        assert (restored - values).abs().max().item() <= 0.5
        assert quantized.saturation == 0

    def test_support_per_channel(self):
        values = torch.tensor([[-3.0, 2.0], [0.0, 0.2], [5.0, 9.0]], dtype=torch.float64)
        quantized = quantize_coeffs({"a": CoefficientTensor(values, BlockDims((1, 1)), "a")})
        assert quantized.support["a"].tolist() == [[-3, 2], [0, 0], [5, 9]]


class TestRangeCoder:
    def test_round_trip(self):
        rng = np.random.default_rng(42)
        table, pmf = random_table(rng, -10, 10)
        symbols = rng.choice(np.arange(-10, 11), size=10_000, p=pmf)
        data = range_encode(symbols, table)
        assert np.array_equal(range_decode(data, table, len(symbols)), symbols)

    def test_round_trip_one_table_per_row(self):
        rng = np.random.default_rng(1)
        tables, rows = [], []
        for r in range(5):
            k_min = int(rng.integers(-20, 0))
            k_max = k_min + int(rng.integers(0, 30))
            table, pmf = random_table(rng, k_min, k_max)
            tables.append(table)
            rows.append(rng.choice(np.arange(k_min, k_max + 1), size=300, p=pmf))
        symbols = np.stack(rows)
        decoded = range_decode(range_encode(symbols, tables), tables, symbols.shape)
        assert np.array_equal(decoded, symbols)

    @pytest.mark.slow
    def test_round_trip_many_tables(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            k_min = int(rng.integers(-127, 0))
            k_max = int(rng.integers(0, 128))
            table, pmf = random_table(rng, k_min, k_max)
            symbols = rng.choice(np.arange(k_min, k_max + 1), size=100_000, p=pmf)
            assert np.array_equal(range_decode(range_encode(symbols, table), table, len(symbols)), symbols)

    def test_single_symbol_alphabet(self):
        table = FrequencyTable(3, 3, np.array([65536]))
        data = range_encode(np.full(1000, 3), table)
        assert data == b""
        assert range_decode(data, table, 1000).tolist() == [3] * 1000

    def test_single_symbol_rows_cost_nothing(self):
        rng = np.random.default_rng(8)
        table, pmf = random_table(rng, -4, 4)
        symbols = rng.choice(np.arange(-4, 5), size=500, p=pmf)
        alone = range_encode(symbols, table)
        constant = FrequencyTable(0, 0, np.array([65536]))
        rows = np.stack((np.zeros(500, dtype=np.int64), symbols, np.zeros(500, dtype=np.int64)))
        mixed = range_encode(rows, [constant, table, constant])
        assert mixed == alone
        assert np.array_equal(range_decode(mixed, [constant, table, constant], rows.shape), rows)

    def test_uniform_alphabet_costs_eight_bits(self):
        table = FrequencyTable(0, 255, np.full(256, 256))
        symbols = np.random.default_rng(3).integers(0, 256, size=1000)
        data = range_encode(symbols, table)
        assert 1000 <= len(data) <= 1010

    def test_close_to_cross_entropy(self):
        rng = np.random.default_rng(5)
        table, pmf = random_table(rng, -30, 30)
        symbols = rng.choice(np.arange(-30, 31), size=20_000, p=pmf)
        data = range_encode(symbols, table)
        assert 8 * len(data) <= 1.02 * cross_entropy_bits(symbols, table) + 64

    def test_symbol_outside_support(self):
        table = FrequencyTable(-1, 1, quantize_pmf(np.full(3, 1 / 3)))
        with pytest.raises(ContractError):
            range_encode(np.array([0, 2]), table)

    def test_empty_payload(self):
        table = FrequencyTable(-1, 1, quantize_pmf(np.full(3, 1 / 3)))
        with pytest.raises(TruncatedStreamError):
            range_decode(b"", table, 5)


class TestBitstream:
    def test_decode_matches_quantized_model(self, small_model):
        grid, mlp, entropy = small_model
        decoded_grid, decoded_mlp = decode(encode(grid, mlp, entropy).to_bytes())
        expected_grid, expected_mlp = quantized_model(grid, mlp)
        for name in COMPONENT_NAMES:
            assert torch.equal(decoded_grid.params[name], expected_grid.params[name])
        for a, b in zip(decoded_mlp.flat_parameters(), expected_mlp.flat_parameters()):
            assert torch.equal(a, b)

    def test_renders_are_identical(self, small_model):
        grid, mlp, entropy = small_model
        decoded = decode(encode(grid, mlp, entropy).to_bytes())
        expected = quantized_model(grid, mlp)
        camera = look_at((3.0, 0.5, 0.5), (0.0, 0.0, 0.0), 6.0, 6, 6, near=0.5, far=6.0)
        config = RenderConfig(n_samples=16)
        assert torch.equal(render_image(*decoded, camera, config), render_image(*expected, camera, config))

    def test_encode_is_a_fixpoint(self, small_model):
        grid, mlp, entropy = small_model
        first = encode(grid, mlp, entropy).to_bytes()
        decoded_grid, decoded_mlp = decode(first)
        assert encode(decoded_grid, decoded_mlp, entropy).to_bytes() == first

    def test_spatial_domain_round_trip(self, small_model):
        grid, mlp, entropy = small_model
        bitstream = encode(grid, mlp, entropy, "spatial")
        assert bitstream.block_dims["density_plane_xy"] == BlockDims((1, 1, 1))
        assert bitstream.rate_domain == "spatial"
        assert Bitstream.from_bytes(bitstream.to_bytes()).rate_domain == "spatial"
        assert encode(grid, mlp, entropy).rate_domain == "frequency"
        decoded_grid, _ = decode(bitstream.to_bytes())
        expected_grid, _ = quantized_model(grid, mlp, "spatial")
        for name in COMPONENT_NAMES:
            assert torch.equal(decoded_grid.params[name], expected_grid.params[name])

    def test_size_report(self, small_model, tmp_path):
        grid, mlp, entropy = small_model
        bitstream = encode(grid, mlp, entropy)
        report = bitstream.size_report()
        path = tmp_path / "model.ecrf"
        assert write_bitstream(bitstream, path) == path.stat().st_size == report.total_bytes
        assert report.header_bytes + report.mlp_bytes + report.payload_bytes == report.total_bytes
        assert report.symbol_count == grid.parameter_count()
        assert report.mlp_bytes == 4 * sum(p.numel() for p in mlp.flat_parameters())

    def test_read_back_from_file(self, small_model, tmp_path):
        grid, mlp, entropy = small_model
        bitstream = encode(grid, mlp, entropy)
        write_bitstream(bitstream, tmp_path / "m.ecrf")
        assert read_bitstream(tmp_path / "m.ecrf").to_bytes() == bitstream.to_bytes()

    def test_payload_close_to_cross_entropy(self, small_model):
        grid, mlp, entropy = small_model
        bitstream = encode(grid, mlp, entropy)
        quantized = quantize_coeffs(model_coefficients(grid))
        for name in COMPONENT_NAMES:
            symbols = quantized.symbols[name]
            bits = cross_entropy_bits(symbols.reshape(symbols.shape[0], -1), bitstream.tables[name])
            assert 8 * len(bitstream.payloads[name]) <= 1.02 * bits + 64

    def test_bad_magic(self, small_model):
        data = bytearray(encode(*small_model).to_bytes())
        data[:4] = b"XXXX"
        with pytest.raises(BadMagicError):
            Bitstream.from_bytes(bytes(data))

    def test_unsupported_version(self, small_model):
        data = bytearray(encode(*small_model).to_bytes())
        data[4] = 99
        with pytest.raises(UnsupportedVersionError):
            Bitstream.from_bytes(bytes(data))

    def test_flipped_byte(self, small_model):
        data = bytearray(encode(*small_model).to_bytes())
        data[len(data) // 2] ^= 0x5A
        with pytest.raises(BitstreamError):
            decode(bytes(data))

    def test_truncated(self, small_model):
        data = encode(*small_model).to_bytes()
        for cut in (3, 8, len(data) // 2, len(data) - 1):
            with pytest.raises(BitstreamError):
                decode(data[:cut])


class TestDefaultStep:
    def test_default_step_is_one(self, small_model):
        grid, _, _ = small_model
        assert GridConfig().coeff_step == 1.0
        assert grid.config.coeff_step == 1.0

    def test_spatial_dequantization_is_identity_on_integers(self, small_model):
        grid, mlp, entropy = small_model
        quantized = quantize_coeffs(model_coefficients(grid, "spatial"))
        decoded_grid, _ = decode(encode(grid, mlp, entropy, "spatial").to_bytes())
        for name in COMPONENT_NAMES:
            symbols = torch.from_numpy(quantized.symbols[name].astype(np.float32))
            assert torch.equal(decoded_grid.params[name].detach(), symbols)

    def test_frequency_symbols_round_trip_at_unit_step(self, small_model):
        grid, mlp, entropy = small_model
        expected_grid, _ = quantized_model(grid, mlp)
        requantized = quantize_coeffs(model_coefficients(expected_grid))
        original = quantize_coeffs(model_coefficients(grid))
        for name in COMPONENT_NAMES:
            assert np.array_equal(requantized.symbols[name], original.symbols[name])


class TestTableEncoding:
    def test_peaked_table_is_compact(self):
        pmf = np.exp(-np.abs(np.arange(-60, 61)) / 2.0)
        table = FrequencyTable(-60, 60, quantize_pmf(pmf))
        data = pack_deltas(table.freqs)
        assert len(data) < 2 * len(table.freqs)
        assert np.array_equal(ByteReader(data).deltas(len(table.freqs)), table.freqs)

    def test_negative_steps_round_trip(self):
        values = np.array([1, 300, 70_000, 2, 1, 65_000])
        reader = ByteReader(pack_deltas(values))
        assert reader.deltas(len(values)).tolist() == values.tolist()
        assert reader.remaining == 0

    def test_truncated_varint(self):
        with pytest.raises(TruncatedStreamError):
            ByteReader(b"\x80\x80").deltas(1)

    def test_bitstream_tables_round_trip(self, small_model):
        bitstream = encode(*small_model)
        restored = Bitstream.from_bytes(bitstream.to_bytes())
        for name in COMPONENT_NAMES:
            for a, b in zip(restored.tables[name], bitstream.tables[name]):
                assert (a.k_min, a.k_max) == (b.k_min, b.k_max)
                assert np.array_equal(a.freqs, b.freqs)
