import json

import pytest
import torch

from src.constants import COMPONENT_NAMES
from src.entropy import entropy_new
from src.grid import grid_new
from src.helpers_files import load_json_config, load_yaml_config, merge_config
from src.helpers_serialize import (
    deserialize_run_config,
    load_checkpoint,
    load_run_config,
    save_checkpoint,
    save_run_config,
    serialize_run_config,
    with_bounding_box,
)
from src.main import DEFAULT_CONFIG
from src.model import BlockDims, CheckpointError, ConfigurationError, LossConfig, RunConfig
from src.renderer import decoder_new


class TestRunConfig:
    def test_default_yaml(self):
        config = deserialize_run_config(load_yaml_config(str(DEFAULT_CONFIG)))
        assert config.grid.resolution == (64, 64, 64)
        assert config.grid.matrix_block == BlockDims((16, 16, 16))
        assert config.grid.vector_block == BlockDims((8, 8))
        assert config.grid.coeff_step == 1.0
        assert config.sweep.lambdas == (2e-11, 2e-10, 2e-9)
        assert config.sweep.calibration_ratios == (0.01, 0.1, 1.0)
        assert config.loss.lambda_e == pytest.approx(2e-10)
        assert config.loss.entropy_start == 2667
        assert config.render.stratified is True
        assert config.scene == "blobs3"

    def test_json_round_trip(self, tmp_path):
        config = deserialize_run_config(load_yaml_config(str(DEFAULT_CONFIG)))
        path = save_run_config(config, tmp_path / "run_config.json")
        assert load_run_config(path) == config
        data = json.loads(path.read_text(encoding="utf-8"))
        assert data["blocks"]["matrix"] == "16x16x16"
        assert data["loss"]["iterations"] == 5000

    def test_missing_sections_keep_defaults(self):
        config = deserialize_run_config({"loss": {"lambda_e": 1e-9}})
        assert config.loss.lambda_e == 1e-9
        assert config.grid == RunConfig().grid

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError):
            deserialize_run_config({"grid": {"colour": 3}})

    def test_invalid_values(self):
        with pytest.raises(ConfigurationError):
            deserialize_run_config({"loss": {"lambda_e": -1.0}})
        with pytest.raises(ConfigurationError):
            deserialize_run_config({"loss": {"rate_domain": "wavelet"}})
        with pytest.raises(ConfigurationError):
            LossConfig(entropy_start_fraction=1.0)
        with pytest.raises(ConfigurationError):
            deserialize_run_config({"sweep": {"calibration_ratios": [0.1, 0.0]}})
        with pytest.raises(ConfigurationError):
            deserialize_run_config({"sweep": {"lambdas": [-1e-9]}})

    def test_serialized_structure(self):
        data = serialize_run_config(RunConfig())
        assert set(data) >= {"grid", "blocks", "loss", "training", "renderer", "scene", "seed"}

    def test_precedence(self, tmp_path):
        path = tmp_path / "override.json"
        path.write_text(json.dumps({"loss": {"lambda_e": 1e-8, "alpha": 0.5}}), encoding="utf-8")
        data = merge_config(load_yaml_config(str(DEFAULT_CONFIG)), load_json_config(str(path)))
        data = merge_config(data, {"loss": {"alpha": 2.0, "iterations": None}})
        config = deserialize_run_config(data)
        assert config.loss.lambda_e == 1e-8
        assert config.loss.alpha == 2.0
        assert config.loss.total_iters == 5000

    def test_missing_json_config(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_json_config(str(tmp_path / "absent.json"))

    def test_with_bounding_box(self):
        config = with_bounding_box(RunConfig(), [[-2, -1, -1], [2, 1, 1]])
        assert config.grid.bounding_box == ((-2.0, -1.0, -1.0), (2.0, 1.0, 1.0))


class TestCheckpoint:
    def test_round_trip(self, small_config, tmp_path):
        grid = grid_new(small_config, seed=0)
        mlp = decoder_new(4, seed=1)
        entropy = entropy_new(small_config)
        with torch.no_grad():
            for name, param in entropy.cdfs["density_line_x"].named_parameters():
                if "bias" in name:
                    param.fill_(0.25)
        path = save_checkpoint(tmp_path / "model.ckpt", grid, mlp, entropy, "spatial")
        grid2, mlp2, entropy2, domain = load_checkpoint(path)
        assert domain == "spatial"
        assert grid2.config == grid.config
        for name in COMPONENT_NAMES:
            assert torch.equal(grid2.params[name], grid.params[name])
        for a, b in zip(mlp2.flat_parameters(), mlp.flat_parameters()):
            assert torch.equal(a, b)
        for a, b in zip(entropy2.parameters(), entropy.parameters()):
            assert torch.equal(a, b)

    def test_same_model_same_bytes(self, small_config, tmp_path):
        grid = grid_new(small_config, seed=0)
        mlp = decoder_new(4, seed=1)
        a = save_checkpoint(tmp_path / "a.ckpt", grid, mlp).read_bytes()
        b = save_checkpoint(tmp_path / "b.ckpt", grid, mlp).read_bytes()
        assert a == b

    def test_without_entropy_model(self, small_config, tmp_path):
        path = save_checkpoint(tmp_path / "m.ckpt", grid_new(small_config, 0), decoder_new(4, 1))
        _, _, entropy, domain = load_checkpoint(path)
        assert entropy is None
        assert domain == "frequency"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + bytes(100))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated(self, small_config, tmp_path):
        path = save_checkpoint(tmp_path / "m.ckpt", grid_new(small_config, 0), decoder_new(4, 1))
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 7])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_flipped_byte_fails_checksum(self, small_config, tmp_path):
        grid = grid_new(small_config, seed=0)
        path = save_checkpoint(tmp_path / "m.ckpt", grid, decoder_new(4, 1), entropy_new(small_config))
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0x01
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="Somme de contrôle"):
            load_checkpoint(path)

    def test_trailing_bytes(self, small_config, tmp_path):
        path = save_checkpoint(tmp_path / "m.ckpt", grid_new(small_config, 0), decoder_new(4, 1))
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_checkpoint(tmp_path / "absent.ckpt")
