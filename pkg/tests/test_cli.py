import json

import numpy as np
import pandas as pd
import pytest

from src.constants import EXIT_BITSTREAM, EXIT_CHECKPOINT, EXIT_OK, EXIT_USAGE
from src.helpers_serialize import load_checkpoint
from src.main import main
from src.scenes import load_scene, save_scene

TINY_GRID = [
    "--resolution", "8",
    "--channels", "4",
    "--matrix-block", "4x4x4",
    "--vector-block", "4x4",
    "--batch-size", "32",
    "--n-samples", "8",
    "--no-cache",
]


@pytest.fixture
def scene_path(tiny_scene, tmp_path):
    return str(save_scene(tiny_scene, tmp_path / "tiny.json"))


class TestSceneCommands:
    def test_gen(self, tmp_path):
        target = tmp_path / "blobs3.json"
        assert main(["scene", "gen", "blobs3", "-o", str(target)]) == EXIT_OK
        assert load_scene(target).name == "blobs3"

    def test_schema(self, tmp_path):
        target = tmp_path / "schema.json"
        assert main(["scene", "schema", "-o", str(target)]) == EXIT_OK
        assert "properties" in json.loads(target.read_text(encoding="utf-8"))


class TestExitCodes:
    def test_missing_scene(self, tmp_path):
        code = main(["train", "--scene", str(tmp_path / "missing.json"), "--out", str(tmp_path)])
        assert code == EXIT_USAGE

    def test_invalid_block(self, tmp_path):
        code = main(["train", "--matrix-block", "5x5x5", "--no-cache", "--out", str(tmp_path)])
        assert code == EXIT_USAGE

    def test_bad_bitstream(self, tmp_path):
        path = tmp_path / "garbage.ecrf"
        path.write_bytes(b"not a bitstream")
        assert main(["decompress", str(path)]) == EXIT_BITSTREAM

    def test_bad_checkpoint(self, tmp_path):
        path = tmp_path / "garbage.ckpt"
        path.write_bytes(b"not a checkpoint")
        assert main(["compress", str(path), "--no-cache"]) == EXIT_CHECKPOINT

    def test_missing_model(self, tmp_path, scene_path):
        code = main(["eval", str(tmp_path / "absent.ckpt"), "--scene", scene_path, "--no-cache", "--out", str(tmp_path)])
        assert code == EXIT_USAGE


class TestPipeline:
    def test_oracle_eval_hits_the_cap(self, tmp_path, scene_path):
        assert main(["eval", "oracle", "--scene", scene_path, "--no-cache", "--out", str(tmp_path)]) == EXIT_OK
        df = pd.read_csv(tmp_path / "eval.csv")
        assert (df["psnr"] == 99.0).all()

    def test_train_compress_decompress(self, tmp_path, scene_path):
        out = tmp_path / "run"
        args = ["--scene", scene_path, "--iterations", "20", *TINY_GRID]
        assert main(["train", *args, "--out", str(out)]) == EXIT_OK
        checkpoint = out / "model.ckpt"
        assert checkpoint.exists()
        log = pd.read_csv(out / "train_log.csv")
        assert log["iteration"].iloc[-1] == 20

        bitstream = out / "model.ecrf"
        assert main(["compress", str(checkpoint), "-o", str(bitstream), *args]) == EXIT_OK
        decompressed = out / "decoded.ckpt"
        assert main(["decompress", str(bitstream), "-o", str(decompressed)]) == EXIT_OK

        # Le modèle quantifié en mémoire et le flux décodé donnent les mêmes scores
        assert main(["eval", str(checkpoint), "--quantized", "-o", str(out / "quantized.csv"), *args]) == EXIT_OK
        assert main(["eval", str(bitstream), "-o", str(out / "decoded.csv"), *args]) == EXIT_OK
        quantized = pd.read_csv(out / "quantized.csv")
        decoded = pd.read_csv(out / "decoded.csv")
        assert np.array_equal(quantized["psnr"].to_numpy(), decoded["psnr"].to_numpy())

        renders = out / "renders"
        assert main(["render", str(bitstream), "--index", "0", "-o", str(renders / "a"), *args]) == EXIT_OK
        assert main(["render", str(decompressed), "--index", "0", "-o", str(renders / "b"), *args]) == EXIT_OK
        assert (renders / "a" / "test_000.png").read_bytes() == (renders / "b" / "test_000.png").read_bytes()

    def test_quantized_eval_uses_stored_domain(self, tmp_path, scene_path):
        out = tmp_path / "run"
        args = ["--scene", scene_path, "--iterations", "10", *TINY_GRID]
        assert main(["train", *args, "--rate-domain", "spatial", "--out", str(out)]) == EXIT_OK
        checkpoint, bitstream = out / "model.ckpt", out / "model.ecrf"
        assert main(["compress", str(checkpoint), "-o", str(bitstream), *args]) == EXIT_OK

        # Configuration par défaut (fréquentiel) : le domaine du modèle l'emporte
        assert main(["eval", str(checkpoint), "--quantized", "-o", str(out / "quantized.csv"), *args]) == EXIT_OK
        assert main(["eval", str(bitstream), "-o", str(out / "decoded.csv"), *args]) == EXIT_OK
        quantized = pd.read_csv(out / "quantized.csv")
        decoded = pd.read_csv(out / "decoded.csv")
        assert np.array_equal(quantized["psnr"].to_numpy(), decoded["psnr"].to_numpy())

        decompressed = out / "decoded.ckpt"
        assert main(["decompress", str(bitstream), "-o", str(decompressed)]) == EXIT_OK
        assert load_checkpoint(decompressed)[3] == "spatial"

    def test_render_index_out_of_range(self, tmp_path, scene_path):
        out = tmp_path / "run"
        args = ["--scene", scene_path, "--iterations", "2", *TINY_GRID]
        assert main(["train", *args, "--out", str(out)]) == EXIT_OK
        assert main(["render", str(out / "model.ckpt"), "--index", "5", *args, "--out", str(out)]) == EXIT_USAGE

    @pytest.mark.slow
    def test_rd_sweep(self, tmp_path, scene_path):
        args = ["--scene", scene_path, "--iterations", "20", *TINY_GRID, "--out", str(tmp_path)]
        assert main(["rd-sweep", "--lambdas", "0,1e-3", "--alphas", "0,1", *args]) == EXIT_OK
        df = pd.read_csv(tmp_path / "rd_sweep.csv")
        assert list(df.columns) == ["lambda_e", "alpha", "size_bytes", "psnr", "rate_bits", "saturation"]
        assert len(df) == 4
        assert df["lambda_e"].is_monotonic_increasing
        runs = pd.read_csv(tmp_path / "rd_sweep_runs.csv")
        assert (runs["status"] == "ok").all()

    @pytest.mark.slow
    def test_rd_sweep_calibrated(self, tmp_path, scene_path):
        args = ["--scene", scene_path, "--iterations", "20", *TINY_GRID, "--out", str(tmp_path)]
        assert main(["rd-sweep", "--calibrate", *args]) == EXIT_OK
        runs = pd.read_csv(tmp_path / "rd_sweep_runs.csv")
        assert (runs["status"] == "ok").all()
        lambdas = runs["lambda_e"].tolist()
        assert len(lambdas) == 4
        assert lambdas[0] == 0.0
        assert lambdas[3] / lambdas[1] == pytest.approx(100.0)

    def test_gradcheck(self, tmp_path, scene_path):
        args = ["--scene", scene_path, *TINY_GRID, "--out", str(tmp_path)]
        code = main(["gradcheck", "--samples", "4", "--rays", "2", *args])
        assert code in (0, 1)
        df = pd.read_csv(tmp_path / "gradcheck.csv")
        assert set(df["family"]) == {"grid", "mlp", "entropy"}
