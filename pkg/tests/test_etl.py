import numpy as np
import pandas as pd
import pytest
import torch

from src.etl import SceneDataLoader
from src.helpers_export import (
    append_train_log,
    export_eval_to_csv,
    export_sweep_to_csv,
    load_png,
    save_png,
    to_uint8,
)
from src.repository import ViewRepository
from src.scenes import oracle_render, scene_digest


class TestViewRepository:
    def test_save_and_get(self, tmp_path):
        repo = ViewRepository(tmp_path / "views.db")
        image = np.random.default_rng(0).uniform(size=(4, 5, 3))
        repo.save_view("abc", "train", 2, 64, image)
        assert np.array_equal(repo.get_view("abc", "train", 2, 64), image)
        assert repo.get_view("abc", "train", 2, 128) is None
        assert repo.get_view("abc", "test", 2, 64) is None

    def test_get_views_and_clear(self, tmp_path):
        repo = ViewRepository(tmp_path / "views.db")
        for i in range(3):
            repo.save_view("abc", "test", i, 64, np.full((2, 2, 3), float(i)))
        views = repo.get_views("abc", "test", 64)
        assert sorted(views) == [0, 1, 2]
        assert views[2][0, 0, 0] == 2.0
        repo.clear_scene("abc")
        assert repo.get_views("abc", "test", 64) == {}


class TestSceneDataLoader:
    def test_views_match_oracle(self, tiny_scene):
        loader = SceneDataLoader(tiny_scene)
        views = loader.fetch_views("test", n_samples=32, use_cache=False)
        expected = oracle_render(tiny_scene, loader.cameras("test")[0], n_samples=32).numpy()
        assert len(views) == 1
        assert np.array_equal(views[0], expected)

    def test_cache_is_used(self, tiny_scene, tmp_path, monkeypatch):
        repo = ViewRepository(tmp_path / "views.db")
        first = SceneDataLoader(tiny_scene, repo).fetch_views("train", n_samples=32)
        assert len(repo.get_views(scene_digest(tiny_scene), "train", 32)) == 2

        def fail(*args, **kwargs):
            raise AssertionError("rendu inattendu")

        monkeypatch.setattr("src.etl.oracle_render", fail)
        second = SceneDataLoader(tiny_scene, repo).fetch_views("train", n_samples=32)
        for a, b in zip(first, second):
            assert np.array_equal(a, b)

    def test_ray_dataset(self, tiny_scene):
        dataset = SceneDataLoader(tiny_scene).build_ray_dataset("train", n_samples=32, use_cache=False)
        assert len(dataset) == 2 * 8 * 8
        assert dataset.near == 0.5 and dataset.far == 6.0
        torch.testing.assert_close(
            dataset.directions.norm(dim=-1), torch.ones(len(dataset), dtype=torch.float64)
        )

    def test_batches_are_reproducible(self, tiny_scene):
        dataset = SceneDataLoader(tiny_scene).build_ray_dataset("train", n_samples=32, use_cache=False)
        a_rays, a_colors = dataset.sample_batch(16, torch.Generator().manual_seed(3))
        b_rays, b_colors = dataset.sample_batch(16, torch.Generator().manual_seed(3))
        assert torch.equal(a_rays.origins, b_rays.origins)
        assert torch.equal(a_colors, b_colors)
        assert a_colors.shape == (16, 3)


class TestExport:
    def test_train_log_appends(self, tmp_path):
        path = tmp_path / "train_log.csv"
        for i in (1, 2):
            append_train_log(
                {"iteration": i, "mse": 0.1 / i, "rate_bits": 0.0, "reg": 0.0, "psnr": np.nan, "seconds": i},
                path,
            )
        df = pd.read_csv(path)
        assert df["iteration"].tolist() == [1, 2]
        assert list(df.columns) == ["iteration", "mse", "rate_bits", "reg", "psnr", "seconds"]

    def test_eval_has_mean_row(self, tmp_path):
        df = export_eval_to_csv([20.0, 30.0], tmp_path / "eval.csv")
        assert df["view"].tolist() == ["0", "1", "mean"]
        assert df["psnr"].iloc[-1] == pytest.approx(25.0)

    def test_sweep_sorted(self, tmp_path):
        rows = [
            {"lambda_e": 2e-9, "alpha": 1.0, "status": "ok"},
            {"lambda_e": 0.0, "alpha": 1.0, "status": "ok"},
            {"lambda_e": 2e-9, "alpha": 0.0, "status": "ok"},
        ]
        df = export_sweep_to_csv(rows, tmp_path / "sweep.csv")
        assert df[["lambda_e", "alpha"]].values.tolist() == [[0.0, 1.0], [2e-9, 0.0], [2e-9, 1.0]]

    def test_sweep_columns_match_the_published_set(self, tmp_path):
        rows = [{"lambda_e": 0.0, "alpha": 1.0, "size_bytes": 900, "blocks": "4x4x4", "status": "ok"}]
        export_sweep_to_csv(rows, tmp_path / "rd_sweep.csv")
        main_table = pd.read_csv(tmp_path / "rd_sweep.csv")
        assert list(main_table.columns) == ["lambda_e", "alpha", "size_bytes", "psnr", "rate_bits", "saturation"]
        runs = pd.read_csv(tmp_path / "rd_sweep_runs.csv")
        assert list(runs.columns[:6]) == list(main_table.columns)
        assert {"blocks", "domain", "raw_8bit_bytes", "payload_bytes", "psnr_float", "status"} <= set(runs.columns)
        assert runs["status"].tolist() == ["ok"]

    def test_png_round_trip(self, tmp_path):
        image = np.random.default_rng(0).uniform(size=(6, 5, 3))
        path = save_png(image, tmp_path / "img.png")
        restored = load_png(path)
        assert restored.shape == (6, 5, 3)
        assert np.abs(restored - image).max() <= 0.5 / 255 + 1e-12

    def test_to_uint8_rounds_and_clamps(self):
        assert to_uint8(np.array([0.0, 1.0, 1.2, -0.1, 0.5])).tolist() == [0, 255, 255, 0, 128]
