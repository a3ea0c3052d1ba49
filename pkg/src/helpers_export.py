"""
Module pour l'export des résultats.
Journaux et tableaux en CSV (pandas), images en PNG 8 bits.
"""

from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd
import torch
from PIL import Image

from src.constants import *


def append_train_log(row: Dict, output_path) -> None:
    """Ajoute une ligne au journal d'entraînement ; l'en-tête est écrit à la création."""
    path = Path(output_path)
    df = pd.DataFrame([row], columns=TRAIN_LOG_COLUMNS)
    df.to_csv(path, mode="a", header=not path.exists(), index=False)


def export_eval_to_csv(scores: List[float], output_path) -> pd.DataFrame:
    """PSNR par vue, suivi d'une ligne `mean`."""
    data = [{"view": str(i), "psnr": score} for i, score in enumerate(scores)]
    data.append({"view": "mean", "psnr": float(np.mean(scores)) if scores else float("nan")})
    df = pd.DataFrame(data, columns=EVAL_COLUMNS)
    df.to_csv(output_path, index=False)
    return df


def export_sweep_to_csv(rows: List[Dict], output_path) -> pd.DataFrame:
    """
    Tableau du balayage, trié par λ_e puis α. `output_path` reçoit les colonnes
    SWEEP_COLUMNS, `<nom>_runs.csv` à côté reçoit toutes les colonnes
    de SWEEP_RUN_COLUMNS.
    """
    path = Path(output_path)
    df = pd.DataFrame(rows, columns=SWEEP_RUN_COLUMNS)
    df = df.sort_values(["lambda_e", "alpha"], kind="stable").reset_index(drop=True)
    df[SWEEP_COLUMNS].to_csv(path, index=False)
    df.to_csv(sweep_runs_path(path), index=False)
    return df


def sweep_runs_path(output_path) -> Path:
    path = Path(output_path)
    return path.with_name(f"{path.stem}_runs{path.suffix}")


def export_size_report_to_csv(rows: List[Dict], output_path) -> pd.DataFrame:
    df = pd.DataFrame(rows, columns=SIZE_REPORT_COLUMNS)
    df.to_csv(output_path, index=False)
    return df


def export_gradcheck_to_csv(report, output_path) -> pd.DataFrame:
    data = [
        {"family": family, "samples": report.samples[family], "max_rel_error": error}
        for family, error in report.max_rel_error.items()
    ]
    df = pd.DataFrame(data, columns=GRADCHECK_COLUMNS)
    df.to_csv(output_path, index=False)
    return df


def to_uint8(image) -> np.ndarray:
    """Image [0, 1] (H, W, 3) → octets, arrondi au plus proche."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    return np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_png(image, output_path) -> Path:
    path = Path(output_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
    return path


def load_png(path) -> np.ndarray:
    """PNG → image float64 dans [0, 1]."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
