"""
Module contenant les fonctions métier du pipeline de compression.
Évaluation par vue, comptabilité des tailles par étape, cellule de balayage
et calibration de λ_e sur une référence λ_e = 0.
"""

import logging
from dataclasses import replace
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch

from src.codec import decode, encode, model_coefficients
from src.constants import *
from src.entropy import bit_estimate
from src.grid import FeatureGrid
from src.model import Camera, ConfigurationError, QuantSurrogate, RenderConfig, RunConfig
from src.renderer import DecoderMLP, psnr, render_image
from src.trainer import train

logger = logging.getLogger(__name__)


def evaluate_views(
    grid: FeatureGrid,
    mlp: DecoderMLP,
    views: Sequence[Tuple[Camera, np.ndarray]],
    render_config: RenderConfig,
) -> List[float]:
    """PSNR de chaque vue (caméra, image de référence)."""
    return [
        psnr(render_image(grid, mlp, camera, render_config), image) for camera, image in views
    ]


def parameter_bytes(grid: FeatureGrid, mlp: DecoderMLP) -> int:
    """Taille du modèle en float32."""
    return 4 * (grid.parameter_count() + sum(p.numel() for p in mlp.flat_parameters()))


def raw_8bit_bytes(grid: FeatureGrid, mlp: DecoderMLP) -> int:
    """Un octet par coefficient quantifié, MLP en float32."""
    return grid.parameter_count() + 4 * sum(p.numel() for p in mlp.flat_parameters())


def eval_rate_bits(grid: FeatureGrid, entropy, rate_domain: str = "frequency") -> float:
    """Estimation du débit en mode évaluation (coefficients arrondis)."""
    with torch.no_grad():
        coeffs = model_coefficients(grid, rate_domain)
        coeffs = {
            name: replace(c, values=c.values.to(entropy.dtype))
            for name, c in coeffs.items()
        }
        return float(bit_estimate(entropy, coeffs, QuantSurrogate("eval")))


def stage_size_report(
    grid: FeatureGrid,
    mlp: DecoderMLP,
    entropy,
    views: Sequence[Tuple[Camera, np.ndarray]],
    render_config: RenderConfig,
    rate_domain: str = "frequency",
) -> List[Dict]:
    """Lignes baseline float32, +DCT 8 bits, +codage entropique : taille et PSNR moyen."""
    bitstream = encode(grid, mlp, entropy, rate_domain)
    decoded_grid, decoded_mlp = decode(bitstream.to_bytes())
    baseline = float(np.mean(evaluate_views(grid, mlp, views, render_config))) if views else float("nan")
    quantized = (
        float(np.mean(evaluate_views(decoded_grid, decoded_mlp, views, render_config)))
        if views
        else float("nan")
    )
    return [
        {"stage": "baseline float32", "size_bytes": parameter_bytes(grid, mlp), "psnr": baseline},
        {"stage": "+DCT, 8bit quantization", "size_bytes": raw_8bit_bytes(grid, mlp), "psnr": quantized},
        {"stage": "+Entropy coding", "size_bytes": bitstream.size_report().total_bytes, "psnr": quantized},
    ]


def run_sweep_cell(
    config: RunConfig,
    dataset,
    views: Sequence[Tuple[Camera, np.ndarray]],
    progress: bool = False,
) -> Dict:
    """Entraînement, compression et évaluation d'une configuration ; un échec devient une ligne d'erreur."""
    row = {
        "lambda_e": config.loss.lambda_e,
        "alpha": config.loss.alpha,
        "size_bytes": np.nan,
        "psnr": np.nan,
        "rate_bits": np.nan,
        "saturation": np.nan,
        "blocks": str(config.grid.matrix_block),
        "domain": config.loss.rate_domain,
        "raw_8bit_bytes": np.nan,
        "payload_bytes": np.nan,
        "psnr_float": np.nan,
        "status": "ok",
    }
    try:
        state, _ = train(config, dataset, progress=progress)
        domain = config.loss.rate_domain
        bitstream = encode(state.grid, state.mlp, state.entropy, domain)
        grid, mlp = decode(bitstream.to_bytes())
        report = bitstream.size_report()
        row.update(
            size_bytes=report.total_bytes,
            psnr=float(np.mean(evaluate_views(grid, mlp, views, config.render))),
            rate_bits=eval_rate_bits(state.grid, state.entropy, domain),
            saturation=bitstream.saturation,
            raw_8bit_bytes=raw_8bit_bytes(state.grid, state.mlp),
            payload_bytes=report.payload_bytes,
            psnr_float=float(np.mean(evaluate_views(state.grid, state.mlp, views, config.render))),
        )
    except Exception as e:
        logger.warning("Cellule λ_e=%g α=%g en échec : %s", config.loss.lambda_e, config.loss.alpha, e)
        row["status"] = f"error: {e}"
    return row


def calibrate_lambdas(baseline: Dict, ratios: Sequence[float] = CALIBRATION_RATIOS) -> List[float]:
    """
    λ_e tels que le terme de débit λ_e · bits vaille `ratio` fois la MSE de la
    référence λ_e = 0 (MSE tirée du PSNR non quantifié, crête 1).
    """
    if baseline.get("status") != "ok":
        raise ConfigurationError(ERR_CALIBRATION.format(f"référence en échec ({baseline.get('status')})"))
    bits = float(baseline["rate_bits"])
    if not bits > 0:
        raise ConfigurationError(ERR_CALIBRATION.format(f"débit estimé {bits}"))
    mse = 10.0 ** (-float(baseline["psnr_float"]) / 10.0)
    lambdas = sorted(float(ratio) * mse / bits for ratio in ratios)
    logger.info("λ_e calibrés (MSE %.3e, %.0f bits) : %s", mse, bits, ", ".join(f"{v:.3e}" for v in lambdas))
    return lambdas
