"""
Module d'entraînement débit-distorsion.
- Perte totale L = L_MSE + λ_e·L_e + λ_r·L_r
- Pas d'optimisation Adam sur la grille, le MLP et le modèle d'entropie
- Vérification des gradients par différences finies centrées
- Boucle d'entraînement avec journal CSV
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from src.constants import *
from src.entropy import EntropyModel, bit_estimate, entropy_new
from src.grid import FeatureGrid, grid_new
from src.model import (
    CoefficientTensor,
    GradientReport,
    LossBreakdown,
    LossConfig,
    NonFiniteLossError,
    QuantSurrogate,
    Rays,
    RenderConfig,
    RunConfig,
)
from src.renderer import DecoderMLP, decoder_new, psnr, render_image, render_rays
from src.transform import grid_coefficients

logger = logging.getLogger(__name__)


@dataclass
class RayBatch:
    rays: Rays
    colors: torch.Tensor  # (B, 3)
    near: float = 0.0
    far: float = math.inf

    def __len__(self) -> int:
        return len(self.rays)


@dataclass
class TrainState:
    grid: FeatureGrid
    mlp: DecoderMLP
    entropy: EntropyModel
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    seed: int = 0
    iteration: int = 0

    def families(self) -> Dict[str, List[torch.nn.Parameter]]:
        """Familles de paramètres : grille, MLP, modèle d'entropie."""
        return {
            "grid": list(self.grid.parameters()),
            "mlp": list(self.mlp.parameters()),
            "entropy": self.entropy.cdf_parameters(),
        }


def new_train_state(
    config: RunConfig, dtype: torch.dtype = torch.float32
) -> TrainState:
    """État initial déterministe pour la graine de la configuration."""
    seed = config.seed
    grid = grid_new(config.grid, seed, dtype)
    mlp = decoder_new(
        config.grid.appearance_channels,
        seed + 1,
        view_dependent=config.training.view_dependent,
        dtype=dtype,
    )
    entropy = entropy_new(config.grid, dtype=dtype)
    training = config.training
    optimizer = torch.optim.Adam(
        [
            {"params": list(grid.parameters()), "lr": training.lr_grid},
            {"params": list(mlp.parameters()), "lr": training.lr_mlp},
            {"params": entropy.cdf_parameters(), "lr": training.lr_entropy},
        ],
        betas=ADAM_BETAS,
    )
    return TrainState(
        grid=grid,
        mlp=mlp,
        entropy=entropy,
        optimizer=optimizer,
        generator=torch.Generator().manual_seed(seed),
        seed=seed,
    )


def noise_seed(seed: int, iteration: int) -> int:
    """Graine du bruit de quantification d'une itération."""
    return (seed * 1_000_003 + iteration) % (2**63)


def reg_loss(coeffs: Dict[str, CoefficientTensor]) -> torch.Tensor:
    """L_r = Σ ‖F(G)‖² sur toutes les composantes."""
    total = torch.zeros(())
    for coeff in coeffs.values():
        total = total.to(coeff.values.dtype) + (coeff.values**2).sum()
    return total


def rate_active(loss_config: LossConfig, iteration: int) -> bool:
    return iteration >= loss_config.entropy_start


def _check_finite(term: str, value: torch.Tensor) -> None:
    if not bool(torch.isfinite(value).all()):
        raise NonFiniteLossError(term, float(value))


def total_loss(
    state: TrainState,
    batch: RayBatch,
    loss_config: LossConfig,
    render_config: RenderConfig,
    iteration: Optional[int] = None,
    noise: Optional[int] = None,
) -> Tuple[torch.Tensor, LossBreakdown]:
    """
    Perte totale et décomposition par terme. Avant l'itération de démarrage
    de l'entropie, les termes de débit valent 0 et ne sont pas évalués.
    """
    iteration = state.iteration if iteration is None else iteration
    prediction = render_rays(
        state.grid,
        state.mlp,
        batch.rays,
        render_config,
        batch.near,
        batch.far,
        generator=state.generator if render_config.stratified else None,
    )
    mse = ((prediction - batch.colors.to(prediction.dtype)) ** 2).mean()
    _check_finite("L_MSE", mse)

    zero = torch.zeros((), dtype=mse.dtype)
    rate, reg = zero, zero
    if rate_active(loss_config, iteration):
        coeffs = grid_coefficients(state.grid, loss_config.rate_domain)
        seed = noise_seed(state.seed, iteration) if noise is None else noise
        rate = bit_estimate(state.entropy, coeffs, QuantSurrogate("train", seed))
        reg = reg_loss(coeffs)
        _check_finite("L_e", rate)
        _check_finite("L_r", reg)

    weighted_rate = loss_config.lambda_e * rate
    weighted_reg = loss_config.lambda_r * reg
    loss = mse + weighted_rate + weighted_reg
    _check_finite("L", loss)
    breakdown = LossBreakdown(
        mse=float(mse),
        rate_bits=float(rate),
        reg=float(reg),
        weighted_rate=float(weighted_rate),
        weighted_reg=float(weighted_reg),
        total=float(loss),
    )
    return loss, breakdown


def entropy_fit_loss(state: TrainState, loss_config: LossConfig, noise: int) -> torch.Tensor:
    """Débit des coefficients détachés : ajuste le modèle d'entropie sans pousser la grille."""
    coeffs = {
        name: CoefficientTensor(c.values.detach(), c.block_dims, c.source)
        for name, c in grid_coefficients(state.grid, loss_config.rate_domain).items()
    }
    return bit_estimate(state.entropy, coeffs, QuantSurrogate("train", noise))


def train_step(
    state: TrainState,
    batch: RayBatch,
    loss_config: LossConfig,
    render_config: RenderConfig,
) -> LossBreakdown:
    """Un pas Adam ; les gradients de débit n'existent qu'à partir du démarrage de l'entropie."""
    state.optimizer.zero_grad(set_to_none=True)
    loss, breakdown = total_loss(state, batch, loss_config, render_config)
    objective = loss
    if rate_active(loss_config, state.iteration):
        fit = entropy_fit_loss(state, loss_config, noise_seed(state.seed, state.iteration))
        _check_finite("ajustement entropie", fit)
        objective = objective + fit
    objective.backward()
    # Vérifié avant le pas : une erreur laisse l'état inchangé
    for family, params in state.families().items():
        for param in params:
            if param.grad is not None and not bool(torch.isfinite(param.grad).all()):
                raise NonFiniteLossError(f"gradient {family}", math.nan)
    state.optimizer.step()
    state.iteration += 1
    return breakdown


def _flat_index(params: Sequence[torch.nn.Parameter], index: int) -> Tuple[int, int]:
    for i, param in enumerate(params):
        if index < param.numel():
            return i, index
        index -= param.numel()
    raise IndexError(index)


def gradient_check(
    state: TrainState,
    batch: RayBatch,
    loss_config: LossConfig,
    render_config: RenderConfig,
    samples: int = 64,
    step: float = GRADCHECK_STEP,
    seed: int = 0,
) -> GradientReport:
    """
    Gradients analytiques de la perte totale contre différences finies centrées,
    sur `samples` paramètres tirés dans chaque famille. Le bruit de quantification
    et les points d'échantillonnage sont figés ; les termes de débit sont actifs.
    """
    iteration = max(state.iteration, loss_config.entropy_start)
    noise = noise_seed(state.seed, iteration)
    deterministic = RenderConfig(
        n_samples=render_config.n_samples,
        background=render_config.background,
        stratified=False,
        chunk=render_config.chunk,
    )

    def evaluate() -> torch.Tensor:
        loss, _ = total_loss(state, batch, loss_config, deterministic, iteration, noise)
        return loss

    families = state.families()
    all_params = [p for params in families.values() for p in params]
    for param in all_params:
        param.grad = None
    evaluate().backward()

    generator = torch.Generator().manual_seed(seed)
    errors, counts = {}, {}
    for family, params in families.items():
        total = sum(p.numel() for p in params)
        picks = torch.randint(0, total, (samples,), generator=generator).tolist()
        worst = 0.0
        for pick in picks:
            i, j = _flat_index(params, pick)
            param = params[i]
            analytic = 0.0 if param.grad is None else float(param.grad.reshape(-1)[j])
            with torch.no_grad():
                flat = param.view(-1)
                original = flat[j].item()
                flat[j] = original + step
                plus = float(evaluate())
                flat[j] = original - step
                minus = float(evaluate())
                flat[j] = original
            numeric = (plus - minus) / (2.0 * step)
            scale = max(abs(analytic), abs(numeric), GRADCHECK_FLOOR)
            worst = max(worst, abs(analytic - numeric) / scale)
        errors[family] = worst
        counts[family] = len(picks)
        logger.info("Gradients %s : erreur relative max %.3e", family, worst)
    for param in all_params:
        param.grad = None
    return GradientReport(max_rel_error=errors, samples=counts)


def mean_psnr(
    state: TrainState, views: Sequence[Tuple[object, np.ndarray]], render_config: RenderConfig
) -> float:
    """PSNR moyen sur des couples (caméra, image de référence)."""
    scores = [
        psnr(render_image(state.grid, state.mlp, camera, render_config), image)
        for camera, image in views
    ]
    return float(np.mean(scores)) if scores else math.nan


def train(
    config: RunConfig,
    dataset,
    eval_views: Sequence[Tuple[object, np.ndarray]] = (),
    log_row: Optional[Callable[[dict], None]] = None,
    progress: bool = True,
) -> Tuple[TrainState, List[dict]]:
    """
    Boucle d'entraînement à taux constant. Chaque ligne du journal est transmise
    à `log_row` dès qu'elle est produite (journal CSV en ajout).
    """
    torch.use_deterministic_algorithms(True, warn_only=True)
    state = new_train_state(config)
    loss_config = config.loss
    training = config.training
    rows = []
    start = time.perf_counter()
    logger.info(
        "Entraînement : %d itérations, entropie active à partir de %d",
        loss_config.total_iters,
        loss_config.entropy_start,
    )

    iterations = tqdm(range(loss_config.total_iters), disable=not progress, desc="train")
    for it in iterations:
        rays, colors = dataset.sample_batch(training.batch_size, state.generator)
        batch = RayBatch(rays, colors, dataset.near, dataset.far)
        breakdown = train_step(state, batch, loss_config, config.render)

        done = it + 1
        last = done == loss_config.total_iters
        if done % training.log_every == 0 or last:
            score = math.nan
            if eval_views and (done % training.eval_every == 0 or last):
                score = mean_psnr(state, eval_views, config.render)
            row = {
                "iteration": done,
                "mse": breakdown.mse,
                "rate_bits": breakdown.rate_bits,
                "reg": breakdown.reg,
                "psnr": score,
                "seconds": time.perf_counter() - start,
            }
            rows.append(row)
            if log_row is not None:
                log_row(row)
            iterations.set_postfix(mse=f"{breakdown.mse:.2e}", bits=f"{breakdown.rate_bits:.3g}")
            logger.debug("Itération %d : %s", done, row)
    return state, rows
