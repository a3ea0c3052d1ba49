"""
Module du modèle d'entropie factorisé.
- Une CDF monotone apprise par (composante, canal) : EntropyBottleneck de CompressAI
- Quantification par bruit additif (entraînement) ou arrondi (évaluation)
- PMF discrétisée, estimation différentiable du nombre de bits
- Gel des tables de fréquences entières pour le codeur arithmétique
"""

import copy
import logging
from typing import Dict, List, Optional

import numpy as np
import torch
from compressai.entropy_models import EntropyBottleneck

from src.constants import *
from src.model import (
    CoefficientTensor,
    ContractError,
    FrequencyTable,
    GridConfig,
    QuantSurrogate,
    TableOverflowError,
)

logger = logging.getLogger(__name__)


def cdf_bottleneck(
    channels: int, init_scale: float = CDF_INIT_SCALE, dtype: torch.dtype = torch.float32
) -> EntropyBottleneck:
    """
    Goulot factorisé à étapes scalaires (filtres de largeur 1) : x ← x·softplus(w_s) + b_s,
    puis x ← x + tanh(a_s)·tanh(x) sauf à la dernière étape.
    """
    bottleneck = EntropyBottleneck(
        channels,
        init_scale=init_scale,
        filters=(1,) * (CDF_STAGES - 1),
        likelihood_bound=PMF_FLOOR,
    )
    # Biais nuls : logistique centrée, P_c(0) = 1/2 pour chaque canal
    with torch.no_grad():
        for name, param in bottleneck.named_parameters():
            if "bias" in name:
                param.zero_()
    return bottleneck.to(dtype)


def cdf_parameters(bottleneck: EntropyBottleneck) -> List[torch.nn.Parameter]:
    """Paramètres de la CDF, sans les quantiles auxiliaires de CompressAI."""
    return [p for name, p in bottleneck.named_parameters() if "quantiles" not in name]


class EntropyModel(torch.nn.Module):
    def __init__(
        self,
        channels: Dict[str, int],
        init_scale: float = CDF_INIT_SCALE,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.cdfs = torch.nn.ModuleDict(
            {name: cdf_bottleneck(n, init_scale, dtype) for name, n in channels.items()}
        )

    def channels(self, name: str) -> int:
        if name not in self.cdfs:
            return 0
        return self.cdfs[name].channels

    def component_names(self) -> List[str]:
        return list(self.cdfs.keys())

    def cdf_parameters(self) -> List[torch.nn.Parameter]:
        return [p for name in self.cdfs for p in cdf_parameters(self.cdfs[name])]

    @property
    def dtype(self) -> torch.dtype:
        params = self.cdf_parameters()
        return params[0].dtype if params else torch.float32


def entropy_new(
    config: GridConfig, init_scale: float = CDF_INIT_SCALE, dtype: torch.dtype = torch.float32
) -> EntropyModel:
    """Un réseau CDF par canal (rang × canaux) de chaque composante de la grille."""
    channels = {name: config.component_shape(name)[0] for name in COMPONENT_NAMES}
    return EntropyModel(channels, init_scale=init_scale, dtype=dtype)


def _cdf_module(model: EntropyModel, name: str, channels: int) -> EntropyBottleneck:
    if model.channels(name) != channels:
        raise ContractError(ERR_CHANNEL_MISMATCH.format(name, model.channels(name), channels))
    return model.cdfs[name]


def _channel_inputs(bottleneck: EntropyBottleneck, x: torch.Tensor) -> torch.Tensor:
    # Mise en forme (canaux, 1, N) attendue par le goulot
    return x.reshape(1, 1, -1).expand(bottleneck.channels, 1, -1)


def cdf_eval(model: EntropyModel, name: str, channel: int, x) -> torch.Tensor:
    """P_c(x) dans [0, 1] pour le canal `channel` de la composante `name`."""
    bottleneck = model.cdfs[name]
    x = torch.as_tensor(x, dtype=model.dtype)
    logits = bottleneck._logits_cumulative(_channel_inputs(bottleneck, x), stop_gradient=False)
    return torch.sigmoid(logits[channel, 0]).reshape(x.shape)


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    """Arrondi à l'entier le plus proche, demi-entiers éloignés de zéro."""
    return torch.sign(x) * torch.floor(x.abs() + 0.5)


def noise_quantize(
    x: torch.Tensor, surrogate: QuantSurrogate, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """Entraînement : x + u, u ~ U(-1/2, 1/2) ; évaluation : arrondi."""
    if surrogate.mode == "eval":
        return round_half_away(x)
    if generator is None:
        generator = torch.Generator().manual_seed(surrogate.seed)
    noise = torch.rand(x.shape, generator=generator, dtype=torch.float64) - 0.5
    return x + noise.to(x.dtype)


def _bounded_likelihood(bottleneck: EntropyBottleneck, values: torch.Tensor) -> torch.Tensor:
    likelihood, _, _ = bottleneck._likelihood(values)
    return bottleneck.likelihood_lower_bound(likelihood)


def component_pmf(model: EntropyModel, name: str, y: torch.Tensor) -> torch.Tensor:
    """PMF discrétisée P_c(y + 1/2) − P_c(y − 1/2), même forme que y (canal sur l'axe 0)."""
    bottleneck = _cdf_module(model, name, y.shape[0])
    flat = y.reshape(y.shape[0], 1, -1).to(model.dtype)
    return _bounded_likelihood(bottleneck, flat).reshape(y.shape)


def pmf_discrete(model: EntropyModel, name: str, channel: int, y) -> torch.Tensor:
    bottleneck = model.cdfs[name]
    y = torch.as_tensor(y, dtype=model.dtype)
    pmf = _bounded_likelihood(bottleneck, _channel_inputs(bottleneck, y))[channel, 0]
    return pmf.reshape(y.shape)


def likelihood_bits(model: EntropyModel, name: str, y: torch.Tensor) -> torch.Tensor:
    """−Σ log2 pmf sur les valeurs (déjà quantifiées ou bruitées) d'une composante."""
    return -torch.log2(component_pmf(model, name, y)).sum()


def bit_estimate(
    model: EntropyModel,
    coeffs: Dict[str, CoefficientTensor],
    surrogate: QuantSurrogate,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """
    Nombre de bits estimé I = −Σ log2 pmf(Φ(coeff)) sur toutes les composantes,
    dans l'ordre déclaré. Un générateur unique fournit le bruit de toutes les composantes.
    """
    if surrogate.mode == "train" and generator is None:
        generator = torch.Generator().manual_seed(surrogate.seed)
    total = torch.zeros((), dtype=model.dtype)
    for name, coeff in coeffs.items():
        if coeff.values.numel() == 0:
            continue
        _cdf_module(model, name, coeff.values.shape[0])
        y = noise_quantize(coeff.values, surrogate, generator)
        total = total + likelihood_bits(model, name, y)
    return total


def quantize_pmf(pmf: np.ndarray, precision: int = TABLE_PRECISION) -> np.ndarray:
    """
    Fréquences entières f_k ≥ 1 de somme exacte 2^precision :
    1 + partie entière de p·(2^precision − n), puis les restes les plus grands
    (à égalité, l'indice le plus bas) reçoivent une unité.
    """
    total = 1 << precision
    n = len(pmf)
    if n > total:
        raise TableOverflowError(ERR_TABLE_OVERFLOW.format(n, total))
    p = np.clip(np.asarray(pmf, dtype=np.float64), 0.0, None)
    mass = p.sum()
    p = p / mass if mass > 0 else np.full(n, 1.0 / n)
    spare = total - n
    raw = p * spare
    freqs = np.floor(raw).astype(np.int64)
    deficit = spare - int(freqs.sum())
    if deficit > 0:
        order = np.argsort(-(raw - freqs), kind="stable")
        freqs[order[:deficit]] += 1
    return freqs + 1


@torch.no_grad()
def channel_pmf_table(bottleneck: EntropyBottleneck, channel: int, k_min: int, k_max: int) -> np.ndarray:
    """
    PMF sur [k_min, k_max] par différences de la CDF aux bords des intervalles,
    queues repliées sur les symboles extrêmes.
    """
    n = k_max - k_min + 1
    if n == 1:
        return np.ones(1)
    dtype = cdf_parameters(bottleneck)[0].dtype
    edges = torch.arange(1, n, dtype=dtype) + (k_min - 0.5)
    logits = bottleneck._logits_cumulative(_channel_inputs(bottleneck, edges), stop_gradient=True)
    cdf = torch.sigmoid(logits[channel, 0]).to(torch.float64).numpy()
    cdf = np.concatenate(([0.0], cdf, [1.0]))
    return np.diff(cdf)


def freeze_tables(
    model: EntropyModel,
    supports: Dict[str, np.ndarray],
    precision: int = TABLE_PRECISION,
) -> Dict[str, List[FrequencyTable]]:
    """Tables de fréquences par canal sur le support observé [k_min, k_max] de chaque canal."""
    tables = {}
    for name, support in supports.items():
        support = np.asarray(support, dtype=np.int64).reshape(-1, 2)
        # Copie en float64 : les tables ne dépendent pas de la précision d'entraînement
        bottleneck = copy.deepcopy(_cdf_module(model, name, support.shape[0])).double()
        channel_tables = []
        for channel, (k_min, k_max) in enumerate(support):
            pmf = channel_pmf_table(bottleneck, channel, int(k_min), int(k_max))
            freqs = quantize_pmf(pmf, precision)
            channel_tables.append(FrequencyTable(int(k_min), int(k_max), freqs))
        tables[name] = channel_tables
    logger.debug("Tables gelées pour %d composantes", len(tables))
    return tables
