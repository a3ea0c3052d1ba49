"""
Module de transformée DCT-II orthonormée par blocs.
L'axe des canaux est le premier axe transformé : un bloc (K1, K2, K3) couvre
K1 canaux et K2 × K3 cellules d'un plan, un bloc (K1, K2) couvre K1 canaux et
K2 cellules d'une ligne.
"""

import math
from functools import lru_cache
from typing import Dict

import torch

from src.constants import *
from src.model import BlockDims, CoefficientTensor, ContractError


@lru_cache(maxsize=None)
def _dct_matrix_f64(n: int) -> torch.Tensor:
    k = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    x = torch.arange(n, dtype=torch.float64).unsqueeze(0)
    mat = torch.cos(math.pi * (2 * x + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    mat[0] /= math.sqrt(2.0)
    return mat


def dct_matrix(n: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Matrice D (n × n) de la DCT-II orthonormée : X[k] = Σ_x D[k, x] x[x]."""
    return _dct_matrix_f64(n).to(dtype)


def _check_blocks(x: torch.Tensor, block_dims: BlockDims) -> None:
    if x.dim() != block_dims.ndim:
        raise ContractError(ERR_BLOCK_RANK.format(block_dims, x.dim()))
    for axis, (n, k) in enumerate(zip(x.shape, block_dims.dims)):
        if n % k:
            raise ContractError(ERR_AXIS_NOT_MULTIPLE.format(axis, n, k))


def _apply_blockwise(x: torch.Tensor, block_dims: BlockDims, inverse: bool) -> torch.Tensor:
    # Transformée séparable : un produit matriciel par axe, bloc par bloc.
    for axis, k in enumerate(block_dims.dims):
        if k == 1:
            continue
        mat = dct_matrix(k, x.dtype)
        if not inverse:
            mat = mat.T
        moved = x.movedim(axis, -1)
        shape = moved.shape
        blocks = moved.reshape(*shape[:-1], shape[-1] // k, k) @ mat
        x = blocks.reshape(shape).movedim(-1, axis)
    return x


def dct_forward(
    component: torch.Tensor, block_dims: BlockDims, source: str = ""
) -> CoefficientTensor:
    """DCT-II orthonormée indépendante sur chaque bloc non chevauchant."""
    _check_blocks(component, block_dims)
    values = _apply_blockwise(component, block_dims, inverse=False)
    return CoefficientTensor(values=values, block_dims=block_dims, source=source)


def dct_inverse(coeffs: CoefficientTensor) -> torch.Tensor:
    _check_blocks(coeffs.values, coeffs.block_dims)
    return _apply_blockwise(coeffs.values, coeffs.block_dims, inverse=True)


def coding_blocks(grid_config, name: str, rate_domain: str = "frequency") -> BlockDims:
    """Bloc utilisé pour une composante ; le domaine spatial revient à des blocs 1."""
    block = grid_config.block_for(name)
    if rate_domain == "spatial":
        return BlockDims.ones(block.ndim)
    return block


def grid_coefficients(grid, rate_domain: str = "frequency") -> Dict[str, CoefficientTensor]:
    """
    Coefficients de toutes les composantes, exprimés en pas de quantification
    (composante / coeff_step), dans l'ordre déclaré.
    """
    step = grid.config.coeff_step
    return {
        name: dct_forward(
            component / step, coding_blocks(grid.config, name, rate_domain), name
        )
        for name, component in grid.components().items()
    }


def grid_from_coefficients(
    coeffs: Dict[str, CoefficientTensor], coeff_step: float
) -> Dict[str, torch.Tensor]:
    """Inverse de grid_coefficients."""
    return {name: dct_inverse(c) * coeff_step for name, c in coeffs.items()}
