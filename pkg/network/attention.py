"""
Cartes d'attention par landmark: couche de transfert 1x1, softmax spatial, soft-argmax
et agrégation en masque. Coordonnées normalisées dans [0, 1], le pixel p valant p / (dim - 1).
"""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from autodiff.tensor import ShapeError, Tensor, concat, conv2d, exp, parameter
from network.layers import Module


@dataclass
class AttentionMaps:
    maps: Tensor          # (N, L, Y, X), chaque carte somme à 1
    markup: str = ''
    stage: int = 0

    @property
    def num_landmarks(self) -> int:
        return self.maps.shape[1]


@dataclass
class LandmarkSet:
    coords: Union[Tensor, np.ndarray]     # (..., L, 2): x puis y
    markup: str = ''

    @property
    def values(self) -> np.ndarray:
        return self.coords.data if isinstance(self.coords, Tensor) else np.asarray(self.coords)

    @property
    def num_landmarks(self) -> int:
        return self.values.shape[-2]


@dataclass
class AggregatedMask:
    mask: Tensor          # (N, 1, Y, X)


def normalized_grid(size: int) -> np.ndarray:
    """Coordonnées normalisées des centres de pixels; un axe de taille 1 vaut 0.5"""
    if size == 1:
        return np.array([0.5])
    return np.arange(size, dtype=np.float64) / (size - 1)


def to_pixels(coords: np.ndarray, width: int, height: int) -> np.ndarray:
    """Conversion explicite des coordonnées normalisées en pixels"""
    coords = np.asarray(coords, dtype=np.float64)
    return coords * np.array([width - 1, height - 1], dtype=np.float64)


def to_normalized(coords: np.ndarray, width: int, height: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    return coords / np.array([max(width - 1, 1), max(height - 1, 1)], dtype=np.float64)


class TransferLayer(Module):
    """Convolution 1x1 à L filtres (avec biais) produisant les logits d'un markup"""

    def __init__(self, in_channels: int, num_landmarks: int,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.num_landmarks = num_landmarks
        self.weight = parameter(rng.normal(0.0, np.sqrt(1.0 / in_channels),
                                           (num_landmarks, in_channels, 1, 1)))
        self.bias = parameter(np.zeros(num_landmarks))

    def __call__(self, x: Tensor) -> Tensor:
        return transfer_layer(x, self.weight, self.bias)


def transfer_layer(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError('transfer_layer', f"entrée {x.shape} incompatible avec les poids "
                                           f"{weight.shape}")
    if weight.shape[2:] != (1, 1):
        raise ShapeError('transfer_layer', f"noyau 1x1 attendu, reçu {weight.shape[2:]}")
    return conv2d(x, weight, bias, padding='valid')


def spatial_softmax(logits: Tensor, markup: str = '', stage: int = 0) -> AttentionMaps:
    """Softmax sur toutes les positions (x, y) de chaque canal, stabilisé par le maximum"""
    if logits.ndim != 4:
        raise ShapeError('spatial_softmax', f"logits 4-D attendus, reçu {logits.shape}")
    n, l, y, x = logits.shape
    flat = logits.reshape(n, l, y * x)
    # Décalage constant: le softmax y est invariant, son gradient total est nul
    shift = Tensor(flat.data.max(axis=-1, keepdims=True))
    weights = exp(flat - shift)
    probabilities = weights / weights.sum(axis=-1, keepdims=True)
    return AttentionMaps(probabilities.reshape(n, l, y, x), markup=markup, stage=stage)


def soft_argmax(maps: AttentionMaps) -> LandmarkSet:
    """Premiers moments de chaque carte: espérance de x et de y sur la grille normalisée"""
    phi = maps.maps
    n, l, y, x = phi.shape
    grid_x = Tensor(normalized_grid(x).reshape(1, 1, 1, x))
    grid_y = Tensor(normalized_grid(y).reshape(1, 1, y, 1))
    coord_x = (phi * grid_x).sum(axis=(2, 3)).reshape(n, l, 1)
    coord_y = (phi * grid_y).sum(axis=(2, 3)).reshape(n, l, 1)
    return LandmarkSet(concat([coord_x, coord_y], axis=2), markup=maps.markup)


def aggregate_mask(maps: AttentionMaps) -> AggregatedMask:
    """Somme des cartes d'attention sur l'axe des landmarks"""
    return AggregatedMask(maps.maps.sum(axis=1, keepdims=True))
