from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from network.attention import LandmarkSet
from network.heads import Markup, MarkupError

AUC_THRESHOLD = 0.1
CED_MAX_THRESHOLD = 0.2
CED_POINTS = 512
MIN_NORM = 1e-12

Points = Union[LandmarkSet, np.ndarray]


class ZeroNormError(ValueError):
    """Distance de normalisation nulle: l'exemple est exclu"""


@dataclass(frozen=True)
class NormSpec:
    """interocular: coins externes des yeux; pupil: centres des yeux; custom: deux groupes"""
    kind: str = 'interocular'
    groups: Tuple[Tuple[int, ...], Tuple[int, ...]] = ((), ())

    def __post_init__(self):
        if self.kind not in ('interocular', 'pupil', 'custom'):
            raise ValueError(f"Normalisation non supportée: {self.kind}")
        if self.kind == 'custom' and (not self.groups[0] or not self.groups[1]):
            raise ValueError("Normalisation 'custom': deux groupes d'indices non vides requis")

    @classmethod
    def parse(cls, value: str) -> 'NormSpec':
        """'interocular', 'pupil' ou 'custom:i,j' / 'custom:i,j/k,l'"""
        kind, _, rest = value.partition(':')
        if kind != 'custom':
            return cls(kind)
        left, sep, right = rest.partition('/')
        try:
            if sep:
                groups = (tuple(int(v) for v in left.split(',')),
                          tuple(int(v) for v in right.split(',')))
            else:
                first, second = (int(v) for v in rest.split(','))
                groups = ((first,), (second,))
        except ValueError:
            raise ValueError(f"Normalisation 'custom' invalide: '{value}'") from None
        return cls('custom', groups)

    def resolve(self, markup: Markup) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
        if self.kind == 'interocular':
            if markup.interocular is None:
                raise MarkupError(f"Markup {markup.name} sans paire interoculaire")
            return (markup.interocular[0],), (markup.interocular[1],)
        if self.kind == 'pupil':
            if markup.pupils is None:
                raise MarkupError(f"Markup {markup.name} sans définition des pupilles")
            return markup.pupils
        markup._check_range(self.groups[0] + self.groups[1])
        return self.groups


def _values(points: Points) -> np.ndarray:
    return points.values if isinstance(points, LandmarkSet) else np.asarray(points, np.float64)


def norm_distance(gt: Points, markup: Markup, norm: NormSpec = NormSpec()) -> float:
    first, second = norm.resolve(markup)
    coords = _values(gt)
    return float(np.linalg.norm(coords[list(first)].mean(axis=0) -
                                coords[list(second)].mean(axis=0)))


def normalized_error(pred: Points, gt: Points, markup: Markup,
                     norm: NormSpec = NormSpec()) -> float:
    """Distance point à point moyenne divisée par la distance de normalisation de la vérité"""
    predicted, truth = _values(pred), _values(gt)
    if predicted.shape != truth.shape or truth.shape != (markup.num_landmarks, 2):
        raise MarkupError(f"Formes {predicted.shape} / {truth.shape} incompatibles avec "
                          f"{markup.name} ({markup.num_landmarks} points)")
    distance = norm_distance(truth, markup, norm)
    if distance <= MIN_NORM:
        raise ZeroNormError(f"Distance de normalisation nulle pour {markup.name}")
    return float(np.linalg.norm(predicted - truth, axis=1).mean() / distance)


def batch_errors(pred: np.ndarray, gt: np.ndarray, markup: Markup,
                 norm: NormSpec = NormSpec()) -> Tuple[np.ndarray, int]:
    """Erreurs des exemples valides et nombre d'exemples exclus (norme nulle)"""
    errors = []
    excluded = 0
    for predicted, truth in zip(pred, gt):
        try:
            errors.append(normalized_error(predicted, truth, markup, norm))
        except ZeroNormError:
            excluded += 1
    return np.asarray(errors, dtype=np.float64), excluded


def auc_fr(errors: Sequence[float], threshold: float = AUC_THRESHOLD) -> Tuple[float, float]:
    """AUC normalisée de la CED sur [0, seuil] (intégrale exacte de la fonction en escalier)
    et taux d'échec (fraction des erreurs > seuil)"""
    values = np.asarray(errors, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("auc_fr: aucune erreur à évaluer")
    if threshold <= 0:
        raise ValueError(f"Seuil positif requis, reçu {threshold}")
    # Chaque erreur e contribue 1/n à la CED sur [e, seuil]
    auc = float(np.clip(threshold - values, 0.0, None).sum() / (values.size * threshold))
    failure_rate = float(np.count_nonzero(values > threshold) / values.size)
    return auc, failure_rate


def ced_curve(errors: Sequence[float], max_threshold: float = CED_MAX_THRESHOLD,
              points: int = CED_POINTS) -> Tuple[np.ndarray, np.ndarray]:
    """Fraction des erreurs <= t pour points seuils uniformes dans [0, max_threshold]"""
    values = np.sort(np.asarray(errors, dtype=np.float64).reshape(-1))
    thresholds = np.linspace(0.0, max_threshold, points)
    if values.size == 0:
        return thresholds, np.zeros(points)
    fractions = np.searchsorted(values, thresholds, side='right') / values.size
    return thresholds, fractions


def mean_error(errors: Sequence[float]) -> Optional[float]:
    values = np.asarray(errors, dtype=np.float64)
    return float(values.mean()) if values.size else None
