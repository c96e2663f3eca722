from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from autodiff.tensor import Tape, Tensor, no_grad


@dataclass
class GradCheckReport:
    """Résultat d'une vérification analytique vs différences finies centrées"""
    max_relative_error: float
    per_input: List[float] = field(default_factory=list)
    checked_elements: int = 0
    tolerance: float = 1e-5
    passed: bool = False

    def __str__(self):
        verdict = 'OK' if self.passed else 'ECHEC'
        return (f"{verdict} - erreur relative max {self.max_relative_error:.3e} "
                f"(tolérance {self.tolerance:.0e}, {self.checked_elements} éléments)")


def relative_error(analytic: float, numeric: float) -> float:
    """|a - n| / max(1, |a|, |n|): erreur relative au-delà de 1, absolue en dessous"""
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def _evaluate(closure: Callable[[], Tensor]) -> float:
    with no_grad():
        out = closure()
    return float(np.asarray(out.data).reshape(-1)[0])


def grad_check(closure: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               tol: float = 1e-5, max_elements: Optional[int] = None,
               seed: int = 0) -> GradCheckReport:
    """Compare les gradients de la bande aux différences finies centrées

    closure doit reconstruire le calcul à chaque appel et retourner un scalaire.
    max_elements limite le nombre d'éléments vérifiés par entrée (tirage reproductible).
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"eps doit être dans (0, 1e-3], reçu {eps}")

    for tensor in inputs:
        tensor.requires_grad = True
        tensor.grad = None

    with Tape() as tape:
        out = closure()
    if out.size != 1:
        raise ValueError(f"La fonction vérifiée doit retourner un scalaire, reçu {out.shape}")
    grads = tape.backward(out) if out.node is not None else {}

    rng = np.random.default_rng(seed)
    per_input = []
    checked = 0
    for tensor in inputs:
        analytic = grads.get(tensor, np.zeros_like(tensor.data))
        indices = np.arange(tensor.size)
        if max_elements is not None and tensor.size > max_elements:
            indices = np.sort(rng.choice(tensor.size, size=max_elements, replace=False))

        worst = 0.0
        for flat in indices:
            position = np.unravel_index(int(flat), tensor.shape)
            original = tensor.data[position]
            tensor.data[position] = original + eps
            f_plus = _evaluate(closure)
            tensor.data[position] = original - eps
            f_minus = _evaluate(closure)
            tensor.data[position] = original
            numeric = (f_plus - f_minus) / (2.0 * eps)
            worst = max(worst, relative_error(float(analytic[position]), numeric))
        per_input.append(worst)
        checked += len(indices)

    max_error = max(per_input) if per_input else 0.0
    return GradCheckReport(max_relative_error=max_error, per_input=per_input,
                           checked_elements=checked, tolerance=tol, passed=max_error <= tol)
