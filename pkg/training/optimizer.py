from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from autodiff.tensor import Tensor


class OptimizationError(RuntimeError):
    """Gradient non fini: le message nomme le paramètre fautif"""


def poly_learning_rate(base_lr: float, step: int, total: int, power: float = 0.9) -> float:
    """lr(t) = base_lr * (1 - t/T)^power, nul au-delà de T"""
    if total <= 0:
        return base_lr
    remaining = max(0.0, 1.0 - step / total)
    return base_lr * remaining ** power


@dataclass
class OptimizerState:
    base_lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    power: float = 0.9
    total_steps: int = 0
    step: int = 0
    first_moments: List[np.ndarray] = field(default_factory=list)
    second_moments: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"Taux d'apprentissage positif requis, reçu {self.base_lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"beta1/beta2 doivent être dans [0, 1): {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ValueError(f"epsilon positif requis, reçu {self.eps}")

    @property
    def learning_rate(self) -> float:
        return poly_learning_rate(self.base_lr, self.step, self.total_steps, self.power)


class AdamOptimizer:
    """ADAM avec correction de biais et décroissance polynomiale du taux d'apprentissage"""

    def __init__(self, parameters: Sequence[Tuple[str, Tensor]], state: Optional[OptimizerState] = None):
        self.parameters = list(parameters)
        self.state = state if state is not None else OptimizerState()
        if not self.state.first_moments:
            self.state.first_moments = [np.zeros_like(p.data) for _, p in self.parameters]
            self.state.second_moments = [np.zeros_like(p.data) for _, p in self.parameters]
        for (name, tensor), moment in zip(self.parameters, self.state.first_moments):
            if moment.shape != tensor.shape:
                raise ValueError(f"Moment de forme {moment.shape} pour {name} {tensor.shape}")

    @property
    def learning_rate(self) -> float:
        return self.state.learning_rate

    def zero_grad(self):
        for _, tensor in self.parameters:
            tensor.grad = None

    def step(self, grads: Optional[Dict[Tensor, np.ndarray]] = None) -> float:
        """Une mise à jour; retourne le taux d'apprentissage appliqué"""
        state = self.state
        gradients = []
        for name, tensor in self.parameters:
            grad = grads.get(tensor) if grads is not None else tensor.grad
            if grad is None:
                grad = np.zeros_like(tensor.data)
            if not np.all(np.isfinite(grad)):
                bad = int(np.count_nonzero(~np.isfinite(grad)))
                raise OptimizationError(f"Gradient non fini pour {name} ({bad} valeur(s)) au pas "
                                        f"{state.step}")
            gradients.append(grad)

        lr = state.learning_rate
        t = state.step + 1
        correction1 = 1.0 - state.beta1 ** t
        correction2 = 1.0 - state.beta2 ** t
        for index, ((_, tensor), grad) in enumerate(zip(self.parameters, gradients)):
            m = state.first_moments[index]
            v = state.second_moments[index]
            m *= state.beta1
            m += (1.0 - state.beta1) * grad
            v *= state.beta2
            v += (1.0 - state.beta2) * grad * grad
            tensor.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        state.step = t
        return lr
