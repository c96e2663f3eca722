"""
Suite de vérification des gradients: opérations élémentaires, couches, micro-cascade
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from autodiff import tensor as ad
from autodiff.gradcheck import GradCheckReport, grad_check
from autodiff.tensor import Tensor, no_grad, parameter
from network.attention import TransferLayer, aggregate_mask, soft_argmax, spatial_softmax
from network.cascade import CascadeConfig, CascadeModel, intermediate_loss
from network.fusion import FusionKind, fuse
from network.heads import Markup
from network.layers import BatchNormLayer, Conv2dLayer, ConvBlock, UNet, UNetConfig
from utils.logger import CascadeLogger

OP_TOLERANCE = 1e-5
LAYER_TOLERANCE = 1e-4
CASCADE_TOLERANCE = 1e-3
SCOPES = ('ops', 'layers', 'cascade', 'all')

# Fabrique d'instance: rng -> (entrées, fonction des entrées)
Instance = Tuple[List[Tensor], Callable[..., Tensor]]


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _away_from_zero(rng, shape, low=0.1, high=1.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, high, shape)


def _distinct(rng, shape):
    # Valeurs espacées de 0.1: aucune égalité au voisinage des perturbations
    size = int(np.prod(shape))
    return (rng.permutation(size) * 0.1 + rng.uniform(0.0, 0.01, size)).reshape(shape)


def _leaves(*arrays) -> List[Tensor]:
    return [parameter(array) for array in arrays]


def _conv_instance(rng: np.random.Generator) -> Instance:
    stride = int(rng.integers(1, 3))
    inputs = _leaves(rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(4, 3, 3, 3)),
                     rng.normal(size=(4,)))
    return inputs, lambda x, w, b: ad.conv2d(x, w, b, stride=stride)


OP_INSTANCES: Dict[str, Callable[[np.random.Generator], Instance]] = {
    'add': lambda r: (_leaves(r.normal(size=(3, 4)), r.normal(size=(4,))), ad.add),
    'sub': lambda r: (_leaves(r.normal(size=(2, 3)), r.normal(size=(2, 1))), ad.sub),
    'mul': lambda r: (_leaves(r.normal(size=(3, 4)), r.normal(size=(3, 4))), ad.mul),
    'div': lambda r: (_leaves(r.normal(size=(3, 4)), _away_from_zero(r, (3, 4), 0.5, 2.0)),
                      ad.div),
    'neg': lambda r: (_leaves(r.normal(size=(5,))), ad.neg),
    'exp': lambda r: (_leaves(r.uniform(-1.0, 1.0, (3, 3))), ad.exp),
    'log': lambda r: (_leaves(r.uniform(0.5, 2.0, (3, 3))), ad.log),
    'abs': lambda r: (_leaves(_away_from_zero(r, (4, 3))), ad.abs_),
    'sqrt': lambda r: (_leaves(r.uniform(0.5, 2.0, (4,))), ad.sqrt),
    'power': lambda r: (_leaves(r.uniform(0.5, 2.0, (2, 3))), lambda a: ad.power(a, 2.5)),
    'relu': lambda r: (_leaves(_away_from_zero(r, (3, 5))), ad.relu),
    'matmul': lambda r: (_leaves(r.normal(size=(3, 4)), r.normal(size=(4, 2))), ad.matmul),
    'sum': lambda r: (_leaves(r.normal(size=(2, 3, 4))), lambda a: ad.sum_(a, 1, True)),
    'mean': lambda r: (_leaves(r.normal(size=(2, 3, 4))), lambda a: ad.mean(a, (0, 2))),
    'max': lambda r: (_leaves(_distinct(r, (3, 4))), lambda a: ad.max_(a, 1)),
    'reshape': lambda r: (_leaves(r.normal(size=(2, 6))), lambda a: ad.reshape(a, (3, 4))),
    'transpose': lambda r: (_leaves(r.normal(size=(2, 3, 4))),
                            lambda a: ad.transpose(a, (2, 0, 1))),
    'broadcast': lambda r: (_leaves(r.normal(size=(3, 1))), lambda a: ad.broadcast_to(a, (3, 4))),
    'concat': lambda r: (_leaves(r.normal(size=(2, 3)), r.normal(size=(2, 2))),
                         lambda a, b: ad.concat([a, b], axis=1)),
    'slice': lambda r: (_leaves(r.normal(size=(4, 5))), lambda a: ad.slice_(a, (slice(1, None),
                                                                              slice(None, None, 2)))),
    'conv2d': _conv_instance,
    'max_pool2': lambda r: (_leaves(_distinct(r, (2, 2, 4, 4))), ad.max_pool2),
    'upsample_bilinear2': lambda r: (_leaves(r.normal(size=(1, 2, 3, 4))), ad.upsample_bilinear2),
}


def _weighted_sum(function: Callable[..., Tensor], inputs: Sequence[Tensor],
                  rng: np.random.Generator) -> Callable[[], Tensor]:
    """Fonction scalaire sum(w * f(x)) avec des poids aléatoires fixés"""
    with no_grad():
        shape = function(*inputs).shape
    weights = Tensor(rng.normal(size=shape))
    return lambda: (function(*inputs) * weights).sum()


def op_checks(instances: int = 10, seed: int = 0) -> List[CheckResult]:
    results = []
    for kind, factory in OP_INSTANCES.items():
        rng = np.random.default_rng([seed, len(results)])
        worst = None
        for _ in range(instances):
            inputs, function = factory(rng)
            report = grad_check(_weighted_sum(function, inputs, rng), inputs, tol=OP_TOLERANCE)
            if worst is None or report.max_relative_error > worst.max_relative_error:
                worst = report
        worst.checked_elements *= instances
        results.append(CheckResult(kind, worst))
    return results


def layer_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    conv = Conv2dLayer(2, 3, 3, rng=rng)
    x = parameter(rng.normal(size=(2, 2, 4, 4)))
    closure = _weighted_sum(lambda: conv(x), [], rng)
    results.append(CheckResult('conv_layer', grad_check(closure, [x, conv.weight, conv.bias],
                                                        tol=LAYER_TOLERANCE)))

    norm = BatchNormLayer(3)
    x = parameter(rng.normal(size=(3, 3, 2, 2)))
    closure = _weighted_sum(lambda: norm(x), [], rng)
    results.append(CheckResult('batchnorm_train', grad_check(closure, [x, norm.gamma, norm.beta],
                                                             tol=LAYER_TOLERANCE)))

    block = ConvBlock(2, 2, rng)
    x = parameter(rng.normal(size=(2, 2, 4, 4)))
    closure = _weighted_sum(lambda: block(x), [], rng)
    results.append(CheckResult('conv_block', grad_check(closure, [x] + block.parameters(),
                                                        tol=LAYER_TOLERANCE, max_elements=8)))

    unet = UNet(UNetConfig(channels=(2, 3), in_channels=1, out_channels=2, resolution=4), rng)
    x = parameter(rng.normal(size=(2, 1, 4, 4)))
    closure = _weighted_sum(lambda: unet(x), [], rng)
    results.append(CheckResult('unet', grad_check(closure, [x] + unet.parameters(),
                                                  tol=LAYER_TOLERANCE, max_elements=4)))

    transfer = TransferLayer(3, 2, rng)
    h = parameter(rng.normal(size=(2, 3, 4, 5)))

    def attention():
        maps = spatial_softmax(transfer(h))
        return soft_argmax(maps).coords

    closure = _weighted_sum(attention, [], rng)
    results.append(CheckResult('attention', grad_check(closure, [h, transfer.weight,
                                                                 transfer.bias],
                                                       tol=LAYER_TOLERANCE)))

    image = parameter(rng.uniform(size=(2, 1, 3, 3)))
    embedding = parameter(rng.normal(size=(2, 2, 3, 3)))
    logits = parameter(rng.normal(size=(2, 2, 3, 3)))
    for kind in FusionKind:
        closure = _weighted_sum(
            lambda k=kind: fuse(k, image, embedding, aggregate_mask(spatial_softmax(logits))),
            [], rng)
        results.append(CheckResult(f"fusion_{kind.value}",
                                   grad_check(closure, [image, embedding, logits],
                                              tol=OP_TOLERANCE)))
    return results


def micro_cascade(seed: int = 0) -> Tuple[CascadeModel, Callable[[], Tensor]]:
    """S=2, K=2, 16x16: modèle et perte intermédiaire sur un batch aléatoire fixé"""
    rng = np.random.default_rng(seed)
    markups = (Markup('fine4', tuple(f"p{i}" for i in range(4)), interocular=(0, 1)),
               Markup('coarse2', ('a', 'b'), interocular=(0, 1)))
    config = CascadeConfig(markups=markups, stages=2, channels=(4, 8), embed_channels=4,
                           resolution=16, image_channels=1)
    model = CascadeModel(config, seed=seed)
    image = Tensor(rng.uniform(size=(2, 1, 16, 16)))
    targets = {m.name: rng.uniform(0.2, 0.8, (2, m.num_landmarks, 2)) for m in markups}
    presence = {'fine4': np.array([1.0, 0.0]), 'coarse2': np.array([1.0, 1.0])}
    lambdas = config.lambda_values()

    def loss():
        return intermediate_loss(model(image), targets, presence, lambdas).total

    return model, loss


def cascade_check(seed: int = 0, max_elements: int = 3,
                  instances: int = 10) -> List[CheckResult]:
    """Pire rapport sur instances micro-cascades (poids, batch et cibles tirés par graine)"""
    worst = None
    checked = 0
    for offset in range(instances):
        model, loss = micro_cascade(seed + offset)
        report = grad_check(loss, model.parameters(), eps=1e-6, tol=CASCADE_TOLERANCE,
                            max_elements=max_elements, seed=seed + offset)
        checked += report.checked_elements
        if worst is None or report.max_relative_error > worst.max_relative_error:
            worst = report
    worst.checked_elements = checked
    return [CheckResult('micro_cascade', worst)]


def run_suite(scope: str = 'all', seed: int = 0) -> List[CheckResult]:
    if scope not in SCOPES:
        raise ValueError(f"Portée de vérification non supportée: {scope}")
    logger = CascadeLogger()
    results = []
    if scope in ('ops', 'all'):
        results.extend(op_checks(seed=seed))
    if scope in ('layers', 'all'):
        results.extend(layer_checks(seed=seed))
    if scope in ('cascade', 'all'):
        results.extend(cascade_check(seed=seed))
    for result in results:
        log = logger.info if result.passed else logger.error
        log(f"GRADCHECK - {result.name}: {result.report}")
    failed = [r.name for r in results if not r.passed]
    logger.info(f"Vérification des gradients: {len(results) - len(failed)}/{len(results)} OK"
                + (f" - échecs: {', '.join(failed)}" if failed else ''))
    return results
