from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from autodiff.tensor import (
    ShapeError, Tensor, concat, conv2d, max_pool2, parameter, relu, upsample_bilinear2,
)


class Module:
    """Base des blocs du réseau: parcours des paramètres et des buffers nommés"""

    training = True
    buffer_names: Tuple[str, ...] = ()

    def _walk(self, prefix: str = '') -> Iterator[Tuple[str, 'Module', str, str]]:
        # (nom complet, module propriétaire, attribut, 'param' | 'buffer')
        for attr, value in vars(self).items():
            full = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, self, attr, 'param'
            elif isinstance(value, Module):
                yield from value._walk(full + '.')
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{full}.{index}.")
        for attr in self.buffer_names:
            yield f"{prefix}{attr}", self, attr, 'buffer'

    def modules(self) -> Iterator['Module']:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(name, getattr(owner, attr))
                for name, owner, attr, kind in self._walk() if kind == 'param']

    def parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(tensor.size for tensor in self.parameters()))

    def state_dict(self) -> 'OrderedDict[str, np.ndarray]':
        """Paramètres puis buffers, dans l'ordre de construction"""
        state = OrderedDict()
        for name, owner, attr, kind in self._walk():
            value = getattr(owner, attr)
            state[name] = (value.data if kind == 'param' else value).copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        expected = {name: (owner, attr, kind) for name, owner, attr, kind in self._walk()}
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        if missing or unexpected:
            raise KeyError(f"État incompatible - manquants: {missing[:5]}, inattendus: "
                           f"{unexpected[:5]}")
        for name, (owner, attr, kind) in expected.items():
            current = getattr(owner, attr)
            shape = current.shape
            if state[name].shape != shape:
                raise ShapeError('load_state', f"{name}: forme {state[name].shape} != {shape}")
            if kind == 'param':
                current.data[...] = state[name]
            else:
                setattr(owner, attr, np.array(state[name], dtype=np.float64))

    def train(self) -> 'Module':
        for module in self.modules():
            module.training = True
        return self

    def eval(self) -> 'Module':
        for module in self.modules():
            module.training = False
        return self


class Conv2dLayer(Module):
    """Convolution k x k, padding 'same', initialisation normale de variance 2/fan_in"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: str = 'same', rng: Optional[np.random.Generator] = None,
                 gain: float = 2.0):
        if kernel_size % 2 == 0:
            raise ShapeError('conv2d', f"taille de noyau impaire requise, reçu {kernel_size}")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = parameter(rng.normal(0.0, np.sqrt(gain / fan_in),
                                           (out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = parameter(np.zeros(out_channels))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError('conv2d', f"entrée {x.shape}: {self.in_channels} canaux attendus")
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNormLayer(Module):
    """Normalisation par batch sur (N, Y, X) pour chaque canal"""

    buffer_names = ('running_mean', 'running_var')

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError('batchnorm', f"entrée {x.shape}: {self.channels} canaux attendus")
        shape = (1, self.channels, 1, 1)

        if self.training:
            n, _, h, w = x.shape
            if n < 2:
                raise ShapeError('batchnorm', "un batch d'au moins 2 exemples est requis en "
                                              "mode entraînement")
            batch_mean = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - batch_mean
            batch_var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
            normalized = centered / (batch_var + self.eps).sqrt()

            # Statistiques glissantes (variance non biaisée)
            count = n * h * w
            unbiased = batch_var.data.reshape(-1) * count / max(count - 1, 1)
            self.running_mean = ((1.0 - self.momentum) * self.running_mean
                                 + self.momentum * batch_mean.data.reshape(-1))
            self.running_var = (1.0 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            normalized = ((x - Tensor(self.running_mean.reshape(shape)))
                          / Tensor(np.sqrt(self.running_var + self.eps).reshape(shape)))

        return normalized * self.gamma.reshape(shape) + self.beta.reshape(shape)


class ConvBlock(Module):
    """conv 3x3 -> batchnorm -> ReLU"""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.conv = Conv2dLayer(in_channels, out_channels, 3, rng=rng)
        self.norm = BatchNormLayer(out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.norm(self.conv(x)))


@dataclass(frozen=True)
class UNetConfig:
    channels: Tuple[int, ...] = (64, 64, 128, 128, 256, 256)
    in_channels: int = 1
    out_channels: int = 64
    resolution: int = 128

    def __post_init__(self):
        if not self.channels or len(self.channels) % 2:
            raise ValueError(f"Plan de canaux de longueur paire requis, reçu {self.channels}")
        if min(self.channels) <= 0 or self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError("Les nombres de canaux doivent être positifs")
        if self.resolution % (2 ** self.levels):
            raise ValueError(f"Résolution {self.resolution} non divisible par 2^{self.levels}")

    @property
    def levels(self) -> int:
        return len(self.channels) // 2


class UNet(Module):
    """U-net: (conv-bn-relu x2, max pool) par niveau, puis (upsample bilinéaire, concat du
    niveau symétrique, conv-bn-relu x2), et une conv-bn-relu finale à pleine résolution"""

    def __init__(self, config: UNetConfig, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        channels = config.channels

        self.down_blocks = []
        current = config.in_channels
        for level in range(config.levels):
            self.down_blocks.append(ConvBlock(current, channels[2 * level], rng))
            self.down_blocks.append(ConvBlock(channels[2 * level], channels[2 * level + 1], rng))
            current = channels[2 * level + 1]

        # Chemin montant, du niveau le plus profond au plus fin
        self.up_blocks = []
        for level in reversed(range(config.levels)):
            skip = channels[2 * level + 1]
            self.up_blocks.append(ConvBlock(current + skip, channels[2 * level + 1], rng))
            self.up_blocks.append(ConvBlock(channels[2 * level + 1], channels[2 * level], rng))
            current = channels[2 * level]

        self.output_block = ConvBlock(current, config.out_channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        config = self.config
        if x.ndim != 4 or x.shape[1] != config.in_channels:
            raise ShapeError('unet', f"entrée {x.shape}: {config.in_channels} canaux attendus")
        if x.shape[2:] != (config.resolution, config.resolution):
            raise ShapeError('unet', f"résolution {x.shape[2:]} != {config.resolution}")

        skips = []
        h = x
        for level in range(config.levels):
            h = self.down_blocks[2 * level + 1](self.down_blocks[2 * level](h))
            skips.append(h)
            h = max_pool2(h)

        for step, level in enumerate(reversed(range(config.levels))):
            h = upsample_bilinear2(h)
            h = concat([h, skips[level]], axis=1)
            h = self.up_blocks[2 * step + 1](self.up_blocks[2 * step](h))

        return self.output_block(h)


bilinear_upsample2 = upsample_bilinear2


def batchnorm(x: Tensor, layer: BatchNormLayer, mode: str = 'train') -> Tensor:
    """Applique une couche de batchnorm dans le mode demandé ('train' ou 'eval')"""
    if mode not in ('train', 'eval'):
        raise ValueError(f"Mode de batchnorm non supporté: {mode}")
    layer.training = mode == 'train'
    return layer(x)
