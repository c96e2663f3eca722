#!/usr/bin/env python3
"""
Tests des schémas de fusion F1 à F5
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from autodiff.tensor import ShapeError, Tensor
from network.attention import AggregatedMask
from network.fusion import FusionKind, fuse

RNG = np.random.default_rng(0)
IMAGE = Tensor(RNG.uniform(size=(2, 1, 4, 4)))
EMBEDDING = Tensor(RNG.normal(size=(2, 3, 4, 4)))
MASK = AggregatedMask(Tensor(RNG.uniform(size=(2, 1, 4, 4))))


@pytest.mark.parametrize("kind", list(FusionKind))
def test_channel_count_matches_declaration(kind):
    out = fuse(kind, IMAGE, EMBEDDING, MASK)
    assert out.shape == (2, kind.out_channels(1, 3), 4, 4)


def test_f1_returns_the_embedding():
    assert fuse(FusionKind.F1, IMAGE, EMBEDDING, MASK) is EMBEDDING


def test_f2_with_constant_masks():
    ones = Tensor(np.ones((2, 1, 4, 4)))
    zeros = Tensor(np.zeros((2, 1, 4, 4)))
    assert np.array_equal(fuse('F2', IMAGE, EMBEDDING, ones).data, IMAGE.data)
    assert not fuse('F2', IMAGE, EMBEDDING, zeros).data.any()


def test_f5_concatenation_order():
    out = fuse(FusionKind.F5, IMAGE, EMBEDDING, MASK).data
    m = MASK.mask.data
    assert np.array_equal(out[:, :1], IMAGE.data)
    assert np.allclose(out[:, 1:2], IMAGE.data * m)
    assert np.array_equal(out[:, 2:5], EMBEDDING.data)
    assert np.allclose(out[:, 5:8], EMBEDDING.data * m)
    assert FusionKind.F5.out_channels(1, 8) == 18


def test_f4_concatenation_order():
    out = fuse(FusionKind.F4, IMAGE, EMBEDDING, MASK).data
    assert np.allclose(out[:, 2:5], EMBEDDING.data * MASK.mask.data)


def test_parse_and_shape_errors():
    assert FusionKind.parse('f3') is FusionKind.F3
    with pytest.raises(ValueError):
        FusionKind.parse('F6')
    with pytest.raises(ShapeError):
        fuse('F3', IMAGE, EMBEDDING, Tensor(np.ones((2, 2, 4, 4))))
    with pytest.raises(ShapeError):
        fuse('F3', IMAGE, Tensor(np.ones((2, 3, 2, 2))), MASK)


@pytest.mark.parametrize("kind", [FusionKind.F2, FusionKind.F3, FusionKind.F4, FusionKind.F5])
def test_fusion_is_local_to_each_pixel(kind):
    rng = np.random.default_rng(5)
    image = Tensor(rng.uniform(size=(2, 1, 5, 6)))
    embedding = Tensor(rng.normal(size=(2, 3, 5, 6)))
    mask = rng.uniform(0.1, 2.0, (2, 1, 5, 6))
    zeroed = rng.random((2, 1, 5, 6)) < 0.4
    mask[zeroed] = 0.0
    out = fuse(kind, image, embedding, AggregatedMask(Tensor(mask))).data

    # Blocs masqués nuls là où M = 0, blocs non masqués inchangés partout
    layout = {
        FusionKind.F2: [('masked', image)],
        FusionKind.F3: [('plain', image), ('masked', image)],
        FusionKind.F4: [('plain', image), ('masked', image), ('masked', embedding)],
        FusionKind.F5: [('plain', image), ('masked', image), ('plain', embedding),
                        ('masked', embedding)],
    }[kind]
    start = 0
    for role, source in layout:
        block = out[:, start:start + source.shape[1]]
        start += source.shape[1]
        if role == 'plain':
            assert np.array_equal(block, source.data)
        else:
            assert np.array_equal(block, source.data * mask)
            assert not np.broadcast_to(zeroed, block.shape)[block != 0.0].any()
    assert start == out.shape[1]

    # Modifier un pixel de l'entrée ne change la sortie qu'à ce pixel
    perturbed_image = image.data.copy()
    perturbed_image[1, 0, 2, 3] += 1.0
    perturbed_embedding = embedding.data.copy()
    perturbed_embedding[1, :, 2, 3] -= 1.0
    moved = fuse(kind, Tensor(perturbed_image), Tensor(perturbed_embedding),
                 AggregatedMask(Tensor(mask))).data
    changed = np.argwhere(moved != out)
    assert {(n, y, x) for n, _, y, x in changed} <= {(1, 2, 3)}
