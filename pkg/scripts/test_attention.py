#!/usr/bin/env python3
"""
Tests des cartes d'attention: softmax spatial, soft-argmax, masque agrégé
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from autodiff.tensor import ShapeError, Tensor
from network.attention import (
    TransferLayer, aggregate_mask, normalized_grid, soft_argmax, spatial_softmax, to_normalized,
    to_pixels, transfer_layer,
)


def test_maps_are_probability_distributions():
    logits = np.random.default_rng(0).normal(0.0, 5.0, (2, 3, 4, 6))
    maps = spatial_softmax(Tensor(logits), markup='lm5', stage=1)
    assert maps.maps.shape == (2, 3, 4, 6)
    assert maps.num_landmarks == 3
    assert (maps.markup, maps.stage) == ('lm5', 1)
    assert np.all(maps.maps.data >= 0.0)
    assert np.allclose(maps.maps.data.sum(axis=(2, 3)), 1.0)


def test_softmax_is_shift_invariant_and_stable():
    logits = np.random.default_rng(1).normal(size=(1, 2, 3, 3))
    base = spatial_softmax(Tensor(logits)).maps.data
    shifted = spatial_softmax(Tensor(logits + 1000.0)).maps.data
    assert np.all(np.isfinite(shifted))
    assert np.allclose(base, shifted, atol=1e-12)


def test_uniform_map_points_to_center():
    maps = spatial_softmax(Tensor(np.zeros((1, 2, 5, 7))))
    assert np.allclose(soft_argmax(maps).values, 0.5)


def test_peaked_map_points_to_its_pixel():
    logits = np.zeros((1, 1, 4, 5))
    logits[0, 0, 1, 3] = 60.0
    coords = soft_argmax(spatial_softmax(Tensor(logits))).values
    assert coords.shape == (1, 1, 2)
    assert np.allclose(coords[0, 0], [3 / 4, 1 / 3], atol=1e-9)


def test_single_pixel_axis_maps_to_half():
    assert normalized_grid(1).tolist() == [0.5]
    coords = soft_argmax(spatial_softmax(Tensor(np.random.default_rng(2).normal(size=(1, 1, 1, 4)))))
    assert np.allclose(coords.values[..., 1], 0.5)


def test_mask_sums_to_landmark_count():
    maps = spatial_softmax(Tensor(np.random.default_rng(3).normal(size=(2, 4, 3, 3))))
    mask = aggregate_mask(maps).mask
    assert mask.shape == (2, 1, 3, 3)
    assert np.allclose(mask.data.sum(axis=(1, 2, 3)), 4.0)


def test_transfer_layer_is_a_1x1_convolution():
    layer = TransferLayer(3, 2, np.random.default_rng(4))
    x = np.random.default_rng(5).normal(size=(1, 3, 2, 2))
    expected = np.einsum('lc,ncyx->nlyx', layer.weight.data[:, :, 0, 0], x)
    assert np.allclose(layer(Tensor(x)).data, expected)
    with pytest.raises(ShapeError):
        transfer_layer(Tensor(x), Tensor(np.zeros((2, 3, 3, 3))))
    with pytest.raises(ShapeError):
        layer(Tensor(np.zeros((1, 2, 2, 2))))


def test_pixel_conversion_is_explicit():
    coords = np.array([[0.0, 1.0], [0.5, 0.25]])
    pixels = to_pixels(coords, width=11, height=5)
    assert np.allclose(pixels, [[0.0, 4.0], [5.0, 1.0]])
    assert np.allclose(to_normalized(pixels, 11, 5), coords)


RANDOM_MAPS = 10000


def test_random_maps_are_normalized_and_shift_invariant():
    rng = np.random.default_rng(10)
    logits = rng.normal(0.0, 5.0, (RANDOM_MAPS, 1, 4, 5))
    maps = spatial_softmax(Tensor(logits)).maps.data
    assert np.abs(maps.sum(axis=(2, 3)) - 1.0).max() < 1e-9
    shifts = rng.uniform(-50.0, 50.0, (RANDOM_MAPS, 1, 1, 1))
    shifted = spatial_softmax(Tensor(logits + shifts)).maps.data
    assert np.abs(shifted - maps).max() < 1e-12
    coords = soft_argmax(spatial_softmax(Tensor(logits))).values
    assert coords.min() >= 0.0 and coords.max() <= 1.0


def test_dominant_peak_is_tracked_within_half_a_pixel():
    rng = np.random.default_rng(11)
    height, width = 4, 5
    flat = rng.normal(0.0, 3.0, (RANDOM_MAPS, height * width))
    peaks = rng.integers(0, height * width, RANDOM_MAPS)
    rows = np.arange(RANDOM_MAPS)
    flat[rows, peaks] = flat.max(axis=1) + 20.0 + rng.uniform(0.0, 5.0, RANDOM_MAPS)
    coords = soft_argmax(spatial_softmax(Tensor(flat.reshape(RANDOM_MAPS, 1, height, width))))
    values = coords.values[:, 0]
    expected_x = (peaks % width) / (width - 1)
    expected_y = (peaks // width) / (height - 1)
    assert np.all(np.abs(values[:, 0] - expected_x) <= 0.5 / (width - 1))
    assert np.all(np.abs(values[:, 1] - expected_y) <= 0.5 / (height - 1))
