#!/usr/bin/env python3
"""
Tests des métriques: erreur normalisée, AUC, taux d'échec, CED
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import math

import numpy as np
import pytest

from evaluation.metrics import (
    CED_POINTS, NormSpec, ZeroNormError, auc_fr, batch_errors, ced_curve, mean_error,
    norm_distance, normalized_error,
)
from network.heads import Markup, MarkupError

PAIR = Markup('pair', ('l', 'r'), interocular=(0, 1))
FOUR = Markup('four', ('a', 'b', 'c', 'd'), interocular=(0, 3), pupils=((0, 1), (2, 3)))


def test_identical_points_have_zero_error():
    gt = np.array([[0.2, 0.3], [0.7, 0.3]])
    assert normalized_error(gt, gt, PAIR) == 0.0


def test_offset_by_interocular_distance_is_one():
    gt = np.array([[0.2, 0.3], [0.7, 0.3]])
    assert normalized_error(gt + [0.0, 0.5], gt, PAIR) == pytest.approx(1.0)


def test_hand_computed_error():
    gt = np.array([[0.0, 0.0], [0.5, 0.0]])
    pred = gt + np.array([[0.03, 0.0], [0.0, 0.04]])
    assert normalized_error(pred, gt, PAIR) == pytest.approx(0.07)


def test_pupil_and_custom_normalizations():
    gt = np.array([[0.0, 0.0], [0.0, 0.2], [0.4, 0.0], [0.4, 0.2]])
    assert norm_distance(gt, FOUR, NormSpec('pupil')) == pytest.approx(0.4)
    assert norm_distance(gt, FOUR, NormSpec.parse('custom:0,1')) == pytest.approx(0.2)
    assert norm_distance(gt, FOUR, NormSpec.parse('custom:0,1/2,3')) == pytest.approx(0.4)
    with pytest.raises(MarkupError):
        norm_distance(gt[:2], PAIR, NormSpec('pupil'))
    with pytest.raises(MarkupError):
        norm_distance(gt, FOUR, NormSpec.parse('custom:0,9'))


@pytest.mark.parametrize("text", ['outer', 'custom:', 'custom:a,b', 'custom:1,2,3'])
def test_invalid_norm_specs(text):
    with pytest.raises(ValueError):
        NormSpec.parse(text)


def test_zero_norm_examples_are_excluded():
    gt = np.array([[[0.5, 0.5], [0.5, 0.5]], [[0.0, 0.0], [1.0, 0.0]]])
    with pytest.raises(ZeroNormError):
        normalized_error(gt[0], gt[0], PAIR)
    errors, excluded = batch_errors(gt, gt, PAIR)
    assert excluded == 1
    assert errors.tolist() == [0.0]


def test_shape_mismatch_is_rejected():
    with pytest.raises(MarkupError):
        normalized_error(np.zeros((3, 2)), np.zeros((2, 2)), PAIR)


def test_auc_and_failure_rate():
    assert auc_fr([0.0, 0.0]) == (1.0, 0.0)
    assert auc_fr([0.2, 0.5]) == (0.0, 1.0)
    auc, fr = auc_fr([0.05, 0.15])
    assert auc == pytest.approx(0.25)
    assert fr == 0.5
    with pytest.raises(ValueError):
        auc_fr([])


def test_auc_matches_dense_integration():
    errors = np.random.default_rng(0).uniform(0.0, 0.15, 50)
    thresholds = np.linspace(0.0, 0.1, 200001)
    fractions = (errors[None, :] <= thresholds[:, None]).mean(axis=1)
    dense = np.trapz(fractions, thresholds) / 0.1
    assert auc_fr(errors)[0] == pytest.approx(dense, abs=1e-4)


def test_ced_curve():
    thresholds, fractions = ced_curve([0.1])
    assert len(thresholds) == CED_POINTS
    assert thresholds[0] == 0.0 and thresholds[-1] == pytest.approx(0.2)
    assert np.array_equal(fractions, (thresholds >= 0.1).astype(float))
    assert ced_curve([0.01, 0.19])[1][-1] == 1.0
    assert not ced_curve([])[1].any()
    assert np.all(np.diff(ced_curve(np.random.default_rng(1).uniform(0, 0.3, 40))[1]) >= 0)


def test_mean_error():
    assert mean_error([0.1, 0.3]) == pytest.approx(0.2)
    assert mean_error([]) is None


def brute_force_auc_fr(errors, threshold=0.1):
    """Intégrale de la CED segment par segment entre erreurs triées"""
    n = len(errors)
    cuts = sorted(e for e in errors if e < threshold)
    area, previous = 0.0, 0.0
    below = sum(1 for e in errors if e <= 0.0)
    for cut in cuts + [threshold]:
        cut = max(cut, 0.0)
        area += (cut - previous) * below / n
        below = sum(1 for e in errors if e <= cut)
        previous = cut
    failures = sum(1 for e in errors if e > threshold)
    return area / threshold, failures / n


def brute_force_error(pred, gt, first, second):
    norm = math.hypot(gt[first][0] - gt[second][0], gt[first][1] - gt[second][1])
    total = sum(math.hypot(p[0] - g[0], p[1] - g[1]) for p, g in zip(pred, gt))
    return total / len(gt) / norm


def test_metrics_match_brute_force_on_random_sets():
    rng = np.random.default_rng(20)
    markup = Markup('six', tuple(f"p{i}" for i in range(6)), interocular=(0, 3))
    for _ in range(1000):
        count = int(rng.integers(1, 40))
        errors = rng.uniform(0.0, 0.2, count)
        errors[rng.random(count) < 0.1] = 0.1
        errors[rng.random(count) < 0.05] = 0.0
        auc, fr = auc_fr(errors)
        expected_auc, expected_fr = brute_force_auc_fr(errors.tolist())
        assert abs(auc - expected_auc) < 1e-12
        assert fr == expected_fr

        thresholds, fractions = ced_curve(errors)
        expected = np.array([sum(1 for e in errors if e <= t) / count for t in thresholds[::37]])
        assert np.abs(fractions[::37] - expected).max() < 1e-12

        gt = rng.uniform(0.1, 0.9, (6, 2))
        pred = gt + rng.normal(0.0, 0.02, (6, 2))
        assert abs(normalized_error(pred, gt, markup)
                   - brute_force_error(pred.tolist(), gt.tolist(), 0, 3)) < 1e-12


def test_error_is_invariant_to_similarity_transforms():
    rng = np.random.default_rng(21)
    markup = Markup('six', tuple(f"p{i}" for i in range(6)), interocular=(0, 3),
                    pupils=((0, 1), (3, 4)))
    for _ in range(200):
        gt = rng.uniform(0.2, 0.8, (6, 2))
        pred = gt + rng.normal(0.0, 0.03, (6, 2))
        theta = rng.uniform(-np.pi, np.pi)
        rotation = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        scale = rng.uniform(0.2, 5.0)
        shift = rng.uniform(-3.0, 3.0, 2)

        def move(points):
            return scale * points @ rotation.T + shift

        for norm in (NormSpec(), NormSpec('pupil')):
            assert normalized_error(move(pred), move(gt), markup, norm) == pytest.approx(
                normalized_error(pred, gt, markup, norm), abs=1e-9)
