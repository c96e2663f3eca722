#!/usr/bin/env python3
"""
Tests de la cascade: configuration, passe avant, perte à supervision intermédiaire
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from autodiff.tensor import ShapeError, Tape, Tensor
from config import RunConfig
from dataset.synthetic import builtin_registry
from network.attention import LandmarkSet
from network.cascade import (
    CascadeConfig, CascadeModel, CascadeOutput, StageOutput, intermediate_loss, lambda_schedule,
)
from network.fusion import FusionKind
from network.heads import HeadOutput, HeadStackOutput, Markup, MarkupError

FINE = Markup('fine4', tuple(f"p{i}" for i in range(4)), interocular=(0, 1))
COARSE = Markup('coarse2', ('a', 'b'), interocular=(0, 1))


def tiny_config(**overrides):
    values = dict(markups=(FINE, COARSE), stages=2, channels=(2, 2), embed_channels=2,
                  resolution=4)
    values.update(overrides)
    return CascadeConfig(**values)


def images(count=2, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(size=(count, 1, 4, 4)))


def test_lambda_schedules():
    assert lambda_schedule('increasing', 4) == (0.125, 0.25, 0.5, 1.0)
    assert lambda_schedule('decreasing', 3) == (1.0, 0.5, 0.25)
    assert lambda_schedule('constant', 2) == (1.0, 1.0)
    with pytest.raises(ValueError):
        lambda_schedule('cosine', 2)


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(lambdas=(1.0,))
    with pytest.raises(ValueError):
        tiny_config(lambdas=(0.0, 0.0))
    with pytest.raises(ValueError):
        tiny_config(lambdas=(-1.0, 2.0))
    with pytest.raises(ValueError):
        tiny_config(fusion_markup=2)
    with pytest.raises(MarkupError):
        tiny_config(markups=(COARSE, FINE))
    assert tiny_config(lambdas=(0.0, 1.0)).lambda_values() == (0.0, 1.0)


def test_stage_input_channels():
    config = tiny_config(fusion=FusionKind.F4)
    assert config.stage_input_channels(0) == 1
    assert config.stage_input_channels(1) == 2 * 1 + 2


def test_from_run_config_resolves_markups():
    run = RunConfig.from_text("STAGES=2\nMARKUPS=lm68,lm5\nCHANNELS=4,4\nEMBED_CHANNELS=4\n"
                              "RESOLUTION=8\nFUSION=F3\n")
    config = CascadeConfig.from_run_config(run, builtin_registry())
    assert [m.name for m in config.markups] == ['lm68', 'lm5']
    assert config.fusion is FusionKind.F3
    assert config.lambda_values() == (0.5, 1.0)


def test_forward_shapes_and_range():
    model = CascadeModel(tiny_config(), seed=0)
    output = model(images())
    assert len(output) == 2
    predictions = output.predictions()
    assert predictions['fine4'].shape == (2, 4, 2)
    assert predictions['coarse2'].shape == (2, 2, 2)
    for stage in range(2):
        for values in output.predictions(stage).values():
            assert np.all((values >= 0.0) & (values <= 1.0))
    assert output.final.mask.mask.shape == (2, 1, 4, 4)
    assert len(model(images(), stages_used=1)) == 1
    with pytest.raises(ValueError):
        model(images(), stages_used=3)
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros((2, 1, 8, 8))))


def test_single_stage_performs_no_fusion():
    output = CascadeModel(tiny_config(stages=1), seed=0)(images())
    assert len(output) == 1
    assert output.stages[0].input.shape == (2, 1, 4, 4)


def test_f1_feeds_the_embedding_forward():
    output = CascadeModel(tiny_config(fusion='F1'), seed=1)(images())
    assert output.stages[1].input is output.stages[0].embedding


def test_forward_is_deterministic_in_eval_mode():
    model = CascadeModel(tiny_config(), seed=2).eval()
    first = model(images()).predictions()
    second = model(images()).predictions()
    for name in first:
        assert first[name].tobytes() == second[name].tobytes()


def test_single_markup_chained_equals_independent():
    chained = CascadeModel(tiny_config(markups=(FINE,), head_mode='chained'), seed=3)
    independent = CascadeModel(tiny_config(markups=(FINE,), head_mode='independent'), seed=3)
    a = chained(images()).predictions()['fine4']
    b = independent(images()).predictions()['fine4']
    assert np.array_equal(a, b)


def hand_output(pred):
    entry = HeadOutput(COARSE, None, None, LandmarkSet(Tensor(pred), 'coarse2'))
    return CascadeOutput([StageOutput(0, None, None, HeadStackOutput([entry]), None)])


def test_loss_hand_computation():
    pred = np.array([[[0.1, 0.2], [0.3, 0.4]]])
    target = np.array([[[0.2, 0.3], [0.3, 0.2]]])
    breakdown = intermediate_loss(hand_output(pred), {'coarse2': target},
                                  {'coarse2': np.ones(1)}, (1.0,))
    assert breakdown.total.item() == pytest.approx(0.2)
    assert breakdown.stage_losses() == pytest.approx({0: 0.2})
    assert breakdown.markup_losses() == pytest.approx({'coarse2': 0.2})


def test_loss_is_zero_when_predictions_match():
    model = CascadeModel(tiny_config(), seed=4)
    output = model(images())
    targets = output.predictions(0)
    presence = {name: np.ones(2) for name in targets}
    breakdown = intermediate_loss(output, targets, presence, (1.0, 0.0))
    assert breakdown.total.item() == pytest.approx(0.0, abs=1e-15)


def test_loss_rejects_mismatched_targets():
    with pytest.raises(MarkupError):
        intermediate_loss(hand_output(np.zeros((1, 2, 2))), {'coarse2': np.zeros((1, 3, 2))},
                          {}, (1.0,))


def loss_and_grads(model, targets, presence):
    with Tape() as tape:
        breakdown = intermediate_loss(model(images()), targets, presence,
                                      model.config.lambda_values())
    grads = tape.backward(breakdown.total)
    return breakdown.total.item(), [grads.get(p) for p in model.parameters()]


def test_absent_targets_do_not_affect_loss_or_gradients():
    model = CascadeModel(tiny_config(), seed=5)
    rng = np.random.default_rng(6)
    targets = {'fine4': rng.uniform(size=(2, 4, 2)), 'coarse2': rng.uniform(size=(2, 2, 2))}
    presence = {'fine4': np.array([1.0, 0.0]), 'coarse2': np.ones(2)}
    altered = {'fine4': targets['fine4'].copy(), 'coarse2': targets['coarse2']}
    altered['fine4'][1] = rng.uniform(size=(4, 2))

    loss_a, grads_a = loss_and_grads(model, targets, presence)
    loss_b, grads_b = loss_and_grads(model, altered, presence)
    assert loss_a == loss_b
    for a, b in zip(grads_a, grads_b):
        assert (a is None and b is None) or np.array_equal(a, b)


def test_chained_heads_propagate_coarse_loss_to_fine_head():
    targets = {'coarse2': np.full((2, 2, 2), 0.3)}
    presence = {'coarse2': np.ones(2)}
    for mode, expect_gradient in (('chained', True), ('independent', False)):
        model = CascadeModel(tiny_config(stages=1, head_mode=mode), seed=7)
        fine_head = model.stages[0].heads.transfers[0]
        with Tape() as tape:
            loss = intermediate_loss(model(images()), targets, presence, (1.0,)).total
        grads = tape.backward(loss)
        gradient = grads.get(fine_head.weight)
        has_gradient = gradient is not None and np.abs(gradient).max() > 0.0
        assert has_gradient == expect_gradient, mode
