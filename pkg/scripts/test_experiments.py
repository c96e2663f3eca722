#!/usr/bin/env python3
"""
Tests des expériences directionnelles. Les exécutions complètes sont longues:
RUN_SLOW=1 pytest scripts/test_experiments.py
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import pytest

from evaluation.experiments import (
    DESK_CHANNELS, EXPERIMENTS, ExperimentResult, experiment_config, micro_overfit, run_seeds,
    weak_supervision, win_count,
)

slow = pytest.mark.skipif(os.getenv('RUN_SLOW') != '1', reason="RUN_SLOW=1 requis")


def test_experiment_config_overrides(tmp_path):
    run = experiment_config(str(tmp_path), stages=3, fusion='F2', markups=('lm68', 'lm5'))
    assert run.channels == DESK_CHANNELS
    assert (run.stages, run.fusion, run.markups) == (3, 'F2', ('lm68', 'lm5'))
    assert run.checkpoint_every == 0 and run.prefetch == 0
    assert run.output_dir == str(tmp_path)


def test_win_count():
    results = [ExperimentResult('x', seed, passed=seed % 2 == 0) for seed in range(5)]
    assert win_count(results) == 3
    assert win_count([]) == 0


def test_unknown_experiment(tmp_path):
    with pytest.raises(ValueError):
        run_seeds('grid_search', [0], str(tmp_path))


def test_weak_supervision_smoke(tmp_path):
    result = weak_supervision(0, str(tmp_path), updates=2, fine_count=2, coarse_count=2,
                              eval_count=2, resolution=8, stages=1)
    assert set(result.metrics) == {'me_fine_only', 'me_fine_coarse'}
    assert all(value >= 0.0 for value in result.metrics.values())
    assert os.path.isfile(os.path.join(str(tmp_path), 'weak_0_joint', 'checkpoint.bin'))


@pytest.mark.slow
@slow
def test_micro_cascade_overfits(tmp_path):
    result = micro_overfit(0, str(tmp_path))
    assert result.metrics['loss_drop'] >= 10.0
    assert result.metrics['me_lm68'] < 0.02


@pytest.mark.slow
@slow
def test_cascade_refinement_holds_on_every_seed(tmp_path):
    results = run_seeds('cascade_refinement', range(5), str(tmp_path))
    assert win_count(results) == 5


@pytest.mark.slow
@slow
def test_ablation_comparisons_hold_separately(tmp_path):
    results = run_seeds('ablation', range(5), str(tmp_path))
    # Chaque comparaison est comptée à part
    f5_wins = sum(r.metrics['me_reference'] <= r.metrics['me_F2'] for r in results)
    schedule_wins = sum(r.metrics['me_reference'] <= r.metrics['me_decreasing']
                        for r in results)
    assert f5_wins >= 4
    assert schedule_wins >= 4


@pytest.mark.slow
@slow
def test_weak_supervision_mostly_helps(tmp_path):
    assert 'weak_supervision' in EXPERIMENTS
    results = run_seeds('weak_supervision', range(5), str(tmp_path))
    assert win_count(results) >= 4
