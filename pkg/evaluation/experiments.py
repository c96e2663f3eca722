"""
Expériences directionnelles à petite échelle sur visages synthétiques: sur-apprentissage d'un
micro-modèle, raffinement par étage, ablations (fusion, poids des étages) et apport d'un markup
grossier abondant à l'apprentissage d'un markup fin
"""

import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from config import RunConfig, format_value
from dataset.annotations import LandmarkDataset
from dataset.synthetic import builtin_registry, generate_dataset
from evaluation.evaluator import CascadeEvaluator, EvaluationReport
from network.cascade import CascadeConfig, CascadeModel
from training.trainer import CascadeTrainer, TrainConfig, TrainResult
from utils.logger import CascadeLogger

DESK_CHANNELS = (8, 8, 16, 16)
DESK_EMBED = 8


@dataclass
class ExperimentResult:
    name: str
    seed: int
    metrics: Dict[str, float] = field(default_factory=dict)
    passed: bool = False


def experiment_config(output_dir: str, **overrides) -> RunConfig:
    """RunConfig à l'échelle du poste de travail, surchargée par des clés en minuscules"""
    values = {'channels': DESK_CHANNELS, 'embed_channels': DESK_EMBED, 'checkpoint_every': 0,
              'prefetch': 0, 'output_dir': output_dir}
    values.update(overrides)
    text = ''.join(f"{key.upper()}={format_value(value)}\n" for key, value in values.items())
    return RunConfig.from_text(text)


def train_and_evaluate(run: RunConfig, train_sets: Sequence[LandmarkDataset],
                       eval_set: LandmarkDataset) -> Tuple[CascadeModel, TrainResult,
                                                           EvaluationReport]:
    registry = builtin_registry()
    model = CascadeModel(CascadeConfig.from_run_config(run, registry), seed=run.seed)
    trainer = CascadeTrainer(model, TrainConfig.from_run_config(run), train_sets,
                             config_text=run.canonical_text())
    result = trainer.train()
    report = CascadeEvaluator(model, config_digest=run.digest).evaluate(eval_set)
    return model, result, report


def loss_drop(result: TrainResult, window: int = 50) -> float:
    """Perte initiale divisée par la perte moyenne des derniers pas"""
    tail = result.history['loss'].tail(window).mean()
    return float(result.initial_loss / tail) if tail > 0 else float('inf')


def micro_overfit(seed: int, output_dir: str, updates: int = 2000, count: int = 16,
                  resolution: int = 32, me_threshold: float = 0.02) -> ExperimentResult:
    data = generate_dataset(count, seed, resolution, name='micro')
    run = experiment_config(os.path.join(output_dir, f"micro_{seed}"), stages=2,
                            resolution=resolution, total_updates=updates, seed=seed)
    _, result, report = train_and_evaluate(run, [data], data)
    me = report.metric('lm68')
    drop = loss_drop(result)
    return ExperimentResult('micro_overfit', seed, {'me_lm68': me, 'loss_drop': drop},
                            passed=me < me_threshold and drop >= 10.0)


def cascade_refinement(seed: int, output_dir: str, updates: int = 2000, train_count: int = 2000,
                       eval_count: int = 500, resolution: int = 64,
                       stages: int = 4) -> ExperimentResult:
    train = generate_dataset(train_count, seed, resolution, name='train')
    held_out = generate_dataset(eval_count, seed + 7919, resolution, name='held_out')
    run = experiment_config(os.path.join(output_dir, f"refine_{seed}"), stages=stages,
                            resolution=resolution, total_updates=updates, seed=seed)
    _, _, report = train_and_evaluate(run, [train], held_out)
    per_stage = [report.metric('lm68', stage) for stage in range(1, stages + 1)]
    metrics = {f"me_stage_{i}": value for i, value in enumerate(per_stage, 1)}
    monotone = all(b <= a for a, b in zip(per_stage, per_stage[1:]))
    metrics['monotone'] = float(monotone)
    return ExperimentResult('cascade_refinement', seed, metrics,
                            passed=per_stage[-1] < per_stage[0] and monotone)


def ablation(seed: int, output_dir: str, updates: int = 2000, train_count: int = 2000,
             eval_count: int = 500, resolution: int = 64, stages: int = 4) -> ExperimentResult:
    """F5 contre F2 et poids croissants contre décroissants, à données égales"""
    train = generate_dataset(train_count, seed, resolution, name='train')
    held_out = generate_dataset(eval_count, seed + 7919, resolution, name='held_out')
    # La référence (F5, poids croissants) sert aux deux comparaisons
    variants = {
        'reference': {'fusion': 'F5', 'lambda_schedule': 'increasing'},
        'F2': {'fusion': 'F2', 'lambda_schedule': 'increasing'},
        'decreasing': {'fusion': 'F5', 'lambda_schedule': 'decreasing'},
    }
    metrics = {}
    for name, overrides in variants.items():
        run = experiment_config(os.path.join(output_dir, f"ablation_{seed}_{name}"),
                                stages=stages, resolution=resolution, total_updates=updates,
                                seed=seed, **overrides)
        _, _, report = train_and_evaluate(run, [train], held_out)
        metrics[f"me_{name}"] = report.metric('lm68')
    passed = (metrics['me_reference'] <= metrics['me_F2']
              and metrics['me_reference'] <= metrics['me_decreasing'])
    return ExperimentResult('ablation', seed, metrics, passed=passed)


def weak_supervision(seed: int, output_dir: str, updates: int = 2000, fine_count: int = 64,
                     coarse_count: int = 2000, eval_count: int = 500, resolution: int = 64,
                     stages: int = 2) -> ExperimentResult:
    """Peu d'images 68 points, avec ou sans beaucoup d'images 5 points"""
    fine = generate_dataset(fine_count, seed, resolution, markups=('lm68',), name='fine')
    coarse = generate_dataset(coarse_count, seed + 104729, resolution, markups=('lm5',),
                              name='coarse')
    held_out = generate_dataset(eval_count, seed + 7919, resolution, markups=('lm68',),
                                name='held_out')
    common = dict(stages=stages, resolution=resolution, total_updates=updates, seed=seed,
                  markups=('lm68', 'lm5'))
    _, _, alone = train_and_evaluate(
        experiment_config(os.path.join(output_dir, f"weak_{seed}_fine"), **common),
        [fine], held_out)
    _, _, joint = train_and_evaluate(
        experiment_config(os.path.join(output_dir, f"weak_{seed}_joint"), **common),
        [fine, coarse], held_out)
    metrics = {'me_fine_only': alone.metric('lm68'), 'me_fine_coarse': joint.metric('lm68')}
    return ExperimentResult('weak_supervision', seed, metrics,
                            passed=metrics['me_fine_coarse'] < metrics['me_fine_only'])


EXPERIMENTS: Dict[str, Callable[..., ExperimentResult]] = {
    'micro_overfit': micro_overfit,
    'cascade_refinement': cascade_refinement,
    'ablation': ablation,
    'weak_supervision': weak_supervision,
}


def run_seeds(name: str, seeds: Sequence[int], output_dir: str, **kwargs) -> List[ExperimentResult]:
    logger = CascadeLogger()
    if name not in EXPERIMENTS:
        raise ValueError(f"Expérience non supportée: {name}")
    results = []
    for seed in seeds:
        result = EXPERIMENTS[name](seed, output_dir, **kwargs)
        verdict = '✅' if result.passed else '❌'
        details = ', '.join(f"{k}: {v:.5f}" for k, v in result.metrics.items())
        logger.info(f"{verdict} {name} (graine {seed}) - {details}")
        results.append(result)
    return results


def win_count(results: Sequence[ExperimentResult]) -> int:
    return int(np.sum([result.passed for result in results]))
