import os
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from autodiff.tensor import Tape, Tensor
from dataset.annotations import LandmarkDataset
from dataset.sampler import AlternatingSampler
from network.cascade import CascadeModel, intermediate_loss
from network.checkpoint import save_checkpoint
from network.heads import MarkupRegistry
from training.optimizer import AdamOptimizer, OptimizerState
from utils.logger import CascadeLogger

DIVERGENCE_FACTOR = 1e3
LOG_FILE = 'training_log.csv'
FINAL_CHECKPOINT = 'checkpoint.bin'


class DivergenceError(RuntimeError):
    """Perte non finie ou supérieure à 1e3 fois la perte initiale"""


@dataclass(frozen=True)
class TrainConfig:
    total_updates: int = 2000
    batch_size: int = 8
    seed: int = 0
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_power: float = 0.9
    checkpoint_every: int = 500
    eval_every: int = 0
    augment_flip: bool = False
    prefetch: int = 2
    output_dir: str = 'runs/default'

    def __post_init__(self):
        if self.total_updates < 0:
            raise ValueError(f"Nombre de mises à jour négatif: {self.total_updates}")
        if self.batch_size < 2:
            raise ValueError(f"Batch d'au moins 2 exemples requis (batchnorm), reçu "
                             f"{self.batch_size}")
        if self.checkpoint_every < 0 or self.eval_every < 0 or self.prefetch < 0:
            raise ValueError("Les cadences et le préchargement doivent être positifs ou nuls")

    @classmethod
    def from_run_config(cls, run) -> 'TrainConfig':
        return cls(total_updates=run.total_updates, batch_size=run.batch_size, seed=run.seed,
                   learning_rate=run.learning_rate, beta1=run.beta1, beta2=run.beta2,
                   adam_eps=run.adam_eps, lr_power=run.lr_power,
                   checkpoint_every=run.checkpoint_every, eval_every=run.eval_every,
                   augment_flip=run.augment_flip, prefetch=run.prefetch,
                   output_dir=run.output_dir)


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    history: pd.DataFrame
    initial_loss: float
    final_loss: float
    elapsed: float


class CascadeTrainer:
    """Boucle: batch -> cascade -> perte intermédiaire -> rétropropagation -> pas ADAM"""

    def __init__(self, model: CascadeModel, config: TrainConfig,
                 datasets: Sequence[LandmarkDataset], config_text: str = '',
                 evaluate: Optional[Callable[[CascadeModel, int], None]] = None,
                 markup_text: str = ''):
        self.logger = CascadeLogger()
        self.model = model
        self.config = config
        self.config_text = config_text
        # Registre embarqué dans chaque checkpoint
        self.markup_text = markup_text or MarkupRegistry.from_markups(model.config.markups).dump()
        self.evaluate = evaluate
        self.sampler = AlternatingSampler(datasets, model.config.markups, config.batch_size,
                                          seed=config.seed, augment_flip=config.augment_flip,
                                          prefetch=config.prefetch)
        self.optimizer = AdamOptimizer(model.named_parameters(), OptimizerState(
            base_lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2,
            eps=config.adam_eps, power=config.lr_power, total_steps=config.total_updates))
        self.lambdas = model.config.lambda_values()
        self.log_columns = (['step', 'lr', 'loss', 'dataset']
                            + [f"stage_{index + 1}" for index in range(model.config.stages)]
                            + [f"markup_{markup.name}" for markup in model.config.markups])

    def _checkpoint(self, path: str):
        digest = save_checkpoint(path, self.config_text, self.model.state_dict(),
                                 self.markup_text)
        self.logger.checkpoint_log(path, digest)

    def train_step(self, batch) -> Dict[str, float]:
        self.model.train()
        self.optimizer.zero_grad()
        with Tape() as tape:
            output = self.model(Tensor(batch.images))
            breakdown = intermediate_loss(output, batch.targets, batch.presence, self.lambdas)
        loss = breakdown.total
        grads = tape.backward(loss) if loss.node is not None else {}
        lr = self.optimizer.step(grads)

        row = {'step': batch.step, 'lr': lr, 'loss': loss.item(), 'dataset': batch.dataset_index}
        stage_losses = breakdown.stage_losses()
        for index in range(self.model.config.stages):
            row[f"stage_{index + 1}"] = stage_losses.get(index, 0.0)
        markup_losses = breakdown.markup_losses()
        for markup in self.model.config.markups:
            row[f"markup_{markup.name}"] = markup_losses.get(markup.name, 0.0)
        return row

    def train(self) -> TrainResult:
        config = self.config
        os.makedirs(config.output_dir, exist_ok=True)
        log_path = os.path.join(config.output_dir, LOG_FILE)
        final_path = os.path.join(config.output_dir, FINAL_CHECKPOINT)
        report_every = max(1, config.total_updates // 20)

        self.logger.info(f"🚀 Entraînement: {config.total_updates} mises à jour, batch "
                         f"{config.batch_size}, {len(self.sampler.datasets)} jeu(x) alterné(s)")
        rows: List[Dict[str, float]] = []
        initial_loss = None
        started = time.perf_counter()

        for batch in self.sampler.batches(config.total_updates):
            row = self.train_step(batch)
            rows.append(row)
            loss = row['loss']
            if initial_loss is None:
                initial_loss = loss
            if not np.isfinite(loss) or (initial_loss > 0
                                         and loss > DIVERGENCE_FACTOR * initial_loss):
                pd.DataFrame(rows, columns=self.log_columns).to_csv(log_path, index=False,
                                                                    float_format='%.17g')
                raise DivergenceError(f"Divergence au pas {batch.step}: perte {loss:.6g} "
                                      f"(initiale {initial_loss:.6g})")

            step = batch.step + 1
            if step % report_every == 0 or step == config.total_updates:
                stages = {k: v for k, v in row.items() if k.startswith('stage_')}
                self.logger.training_log(step, row['lr'], loss, stages)
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                self._checkpoint(os.path.join(config.output_dir, f"checkpoint_{step:06d}.bin"))
            if self.evaluate is not None and config.eval_every and step % config.eval_every == 0:
                self.model.eval()
                self.evaluate(self.model, step)

        history = pd.DataFrame(rows, columns=self.log_columns)
        history.to_csv(log_path, index=False, float_format='%.17g')
        self._checkpoint(final_path)
        self.model.eval()

        elapsed = time.perf_counter() - started
        final_loss = rows[-1]['loss'] if rows else 0.0
        self.logger.info(f"✅ Entraînement terminé en {elapsed:.1f}s - perte finale "
                         f"{final_loss:.6f}")
        return TrainResult(final_path, log_path, history,
                           initial_loss if initial_loss is not None else 0.0, final_loss, elapsed)
