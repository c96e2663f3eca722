import json
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from autodiff.tensor import Tensor, no_grad
from dataset.annotations import LandmarkDataset
from evaluation.metrics import AUC_THRESHOLD, NormSpec, ZeroNormError, auc_fr, normalized_error
from network.cascade import CascadeModel
from utils.logger import CascadeLogger

AVERAGE_ROW = 'Avg'


@dataclass
class EvaluationReport:
    summary: pd.DataFrame                  # stage, markup, me, auc, fr, examples, excluded
    errors: pd.DataFrame                   # example, stage, markup, error
    ms_per_image: Dict[int, float] = field(default_factory=dict)
    stages_used: int = 0
    tag: Optional[str] = None
    config_digest: str = ''
    norm: str = 'interocular'

    def stage_errors(self, markup: str, stage: Optional[int] = None) -> np.ndarray:
        stage = self.stages_used if stage is None else stage
        table = self.errors
        selected = table[(table['markup'] == markup) & (table['stage'] == stage)]
        return selected['error'].to_numpy()

    def metric(self, markup: str, stage: Optional[int] = None, key: str = 'me') -> float:
        stage = self.stages_used if stage is None else stage
        table = self.summary
        row = table[(table['markup'] == markup) & (table['stage'] == stage)]
        if row.empty:
            raise KeyError(f"Aucune métrique pour {markup} à l'étage {stage}")
        return float(row[key].iloc[0])

    def to_dict(self) -> Dict:
        metrics: Dict[str, Dict[str, Dict[str, float]]] = {}
        for row in self.summary.itertuples(index=False):
            entry = metrics.setdefault(row.markup, {})
            entry[f"stage_{row.stage}"] = {
                'me': None if pd.isna(row.me) else float(row.me),
                f"auc@{AUC_THRESHOLD}": None if pd.isna(row.auc) else float(row.auc),
                f"fr@{AUC_THRESHOLD}": None if pd.isna(row.fr) else float(row.fr),
                'examples': int(row.examples),
                'excluded': int(row.excluded),
            }
        return {
            'config_digest': self.config_digest,
            'stages_used': self.stages_used,
            'tag': self.tag,
            'norm': self.norm,
            'ms_per_image': {f"stages_{k}": v for k, v in self.ms_per_image.items()},
            'metrics': metrics,
        }

    def write(self, path: str):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)


class CascadeEvaluator:
    """Métriques par étage et par markup sur un jeu annoté"""

    def __init__(self, model: CascadeModel, norm: NormSpec = NormSpec(), batch_size: int = 16,
                 config_digest: str = ''):
        self.logger = CascadeLogger()
        self.model = model
        self.norm = norm
        self.batch_size = max(1, batch_size)
        self.config_digest = config_digest

    def predict(self, images: np.ndarray, stages_used: Optional[int] = None) -> List[Dict]:
        """Prédictions normalisées par étage: liste (étage) de {markup: (N, L, 2)}"""
        self.model.eval()
        with no_grad():
            output = self.model(Tensor(images), stages_used=stages_used)
        return [output.predictions(stage) for stage in range(len(output))]

    def _timing(self, images: np.ndarray, stages_used: int) -> Dict[int, float]:
        timing = {}
        for count in range(1, stages_used + 1):
            started = time.perf_counter()
            self.predict(images, count)
            timing[count] = 1000.0 * (time.perf_counter() - started) / len(images)
        return timing

    def evaluate(self, dataset: LandmarkDataset, stages_used: Optional[int] = None,
                 tag: Optional[str] = None) -> EvaluationReport:
        stages_used = stages_used or self.model.config.stages
        if tag:
            dataset = dataset.filter_tags([tag])
        markups = {m.name: m for m in self.model.config.markups}
        unknown = set(dataset.markups) - set(markups)
        if unknown:
            self.logger.warning(f"Markups ignorés (absents du modèle): {sorted(unknown)}")

        records = []
        excluded: Dict = {}
        timing: Dict[int, float] = {}
        for start in range(0, len(dataset), self.batch_size):
            chunk = dataset.samples[start:start + self.batch_size]
            images = np.stack([sample.image for sample in chunk])
            if start == 0:
                timing = self._timing(images, stages_used)
            stage_predictions = self.predict(images, stages_used)
            for name, markup in markups.items():
                rows = [i for i, sample in enumerate(chunk) if name in sample.annotations]
                if not rows:
                    continue
                truth = np.stack([chunk[i].annotations[name] for i in rows])
                for stage, predictions in enumerate(stage_predictions, 1):
                    for position, row in enumerate(rows):
                        try:
                            error = normalized_error(predictions[name][row], truth[position],
                                                     markup, self.norm)
                        except ZeroNormError:
                            excluded[(stage, name)] = excluded.get((stage, name), 0) + 1
                            continue
                        records.append({'example': chunk[row].name or str(start + row),
                                        'stage': stage, 'markup': name, 'error': error})

        errors_table = pd.DataFrame(records, columns=['example', 'stage', 'markup', 'error'])
        summary = self._summarize(errors_table, excluded, stages_used, list(markups))
        report = EvaluationReport(summary, errors_table, timing, stages_used, tag,
                                  self.config_digest, self.norm.kind)
        for row in summary.itertuples(index=False):
            if row.markup != AVERAGE_ROW and not pd.isna(row.me):
                self.logger.metric_log(row.markup, row.stage - 1, row.me, row.auc, row.fr, tag)
        if timing:
            self.logger.info("⏱️ Temps par image: " + ", ".join(
                f"{k} étage(s) {v:.2f} ms" for k, v in timing.items()))
        return report

    def _summarize(self, table: pd.DataFrame, excluded: Dict, stages_used: int,
                   markups: Sequence[str]) -> pd.DataFrame:
        rows = []
        for stage in range(1, stages_used + 1):
            stage_rows = []
            for name in markups:
                values = table[(table['stage'] == stage) & (table['markup'] == name)]['error']
                dropped = excluded.get((stage, name), 0)
                if values.empty and not dropped:
                    continue
                if values.empty:
                    me = auc = fr = np.nan
                else:
                    me = float(values.mean())
                    auc, fr = auc_fr(values.to_numpy())
                row = {'stage': stage, 'markup': name, 'me': me, 'auc': auc, 'fr': fr,
                       'examples': int(values.size), 'excluded': int(dropped)}
                rows.append(row)
                stage_rows.append(row)
            if stage_rows:
                frame = pd.DataFrame(stage_rows)
                rows.append({'stage': stage, 'markup': AVERAGE_ROW, 'me': frame['me'].mean(),
                             'auc': frame['auc'].mean(), 'fr': frame['fr'].mean(),
                             'examples': int(frame['examples'].sum()),
                             'excluded': int(frame['excluded'].sum())})
        return pd.DataFrame(rows, columns=['stage', 'markup', 'me', 'auc', 'fr', 'examples',
                                           'excluded'])
