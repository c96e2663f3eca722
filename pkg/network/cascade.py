"""
Cascade d'étages: U-net -> têtes chaînées -> fusion, et perte à supervision intermédiaire
"""

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from autodiff.tensor import ShapeError, Tensor
from network.attention import AggregatedMask, aggregate_mask
from network.fusion import FusionKind, fuse
from network.heads import (
    HEAD_MODES, HeadStack, HeadStackOutput, Markup, MarkupError, MarkupRegistry,
    check_markup_order,
)
from network.layers import Module, UNet, UNetConfig
from utils.logger import CascadeLogger

LAMBDA_SCHEDULES = ('increasing', 'constant', 'decreasing')


def lambda_schedule(kind: str, stages: int) -> Tuple[float, ...]:
    """Poids des étages: croissant = 2^(i-S) pour i = 1..S, constant = 1, décroissant = inverse"""
    if stages <= 0:
        raise ValueError(f"Nombre d'étages positif requis, reçu {stages}")
    increasing = tuple(2.0 ** (i - stages) for i in range(1, stages + 1))
    if kind == 'increasing':
        return increasing
    if kind == 'constant':
        return (1.0,) * stages
    if kind == 'decreasing':
        return tuple(reversed(increasing))
    raise ValueError(f"Planning de poids non supporté: {kind}")


@dataclass(frozen=True)
class CascadeConfig:
    markups: Tuple[Markup, ...]
    stages: int = 4
    fusion: FusionKind = FusionKind.F5
    head_mode: str = 'chained'
    fusion_markup: int = 0
    lambda_schedule: str = 'increasing'
    lambdas: Tuple[float, ...] = ()
    channels: Tuple[int, ...] = (64, 64, 128, 128, 256, 256)
    embed_channels: int = 64
    resolution: int = 128
    image_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'markups', tuple(self.markups))
        object.__setattr__(self, 'fusion', FusionKind.parse(self.fusion))
        object.__setattr__(self, 'lambdas', tuple(float(v) for v in self.lambdas))
        check_markup_order(self.markups)
        if self.stages <= 0:
            raise ValueError(f"Nombre d'étages positif requis, reçu {self.stages}")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"Mode de têtes non supporté: {self.head_mode}")
        if not 0 <= self.fusion_markup < len(self.markups):
            raise ValueError(f"FUSION_MARKUP {self.fusion_markup} hors de "
                             f"[0, {len(self.markups)})")
        if self.lambda_schedule not in LAMBDA_SCHEDULES:
            raise ValueError(f"Planning de poids non supporté: {self.lambda_schedule}")
        values = self.lambda_values()
        if len(values) != self.stages:
            raise ValueError(f"{len(values)} poids fournis pour {self.stages} étages")
        if any(v < 0 or not np.isfinite(v) for v in values) or not any(v > 0 for v in values):
            raise ValueError(f"Poids d'étages positifs ou nuls requis (au moins un > 0): {values}")
        # Valide le plan de canaux et la résolution
        self.backbone_config(0)

    @classmethod
    def from_run_config(cls, run, registry: MarkupRegistry) -> 'CascadeConfig':
        return cls(markups=tuple(registry.resolve(run.markups)), stages=run.stages,
                   fusion=run.fusion, head_mode=run.head_mode,
                   fusion_markup=run.fusion_markup, lambda_schedule=run.lambda_schedule,
                   lambdas=run.lambdas, channels=run.channels,
                   embed_channels=run.embed_channels, resolution=run.resolution,
                   image_channels=run.image_channels)

    def lambda_values(self) -> Tuple[float, ...]:
        return self.lambdas if self.lambdas else lambda_schedule(self.lambda_schedule, self.stages)

    def stage_input_channels(self, stage: int) -> int:
        # I_0 = I: seul le premier étage lit directement l'image
        if stage == 0:
            return self.image_channels
        return self.fusion.out_channels(self.image_channels, self.embed_channels)

    def backbone_config(self, stage: int) -> UNetConfig:
        return UNetConfig(channels=tuple(self.channels),
                          in_channels=self.stage_input_channels(stage),
                          out_channels=self.embed_channels, resolution=self.resolution)


@dataclass
class StageOutput:
    index: int
    input: Tensor
    embedding: Tensor
    heads: HeadStackOutput
    mask: AggregatedMask


@dataclass
class CascadeOutput:
    stages: List[StageOutput] = field(default_factory=list)

    def __len__(self):
        return len(self.stages)

    @property
    def final(self) -> StageOutput:
        return self.stages[-1]

    def predictions(self, stage: int = -1) -> Dict[str, np.ndarray]:
        """Coordonnées normalisées (N, L, 2) par markup pour un étage"""
        return {entry.markup.name: entry.landmarks.values.copy()
                for entry in self.stages[stage].heads.entries}


class CascadeStage(Module):
    def __init__(self, unet: UNet, heads: HeadStack):
        self.unet = unet
        self.heads = heads


class CascadeModel(Module):
    """S étages empilés; l'étage i+1 lit fuse(I, H_i, M_i)"""

    def __init__(self, config: CascadeConfig, seed: int = 0):
        self.logger = CascadeLogger()
        self.config = config
        rng = np.random.default_rng(seed)
        self.stages = []
        for index in range(config.stages):
            unet = UNet(config.backbone_config(index), rng)
            heads = HeadStack(config.embed_channels, config.markups, mode=config.head_mode,
                              fusion_index=config.fusion_markup, rng=rng)
            self.stages.append(CascadeStage(unet, heads))

        backbone = sum(stage.unet.num_parameters() for stage in self.stages)
        head = sum(stage.heads.num_parameters() for stage in self.stages)
        names = ', '.join(f"{m.name}({m.num_landmarks})" for m in config.markups)
        self.logger.info(f"Cascade initialisée: {config.stages} étage(s), fusion "
                         f"{config.fusion.value}, têtes {config.head_mode} [{names}]")
        self.logger.info(f"Paramètres: {backbone + head} (U-nets: {backbone}, têtes: {head})")

    def __call__(self, image: Tensor, stages_used: Optional[int] = None) -> CascadeOutput:
        return self.forward(image, stages_used)

    def forward(self, image: Tensor, stages_used: Optional[int] = None) -> CascadeOutput:
        config = self.config
        if stages_used is None:
            stages_used = config.stages
        if not 1 <= stages_used <= config.stages:
            raise ValueError(f"stages_used doit être dans [1, {config.stages}], reçu {stages_used}")
        expected = (config.image_channels, config.resolution, config.resolution)
        if image.ndim != 4 or image.shape[1:] != expected:
            raise ShapeError('cascade', f"image {image.shape}: (N, {expected[0]}, "
                                        f"{expected[1]}, {expected[2]}) attendu")

        output = CascadeOutput()
        stage_input = image
        for index in range(stages_used):
            stage = self.stages[index]
            embedding = stage.unet(stage_input)
            heads = stage.heads(embedding, stage=index)
            mask = aggregate_mask(heads.fusion_maps)
            output.stages.append(StageOutput(index, stage_input, embedding, heads, mask))
            if index + 1 < stages_used:
                stage_input = fuse(config.fusion, image, embedding, mask)
        return output


@dataclass
class LossBreakdown:
    total: Tensor
    terms: Dict[Tuple[int, str], float] = field(default_factory=dict)

    def stage_losses(self) -> Dict[int, float]:
        """Termes non pondérés par étage (somme sur les markups)"""
        result: Dict[int, float] = {}
        for (stage, _), value in self.terms.items():
            result[stage] = result.get(stage, 0.0) + value
        return result

    def markup_losses(self) -> Dict[str, float]:
        result: Dict[str, float] = {}
        for (_, markup), value in self.terms.items():
            result[markup] = result.get(markup, 0.0) + value
        return result


def intermediate_loss(output: CascadeOutput, targets: Mapping[str, np.ndarray],
                      presence: Mapping[str, np.ndarray],
                      lambdas: Sequence[float]) -> LossBreakdown:
    """Somme pondérée sur les étages des pertes L1 par markup (divisées par L_k),
    masquées par les drapeaux de présence et moyennées sur le batch"""
    if len(lambdas) < len(output):
        raise ValueError(f"{len(lambdas)} poids pour {len(output)} étages")
    total = None
    terms: Dict[Tuple[int, str], float] = {}

    for stage in output.stages:
        weight = float(lambdas[stage.index])
        for entry in stage.heads.entries:
            name = entry.markup.name
            if name not in targets:
                continue
            target = np.asarray(targets[name], dtype=np.float64)
            predicted = entry.landmarks.coords
            if target.shape != predicted.shape:
                raise MarkupError(f"Cible {name} de forme {target.shape}, prédiction "
                                  f"{predicted.shape}")
            batch = target.shape[0]
            flags = np.asarray(presence.get(name, np.ones(batch)), dtype=np.float64).reshape(-1)
            if flags.shape[0] != batch:
                raise MarkupError(f"Drapeaux de présence {name}: {flags.shape[0]} pour un batch "
                                  f"de {batch}")
            if weight == 0.0 or not flags.any():
                continue
            # Les cibles absentes peuvent être arbitraires: on les remplace par la prédiction
            safe_target = np.where(flags[:, None, None] > 0, target, predicted.data)
            per_example = (predicted - Tensor(safe_target)).abs().sum(axis=(1, 2))
            per_example = per_example * Tensor(flags / entry.markup.num_landmarks)
            term = per_example.sum() / batch
            terms[(stage.index, name)] = term.item()
            weighted = term * weight
            total = weighted if total is None else total + weighted

    return LossBreakdown(total if total is not None else Tensor(0.0), terms)
