"""
Têtes de prédiction multi-markups chaînées et registre des markups

Format du fichier de markups (texte, une entrée par ligne, lignes vides ignorées):

    markup <nom> <L>
    <label 1>
    ...
    <label L>
    interocular <i> <j>                 (optionnel)
    pupils <indices...> / <indices...>  (optionnel)
    flip <permutation de 0..L-1>        (optionnel)

    coarsen <source> <cible>
    <indices sources moyennés pour le landmark cible 1>
    ...
    <indices sources moyennés pour le landmark cible L_cible>
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from autodiff.tensor import Tensor
from network.attention import (
    AttentionMaps, LandmarkSet, TransferLayer, soft_argmax, spatial_softmax,
)
from network.layers import Module

HEAD_MODES = ('chained', 'independent')


class MarkupError(ValueError):
    """Markup inconnu, mal ordonné ou table d'indices invalide"""


@dataclass(frozen=True)
class Markup:
    name: str
    labels: Tuple[str, ...]
    interocular: Optional[Tuple[int, int]] = None
    pupils: Optional[Tuple[Tuple[int, ...], Tuple[int, ...]]] = None
    flip: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if not self.name or any(ch.isspace() for ch in self.name):
            raise MarkupError(f"Nom de markup invalide: '{self.name}'")
        if not self.labels:
            raise MarkupError(f"Markup {self.name} sans landmark")
        indices = list(self.interocular or ())
        for group in self.pupils or ():
            indices.extend(group)
        self._check_range(indices)
        if self.flip is not None and sorted(self.flip) != list(range(self.num_landmarks)):
            raise MarkupError(f"Table de symétrie de {self.name} n'est pas une permutation")

    def _check_range(self, indices: Sequence[int]):
        for index in indices:
            if not 0 <= index < self.num_landmarks:
                raise MarkupError(f"Index {index} hors du markup {self.name} "
                                  f"({self.num_landmarks} landmarks)")

    @property
    def num_landmarks(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class CoarseningMap:
    source: str
    target: str
    groups: Tuple[Tuple[int, ...], ...]


def derive_coarse_markup(fine: LandmarkSet, coarsening: CoarseningMap) -> LandmarkSet:
    """Déduit un markup grossier par sélection ou moyenne d'indices du markup fin"""
    if fine.markup and fine.markup != coarsening.source:
        raise MarkupError(f"Markup {fine.markup} ne correspond pas à la source "
                          f"{coarsening.source}")
    coords = fine.values
    count = coords.shape[-2]
    points = []
    for group in coarsening.groups:
        if not group or any(not 0 <= index < count for index in group):
            raise MarkupError(f"Groupe d'indices {group} hors de [0, {count})")
        points.append(coords[..., list(group), :].mean(axis=-2))
    return LandmarkSet(np.stack(points, axis=-2), markup=coarsening.target)


def check_markup_order(markups: Sequence[Markup]):
    """Le chaînage exige L_1 > L_2 > ... > L_K"""
    counts = [markup.num_landmarks for markup in markups]
    if not counts:
        raise MarkupError("Au moins un markup est requis")
    for previous, current in zip(counts, counts[1:]):
        if current >= previous:
            raise MarkupError(f"Markups non strictement décroissants en nombre de landmarks: "
                              f"{counts}")


class MarkupRegistry:
    def __init__(self):
        self.markups: Dict[str, Markup] = {}
        self.coarsenings: Dict[Tuple[str, str], CoarseningMap] = {}

    def __contains__(self, name: str) -> bool:
        return name in self.markups

    def add_markup(self, markup: Markup):
        if markup.name in self.markups:
            raise MarkupError(f"Markup déjà déclaré: {markup.name}")
        self.markups[markup.name] = markup

    def add_coarsening(self, coarsening: CoarseningMap):
        source = self.get(coarsening.source)
        target = self.get(coarsening.target)
        if len(coarsening.groups) != target.num_landmarks:
            raise MarkupError(f"coarsen {source.name} {target.name}: {len(coarsening.groups)} "
                              f"groupes pour {target.num_landmarks} landmarks")
        for group in coarsening.groups:
            if not group:
                raise MarkupError(f"coarsen {source.name} {target.name}: groupe vide")
            source._check_range(group)
        self.coarsenings[(coarsening.source, coarsening.target)] = coarsening

    def get(self, name: str) -> Markup:
        if name not in self.markups:
            raise MarkupError(f"Markup non déclaré dans le registre: {name}")
        return self.markups[name]

    def resolve(self, names: Sequence[str]) -> List[Markup]:
        return [self.get(name) for name in names]

    def coarsening(self, source: str, target: str) -> CoarseningMap:
        key = (source, target)
        if key not in self.coarsenings:
            raise MarkupError(f"Aucune table de passage {source} -> {target}")
        return self.coarsenings[key]

    @classmethod
    def from_markups(cls, markups: Sequence[Markup]) -> 'MarkupRegistry':
        registry = cls()
        for markup in markups:
            registry.add_markup(markup)
        return registry

    @classmethod
    def parse(cls, text: str) -> 'MarkupRegistry':
        registry = cls()
        lines = [(number, line.strip()) for number, line in enumerate(text.splitlines(), 1)]
        lines = [(number, line) for number, line in lines if line]
        position = 0

        def fail(number, message):
            raise MarkupError(f"ligne {number}: {message}")

        while position < len(lines):
            number, line = lines[position]
            tokens = line.split()
            if tokens[0] == 'markup':
                if len(tokens) != 3 or not tokens[2].isdigit():
                    fail(number, "en-tête attendu 'markup <nom> <L>'")
                name, count = tokens[1], int(tokens[2])
                labels = [label for _, label in lines[position + 1:position + 1 + count]]
                if len(labels) != count:
                    fail(number, f"{count} labels attendus, {len(labels)} trouvés")
                position += 1 + count
                extras = {}
                while position < len(lines) and lines[position][1].split()[0] in (
                        'interocular', 'pupils', 'flip'):
                    extra_number, extra = lines[position]
                    keyword, _, rest = extra.partition(' ')
                    try:
                        if keyword == 'interocular':
                            pair = tuple(int(v) for v in rest.split())
                            if len(pair) != 2:
                                fail(extra_number, "interocular attend deux indices")
                            extras['interocular'] = pair
                        elif keyword == 'pupils':
                            left, sep, right = rest.partition('/')
                            if not sep:
                                fail(extra_number, "pupils attend '<indices> / <indices>'")
                            extras['pupils'] = (tuple(int(v) for v in left.split()),
                                                tuple(int(v) for v in right.split()))
                        else:
                            extras['flip'] = tuple(int(v) for v in rest.split())
                    except MarkupError:
                        raise
                    except ValueError:
                        fail(extra_number, f"indices entiers attendus: '{extra}'")
                    position += 1
                registry.add_markup(Markup(name, tuple(labels), **extras))
            elif tokens[0] == 'coarsen':
                if len(tokens) != 3:
                    fail(number, "en-tête attendu 'coarsen <source> <cible>'")
                target = registry.get(tokens[2])
                block = lines[position + 1:position + 1 + target.num_landmarks]
                if len(block) != target.num_landmarks:
                    fail(number, f"{target.num_landmarks} lignes d'indices attendues")
                groups = []
                for group_number, group_line in block:
                    try:
                        groups.append(tuple(int(v) for v in group_line.split()))
                    except ValueError:
                        fail(group_number, f"indices entiers attendus: '{group_line}'")
                registry.add_coarsening(CoarseningMap(tokens[1], tokens[2], tuple(groups)))
                position += 1 + target.num_landmarks
            else:
                fail(number, f"mot-clé inattendu '{tokens[0]}'")
        return registry

    @classmethod
    def load(cls, path: str) -> 'MarkupRegistry':
        with open(path, 'r', encoding='utf-8') as handle:
            return cls.parse(handle.read())

    def dump(self) -> str:
        """Texte canonique du registre (relu à l'identique par parse)"""
        lines = []
        for markup in self.markups.values():
            lines.append(f"markup {markup.name} {markup.num_landmarks}")
            lines.extend(markup.labels)
            if markup.interocular is not None:
                lines.append(f"interocular {markup.interocular[0]} {markup.interocular[1]}")
            if markup.pupils is not None:
                left = ' '.join(str(i) for i in markup.pupils[0])
                right = ' '.join(str(i) for i in markup.pupils[1])
                lines.append(f"pupils {left} / {right}")
            if markup.flip is not None:
                lines.append('flip ' + ' '.join(str(i) for i in markup.flip))
            lines.append('')
        for coarsening in self.coarsenings.values():
            lines.append(f"coarsen {coarsening.source} {coarsening.target}")
            lines.extend(' '.join(str(i) for i in group) for group in coarsening.groups)
            lines.append('')
        return '\n'.join(lines)

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8') as handle:
            handle.write(self.dump())


@dataclass
class HeadOutput:
    markup: Markup
    logits: Tensor
    maps: AttentionMaps
    landmarks: LandmarkSet


@dataclass
class HeadStackOutput:
    entries: List[HeadOutput] = field(default_factory=list)
    fusion_index: int = 0

    def __len__(self):
        return len(self.entries)

    @property
    def fusion_maps(self) -> AttentionMaps:
        """Cartes du markup k0 utilisées pour le masque de fusion"""
        return self.entries[self.fusion_index].maps

    def by_name(self, name: str) -> HeadOutput:
        for entry in self.entries:
            if entry.markup.name == name:
                return entry
        raise MarkupError(f"Aucune tête pour le markup {name}")


class HeadStack(Module):
    """K couches de transfert; en mode chaîné la tête k lit les logits de la tête k-1"""

    def __init__(self, in_channels: int, markups: Sequence[Markup], mode: str = 'chained',
                 fusion_index: int = 0, rng: Optional[np.random.Generator] = None):
        check_markup_order(markups)
        if mode not in HEAD_MODES:
            raise ValueError(f"Mode de têtes non supporté: {mode}")
        if not 0 <= fusion_index < len(markups):
            raise ValueError(f"Index de markup de fusion {fusion_index} hors de [0, {len(markups)})")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.markups = tuple(markups)
        self.mode = mode
        self.fusion_index = fusion_index
        self.transfers = []
        channels = in_channels
        for markup in markups:
            self.transfers.append(TransferLayer(channels, markup.num_landmarks, rng))
            if mode == 'chained':
                channels = markup.num_landmarks

    def __call__(self, embedding: Tensor, stage: int = 0) -> HeadStackOutput:
        source = embedding
        entries = []
        for markup, transfer in zip(self.markups, self.transfers):
            logits = transfer(source)
            maps = spatial_softmax(logits, markup=markup.name, stage=stage)
            entries.append(HeadOutput(markup, logits, maps, soft_argmax(maps)))
            if self.mode == 'chained':
                source = logits
        return HeadStackOutput(entries, fusion_index=self.fusion_index)


def chained_heads(embedding: Tensor, heads: HeadStack, stage: int = 0) -> HeadStackOutput:
    return heads(embedding, stage)
