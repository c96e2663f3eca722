"""
Jeux de données annotés et format de fichier d'annotations (version 1)

    landmarks v1 <markup> <L>
    <chemin-image-relatif> <x1> <y1> ... <xL> <yL>

Les coordonnées sont en pixels dans l'espace de l'image d'origine. Les lignes vides et les
lignes commençant par '#' sont ignorées. Un fichier 'tags.csv' (colonnes image, tags) placé à
côté du fichier d'annotations associe des étiquettes libres aux images.
"""

import os
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from network.heads import MarkupRegistry
from utils.image_io import read_grayscale, resize_bilinear
from utils.logger import CascadeLogger

FORMAT_VERSION = 'v1'
TAGS_FILE = 'tags.csv'


class AnnotationError(ValueError):
    """Fichier d'annotations mal formé (fichier et numéro de ligne dans le message)"""

    def __init__(self, path: str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


@dataclass
class Sample:
    image: np.ndarray                      # (1, Y, X) dans [0, 1]
    annotations: Dict[str, np.ndarray]     # markup -> (L, 2) normalisées dans [0, 1]
    source: str = ''
    tags: Tuple[str, ...] = ()
    name: str = ''

    def __post_init__(self):
        if not self.annotations:
            raise ValueError(f"Échantillon '{self.name}' sans annotation")


@dataclass
class AnnotationRecord:
    image: str
    points: np.ndarray                     # (L, 2) en pixels


@dataclass
class AnnotationFile:
    markup: str
    num_landmarks: int
    records: List[AnnotationRecord] = field(default_factory=list)


class LandmarkDataset:
    """Ensemble immuable d'échantillons après chargement"""

    def __init__(self, samples: Sequence[Sample], name: str = '', clamped_count: int = 0):
        self.samples = tuple(samples)
        self.name = name
        self.clamped_count = clamped_count

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index: int) -> Sample:
        return self.samples[index]

    def __iter__(self):
        return iter(self.samples)

    @property
    def markups(self) -> Tuple[str, ...]:
        names = []
        for sample in self.samples:
            for markup in sample.annotations:
                if markup not in names:
                    names.append(markup)
        return tuple(names)

    def filter_tags(self, tags: Iterable[str]) -> 'LandmarkDataset':
        """Sous-ensemble des échantillons portant toutes les étiquettes demandées"""
        wanted = set(tags)
        kept = [s for s in self.samples if wanted.issubset(s.tags)]
        return LandmarkDataset(kept, name=self.name, clamped_count=self.clamped_count)

    def restrict(self, markups: Iterable[str]) -> 'LandmarkDataset':
        """Copie ne conservant que les annotations des markups demandés"""
        wanted = set(markups)
        kept = []
        for sample in self.samples:
            annotations = {k: v for k, v in sample.annotations.items() if k in wanted}
            if annotations:
                kept.append(replace(sample, annotations=annotations))
        return LandmarkDataset(kept, name=self.name, clamped_count=self.clamped_count)

    def subset(self, indices: Iterable[int]) -> 'LandmarkDataset':
        return LandmarkDataset([self.samples[i] for i in indices], name=self.name)


def parse_annotation_file(path: str) -> AnnotationFile:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Fichier d'annotations introuvable: {path}")
    with open(path, 'r', encoding='utf-8') as handle:
        lines = handle.read().splitlines()

    header = None
    records = []
    for number, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        tokens = line.split()
        if header is None:
            if len(tokens) != 4 or tokens[0] != 'landmarks' or not tokens[3].isdigit():
                raise AnnotationError(path, number, "en-tête attendu 'landmarks v1 <markup> <L>'")
            if tokens[1] != FORMAT_VERSION:
                raise AnnotationError(path, number, f"version non supportée: {tokens[1]}")
            header = AnnotationFile(tokens[2], int(tokens[3]))
            continue
        expected = 1 + 2 * header.num_landmarks
        if len(tokens) != expected:
            raise AnnotationError(path, number, f"{expected - 1} coordonnées attendues "
                                                f"({header.num_landmarks} points), "
                                                f"{len(tokens) - 1} trouvées")
        try:
            values = np.array([float(v) for v in tokens[1:]], dtype=np.float64)
        except ValueError:
            raise AnnotationError(path, number, "coordonnée non numérique") from None
        if not np.all(np.isfinite(values)):
            raise AnnotationError(path, number, "coordonnée non finie")
        records.append(AnnotationRecord(tokens[0], values.reshape(header.num_landmarks, 2)))

    if header is None:
        # Fichier vide: jeu de données vide
        return AnnotationFile('', 0)
    return AnnotationFile(header.markup, header.num_landmarks, records)


def format_annotation_file(annotation: AnnotationFile) -> str:
    lines = [f"landmarks {FORMAT_VERSION} {annotation.markup} {annotation.num_landmarks}"]
    for record in annotation.records:
        coords = ' '.join(f"{value:.6f}" for value in record.points.reshape(-1))
        lines.append(f"{record.image} {coords}")
    return '\n'.join(lines) + '\n'


def write_annotation_file(path: str, annotation: AnnotationFile):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(format_annotation_file(annotation))


def read_tags(directory: str) -> Dict[str, Tuple[str, ...]]:
    path = os.path.join(directory, TAGS_FILE)
    if not os.path.isfile(path):
        return {}
    table = pd.read_csv(path, dtype=str, keep_default_na=False)
    return {row.image: tuple(t for t in row.tags.split(';') if t)
            for row in table.itertuples(index=False)}


def write_tags(directory: str, tags: Dict[str, Sequence[str]]):
    os.makedirs(directory, exist_ok=True)
    table = pd.DataFrame({'image': list(tags), 'tags': [';'.join(t) for t in tags.values()]})
    table.to_csv(os.path.join(directory, TAGS_FILE), index=False)


def load_dataset(annotation_path: str, image_dir: Optional[str], registry: MarkupRegistry,
                 resolution: int) -> LandmarkDataset:
    """Charge un fichier d'annotations: images en niveaux de gris redimensionnées, points
    normalisés dans [0, 1] (les points hors image sont ramenés au bord et comptés)"""
    logger = CascadeLogger()
    annotation = parse_annotation_file(annotation_path)
    name = os.path.splitext(os.path.basename(annotation_path))[0]
    if not annotation.records and not annotation.markup:
        logger.warning(f"Fichier d'annotations vide: {annotation_path}")
        return LandmarkDataset([], name=name)

    markup = registry.get(annotation.markup)
    if markup.num_landmarks != annotation.num_landmarks:
        raise AnnotationError(annotation_path, 1, f"{annotation.num_landmarks} points déclarés, "
                                                  f"le markup {markup.name} en a "
                                                  f"{markup.num_landmarks}")
    image_dir = image_dir or os.path.dirname(os.path.abspath(annotation_path))
    tags = read_tags(os.path.dirname(os.path.abspath(annotation_path)))

    samples = []
    clamped = 0
    for record in annotation.records:
        path = os.path.join(image_dir, record.image)
        gray = read_grayscale(path)
        height, width = gray.shape
        scale = np.array([max(width - 1, 1), max(height - 1, 1)], dtype=np.float64)
        coords = record.points / scale
        outside = (coords < 0.0) | (coords > 1.0)
        if outside.any():
            count = int(outside.any(axis=1).sum())
            clamped += count
            logger.warning(f"{record.image}: {count} point(s) hors de l'image ramené(s) au bord")
            coords = np.clip(coords, 0.0, 1.0)
        image = resize_bilinear(gray, resolution, resolution)
        samples.append(Sample(image=np.clip(image, 0.0, 1.0)[None],
                              annotations={markup.name: coords}, source=name,
                              tags=tags.get(record.image, ()), name=record.image))

    logger.info(f"📂 Jeu {name}: {len(samples)} image(s) {markup.name}, "
                f"{clamped} point(s) ramené(s) au bord")
    return LandmarkDataset(samples, name=name, clamped_count=clamped)
