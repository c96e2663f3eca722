import queue
import threading
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from dataset.annotations import LandmarkDataset, Sample
from network.heads import Markup, MarkupError
from utils.logger import CascadeLogger


@dataclass
class Batch:
    images: np.ndarray                  # (B, 1, Y, X)
    targets: Dict[str, np.ndarray]      # markup -> (B, L, 2), zéros si absent
    presence: Dict[str, np.ndarray]     # markup -> (B,), 1.0 si annoté
    dataset_index: int
    step: int

    def __len__(self):
        return self.images.shape[0]


def flip_sample(sample: Sample, markups: Dict[str, Markup]) -> Sample:
    """Symétrie horizontale de l'image et réindexation des points par markup"""
    annotations = {}
    for name, coords in sample.annotations.items():
        markup = markups[name]
        if markup.flip is None:
            raise MarkupError(f"Markup {name} sans table de symétrie")
        mirrored = coords.copy()
        mirrored[:, 0] = 1.0 - mirrored[:, 0]
        annotations[name] = mirrored[list(markup.flip)]
    return Sample(image=sample.image[..., ::-1].copy(), annotations=annotations,
                  source=sample.source, tags=sample.tags, name=sample.name)


class _DatasetCursor:
    """Tirage par époques mélangées dans un jeu de données"""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.order = rng.permutation(size)
        self.position = 0

    def take(self, count: int) -> np.ndarray:
        if count > self.size:
            return self.rng.integers(0, self.size, count)
        indices = []
        while len(indices) < count:
            if self.position == self.size:
                self.order = self.rng.permutation(self.size)
                self.position = 0
            end = min(self.size, self.position + count - len(indices))
            indices.extend(self.order[self.position:end].tolist())
            self.position = end
        return np.asarray(indices)


class AlternatingSampler:
    """Batchs tirés à tour de rôle dans chaque jeu: le batch t vient du jeu t mod D"""

    def __init__(self, datasets: Sequence[LandmarkDataset], markups: Sequence[Markup],
                 batch_size: int, seed: int = 0, augment_flip: bool = False, prefetch: int = 0):
        self.logger = CascadeLogger()
        if not datasets:
            raise ValueError("Au moins un jeu de données est requis")
        if batch_size <= 0:
            raise ValueError(f"Taille de batch positive requise, reçu {batch_size}")
        self.datasets = list(datasets)
        self.markups = {markup.name: markup for markup in markups}
        self.batch_size = batch_size
        self.seed = seed
        self.augment_flip = augment_flip
        self.prefetch = max(0, int(prefetch))

        for index, dataset in enumerate(self.datasets):
            if len(dataset) == 0:
                raise ValueError(f"Jeu de données vide: {dataset.name or index}")
            unknown = set(dataset.markups) - set(self.markups)
            if unknown:
                raise MarkupError(f"Jeu {dataset.name}: markups absents du modèle "
                                  f"{sorted(unknown)}")
            if augment_flip:
                for name in dataset.markups:
                    if self.markups[name].flip is None:
                        raise MarkupError(f"Augmentation par symétrie impossible: markup {name} "
                                          f"sans table de symétrie")
        self.reset()

    def reset(self):
        self._cursors = [_DatasetCursor(len(dataset), np.random.default_rng([self.seed, index]))
                         for index, dataset in enumerate(self.datasets)]
        self._flip_rngs = [np.random.default_rng([self.seed, index, 1])
                           for index in range(len(self.datasets))]
        self._warned = set()
        self._step = 0

    def next_batch(self) -> Batch:
        step = self._step
        self._step += 1
        index = step % len(self.datasets)
        dataset = self.datasets[index]
        if self.batch_size > len(dataset) and index not in self._warned:
            self._warned.add(index)
            self.logger.warning(f"⚠️ Jeu {dataset.name}: batch de {self.batch_size} > "
                                f"{len(dataset)} échantillons, tirage avec remise")
        samples = [dataset[int(i)] for i in self._cursors[index].take(self.batch_size)]
        if self.augment_flip:
            flips = self._flip_rngs[index].random(len(samples)) < 0.5
            samples = [flip_sample(s, self.markups) if f else s for s, f in zip(samples, flips)]
        return self.collate(samples, index, step)

    def collate(self, samples: List[Sample], dataset_index: int, step: int) -> Batch:
        images = np.stack([sample.image for sample in samples]).astype(np.float64)
        targets, presence = {}, {}
        for name, markup in self.markups.items():
            coords = np.zeros((len(samples), markup.num_landmarks, 2))
            flags = np.zeros(len(samples))
            for row, sample in enumerate(samples):
                if name in sample.annotations:
                    coords[row] = sample.annotations[name]
                    flags[row] = 1.0
            targets[name] = coords
            presence[name] = flags
        return Batch(images, targets, presence, dataset_index, step)

    def batches(self, count: int) -> Iterator[Batch]:
        """Flux de count batchs; l'ordre ne dépend que de la graine, pas du préchargement"""
        if self.prefetch == 0:
            for _ in range(count):
                yield self.next_batch()
            return

        buffer: 'queue.Queue' = queue.Queue(maxsize=self.prefetch)
        stop = threading.Event()
        failure: List[BaseException] = []

        def offer(item):
            while not stop.is_set():
                try:
                    buffer.put(item, timeout=0.1)
                    return
                except queue.Full:
                    continue

        def produce():
            try:
                for _ in range(count):
                    if stop.is_set():
                        return
                    offer(self.next_batch())
            except Exception as e:
                failure.append(e)
            finally:
                offer(None)

        worker = threading.Thread(target=produce, name='batch-prefetch', daemon=True)
        worker.start()
        try:
            for _ in range(count):
                batch = buffer.get()
                if batch is None:
                    break
                yield batch
            if failure:
                raise failure[0]
        finally:
            stop.set()
            worker.join(timeout=1.0)
