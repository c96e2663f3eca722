"""
Générateur procédural de visages synthétiques avec vérité terrain exacte en trois markups
(98, 68 et 5 points)

Repère du visage: origine au centre, x vers la droite, y vers le bas, unités en fraction de la
largeur d'image. Les points sont transformés par similitude (pose, échelle, translation) puis
exprimés en coordonnées normalisées dans [0, 1].
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from dataset.annotations import LandmarkDataset, Sample
from network.heads import CoarseningMap, Markup, MarkupRegistry

POSE_RANGE = 15.0          # degrés
SCALE_RANGE = (0.85, 1.1)
TRANSLATION_RANGE = 0.04
NOISE_MAX = 0.03
OCCLUSION_PROB = 0.15
LARGE_POSE = 10.0
SUPERSAMPLING = 4
DRAW_SHIFT = 4

# Amplitudes de déformation: mâchoire, sourcils, yeux, nez, bouche
DEFORMATION_PARTS = ('jaw', 'brows', 'eyes', 'nose', 'mouth')

EYE_CENTERS = (-0.12, 0.12)
EYE_Y = -0.05
EYE_ANGLES_68 = tuple(np.pi * k / 3.0 + np.pi for k in range(6))
EYE_ANGLES_98 = tuple(np.pi + k * np.pi / 4.0 for k in range(8))
MOUTH_Y = 0.19

# Groupes des tables de passage vers 5 points (centres des yeux, bout du nez, coins de la bouche)
COARSEN_68_TO_5 = ((36, 39), (42, 45), (30,), (48,), (54,))
COARSEN_98_TO_5 = ((60, 64), (68, 72), (54,), (76,), (82,))


@dataclass(frozen=True)
class SyntheticFaceParams:
    seed: int
    pose: float = 0.0
    scale: float = 1.0
    translation: Tuple[float, float] = (0.0, 0.0)
    deformations: Tuple[float, ...] = (0.0,) * len(DEFORMATION_PARTS)
    noise: float = 0.0
    occlusion_prob: float = 0.0

    def __post_init__(self):
        if abs(self.pose) > POSE_RANGE:
            raise ValueError(f"Pose {self.pose} hors de [-{POSE_RANGE}, {POSE_RANGE}] degrés")
        if not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            raise ValueError(f"Échelle {self.scale} hors de {SCALE_RANGE}")
        if len(self.translation) != 2 or max(abs(t) for t in self.translation) > TRANSLATION_RANGE:
            raise ValueError(f"Translation {self.translation} hors de ±{TRANSLATION_RANGE}")
        if len(self.deformations) != len(DEFORMATION_PARTS) or \
                max(abs(d) for d in self.deformations) > 1.0:
            raise ValueError(f"Déformations {self.deformations}: {len(DEFORMATION_PARTS)} "
                             f"amplitudes dans [-1, 1] attendues")
        if not 0.0 <= self.noise <= NOISE_MAX:
            raise ValueError(f"Bruit {self.noise} hors de [0, {NOISE_MAX}]")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError(f"Probabilité d'occultation {self.occlusion_prob} hors de [0, 1]")

    @classmethod
    def random(cls, seed: int) -> 'SyntheticFaceParams':
        rng = np.random.default_rng(seed)
        return cls(seed=seed,
                   pose=float(rng.uniform(-POSE_RANGE, POSE_RANGE)),
                   scale=float(rng.uniform(*SCALE_RANGE)),
                   translation=tuple(float(v) for v in rng.uniform(-TRANSLATION_RANGE,
                                                                   TRANSLATION_RANGE, 2)),
                   deformations=tuple(float(v) for v in rng.uniform(-1.0, 1.0,
                                                                    len(DEFORMATION_PARTS))),
                   noise=float(rng.uniform(0.0, NOISE_MAX)),
                   occlusion_prob=OCCLUSION_PROB)

    @property
    def deformation(self) -> Dict[str, float]:
        return dict(zip(DEFORMATION_PARTS, self.deformations))


# --- Géométrie dans le repère du visage -----------------------------------------------------

def _jaw(count: int, d: Dict[str, float]) -> np.ndarray:
    angles = np.pi - np.pi * np.linspace(0.0, 1.0, count)
    width = 0.30 * (1.0 + 0.1 * d['jaw'])
    return np.stack([width * np.cos(angles), -0.02 + 0.34 * np.sin(angles)], axis=1)


def _brow_y(xs: np.ndarray, cx: float, d: Dict[str, float]) -> np.ndarray:
    arch = 0.02 * (1.0 + 0.3 * d['brows'])
    return -0.13 - arch * (1.0 - ((xs - cx) / 0.07) ** 2)


def _brow(cx: float, d: Dict[str, float], with_lower: bool) -> np.ndarray:
    xs = cx + 0.07 * np.linspace(-1.0, 1.0, 5)
    points = [np.stack([xs, _brow_y(xs, cx, d)], axis=1)]
    if with_lower:
        lower = cx + 0.07 * np.array([0.75, 0.25, -0.25, -0.75])
        points.append(np.stack([lower, _brow_y(lower, cx, d) + 0.02], axis=1))
    return np.concatenate(points)


def _eye(cx: float, angles: Sequence[float], d: Dict[str, float]) -> np.ndarray:
    angles = np.asarray(angles)
    half_height = 0.022 * (1.0 + 0.4 * d['eyes'])
    return np.stack([cx + 0.055 * np.cos(angles), EYE_Y + half_height * np.sin(angles)], axis=1)


def _nose_tip_y(d: Dict[str, float]) -> float:
    return 0.06 * (1.0 + 0.2 * d['nose'])


def _nose_bridge(d: Dict[str, float]) -> np.ndarray:
    ys = np.linspace(-0.06, _nose_tip_y(d), 4)
    return np.stack([np.zeros(4), ys], axis=1)


def _nose_base(d: Dict[str, float]) -> np.ndarray:
    xs = 0.05 * np.linspace(-1.0, 1.0, 5)
    ys = _nose_tip_y(d) + 0.03 + 0.01 * (1.0 - (xs / 0.05) ** 2)
    return np.stack([xs, ys], axis=1)


def _mouth_width(d: Dict[str, float]) -> float:
    return 0.09 * (1.0 + 0.15 * d['mouth'])


def _mouth(count: int, width: float, upper: float, lower: float) -> np.ndarray:
    angles = np.pi + 2.0 * np.pi * np.arange(count) / count
    sines = np.sin(angles)
    heights = np.where(sines < 0.0, upper, lower)
    return np.stack([width * np.cos(angles), MOUTH_Y + heights * sines], axis=1)


def _mouth_outer(d: Dict[str, float]) -> np.ndarray:
    return _mouth(12, _mouth_width(d), 0.035, 0.045 * (1.0 + 0.3 * d['mouth']))


def _mouth_inner(d: Dict[str, float]) -> np.ndarray:
    return _mouth(8, 0.65 * _mouth_width(d), 0.012, 0.018 * (1.0 + 0.3 * d['mouth']))


def face_shape_68(d: Dict[str, float]) -> np.ndarray:
    return np.concatenate([
        _jaw(17, d),
        _brow(EYE_CENTERS[0], d, False), _brow(EYE_CENTERS[1], d, False),
        _nose_bridge(d), _nose_base(d),
        _eye(EYE_CENTERS[0], EYE_ANGLES_68, d), _eye(EYE_CENTERS[1], EYE_ANGLES_68, d),
        _mouth_outer(d), _mouth_inner(d),
    ])


def face_shape_98(d: Dict[str, float]) -> np.ndarray:
    return np.concatenate([
        _jaw(33, d),
        _brow(EYE_CENTERS[0], d, True), _brow(EYE_CENTERS[1], d, True),
        _nose_bridge(d), _nose_base(d),
        _eye(EYE_CENTERS[0], EYE_ANGLES_98, d), _eye(EYE_CENTERS[1], EYE_ANGLES_98, d),
        _mouth_outer(d), _mouth_inner(d),
        np.array([[EYE_CENTERS[0], EYE_Y], [EYE_CENTERS[1], EYE_Y]]),
    ])


def face_shape_5(d: Dict[str, float]) -> np.ndarray:
    width = _mouth_width(d)
    return np.array([
        [EYE_CENTERS[0], EYE_Y], [EYE_CENTERS[1], EYE_Y],
        [0.0, _nose_tip_y(d)],
        [-width, MOUTH_Y], [width, MOUTH_Y],
    ])


FACE_SHAPES = {'lm98': face_shape_98, 'lm68': face_shape_68, 'lm5': face_shape_5}


def _labels_68() -> Tuple[str, ...]:
    parts = [('jaw', 17), ('brow_r', 5), ('brow_l', 5), ('nose_bridge', 4), ('nose_base', 5),
             ('eye_r', 6), ('eye_l', 6), ('mouth_outer', 12), ('mouth_inner', 8)]
    return tuple(f"{name}_{i}" for name, count in parts for i in range(count))


def _labels_98() -> Tuple[str, ...]:
    parts = [('jaw', 33), ('brow_r', 9), ('brow_l', 9), ('nose_bridge', 4), ('nose_base', 5),
             ('eye_r', 8), ('eye_l', 8), ('mouth_outer', 12), ('mouth_inner', 8), ('pupil', 2)]
    return tuple(f"{name}_{i}" for name, count in parts for i in range(count))


def mirror_permutation(shape: np.ndarray, tol: float = 1e-9) -> Tuple[int, ...]:
    """Table de symétrie horizontale: index du point miroir de chaque point d'une forme neutre"""
    mirrored = shape * np.array([-1.0, 1.0])
    distances = np.linalg.norm(mirrored[:, None, :] - shape[None, :, :], axis=2)
    permutation = distances.argmin(axis=1)
    if distances[np.arange(len(shape)), permutation].max() > tol or \
            len(set(permutation.tolist())) != len(shape):
        raise ValueError("Forme non symétrique: table de symétrie indéfinie")
    return tuple(int(i) for i in permutation)


def builtin_registry() -> MarkupRegistry:
    """Registre des markups du générateur synthétique"""
    neutral = dict.fromkeys(DEFORMATION_PARTS, 0.0)
    registry = MarkupRegistry()
    registry.add_markup(Markup(
        'lm98', _labels_98(), interocular=(60, 72), pupils=((96,), (97,)),
        flip=mirror_permutation(face_shape_98(neutral))))
    registry.add_markup(Markup(
        'lm68', _labels_68(), interocular=(36, 45),
        pupils=(tuple(range(36, 42)), tuple(range(42, 48))),
        flip=mirror_permutation(face_shape_68(neutral))))
    registry.add_markup(Markup(
        'lm5', ('eye_r', 'eye_l', 'nose_tip', 'mouth_r', 'mouth_l'), interocular=(0, 1),
        pupils=((0,), (1,)), flip=mirror_permutation(face_shape_5(neutral))))
    registry.add_coarsening(CoarseningMap('lm68', 'lm5', COARSEN_68_TO_5))
    registry.add_coarsening(CoarseningMap('lm98', 'lm5', COARSEN_98_TO_5))
    return registry


# --- Rendu ----------------------------------------------------------------------------------

def _transform(points: np.ndarray, params: SyntheticFaceParams) -> np.ndarray:
    theta = np.deg2rad(params.pose)
    rotation = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    return 0.5 + params.scale * points @ rotation.T + np.asarray(params.translation)


def _canvas_points(points: np.ndarray, resolution: int) -> np.ndarray:
    # Centre du pixel p de l'image finale -> centre correspondant du canevas sur-échantillonné
    pixels = points * (resolution - 1)
    canvas = (pixels + 0.5) * SUPERSAMPLING - 0.5
    return np.round(canvas * (1 << DRAW_SHIFT)).astype(np.int32)


def _closed_curve(center: Tuple[float, float], rx: float, ry: float, count: int = 48) -> np.ndarray:
    angles = np.linspace(0.0, 2.0 * np.pi, count, endpoint=False)
    return np.stack([center[0] + rx * np.cos(angles), center[1] + ry * np.sin(angles)], axis=1)


def render_face(params: SyntheticFaceParams, resolution: int) -> Tuple[np.ndarray, bool]:
    """Image (Y, X) float64 dans [0, 1] et indicateur d'occultation"""
    rng = np.random.default_rng([params.seed, 1])
    d = params.deformation
    size = resolution * SUPERSAMPLING
    background = int(rng.integers(20, 70))
    skin = int(rng.integers(150, 210))
    canvas = np.full((size, size), background, dtype=np.uint8)

    def poly(points, value, closed=True, thickness=-1):
        pts = _canvas_points(_transform(points, params), resolution).reshape(-1, 1, 2)
        if thickness < 0:
            cv2.fillPoly(canvas, [pts], int(value), lineType=cv2.LINE_AA, shift=DRAW_SHIFT)
        else:
            cv2.polylines(canvas, [pts], closed, int(value), thickness=thickness,
                          lineType=cv2.LINE_AA, shift=DRAW_SHIFT)

    jaw = _jaw(64, d)
    forehead_angles = np.linspace(2.0 * np.pi, np.pi, 32)[1:-1]
    width = 0.30 * (1.0 + 0.1 * d['jaw'])
    forehead = np.stack([width * np.cos(forehead_angles),
                         -0.02 + 0.30 * np.sin(forehead_angles)], axis=1)
    poly(np.concatenate([jaw, forehead]), skin)

    line = max(1, SUPERSAMPLING * resolution // 64)
    for cx in EYE_CENTERS:
        poly(_brow(cx, d, False), skin - 90, closed=False, thickness=line)
        poly(_closed_curve((cx, EYE_Y), 0.055, 0.022 * (1.0 + 0.4 * d['eyes'])), 235)
        poly(_closed_curve((cx, EYE_Y), 0.014, 0.014), 25)
    poly(np.concatenate([_nose_bridge(d), _nose_base(d)[::-1]]), skin - 50, closed=False,
         thickness=line)
    poly(_mouth_outer(d), skin - 70)
    poly(_mouth_inner(d), 30)

    image = cv2.resize(canvas, (resolution, resolution), interpolation=cv2.INTER_AREA)
    image = image.astype(np.float64) / 255.0
    if params.noise > 0.0:
        image = image + rng.normal(0.0, params.noise, image.shape)

    occluded = bool(rng.random() < params.occlusion_prob)
    if occluded:
        side = rng.uniform(0.2, 0.35, 2) * resolution
        corner = rng.uniform(0.0, 1.0, 2) * (resolution - side)
        x0, y0 = np.floor(corner).astype(int)
        x1, y1 = np.ceil(corner + side).astype(int)
        image[y0:y1, x0:x1] = rng.uniform(0.0, 1.0)
    return np.clip(image, 0.0, 1.0), occluded


def generate_synthetic(params: SyntheticFaceParams, resolution: int = 128,
                       markups: Sequence[str] = ('lm98', 'lm68', 'lm5')) -> Sample:
    """Visage synthétique et ses annotations exactes dans chaque markup demandé"""
    d = params.deformation
    annotations = {}
    for markup in markups:
        if markup not in FACE_SHAPES:
            raise ValueError(f"Markup synthétique non supporté: {markup}")
        annotations[markup] = _transform(FACE_SHAPES[markup](d), params)
    image, occluded = render_face(params, resolution)

    tags = []
    if abs(params.pose) > LARGE_POSE:
        tags.append('large_pose')
    if occluded:
        tags.append('occluded')
    return Sample(image=image[None], annotations=annotations, source='synthetic',
                  tags=tuple(tags), name=f"face_{params.seed}.pgm")


def child_seed(seed: int, index: int) -> int:
    return seed * 1000003 + index


def generate_dataset(count: int, seed: int, resolution: int = 128,
                     markups: Sequence[str] = ('lm98', 'lm68', 'lm5'),
                     name: Optional[str] = None) -> LandmarkDataset:
    samples: List[Sample] = []
    for index in range(count):
        params = SyntheticFaceParams.random(child_seed(seed, index))
        sample = generate_synthetic(params, resolution, markups)
        sample.name = f"face_{index:06d}.pgm"
        samples.append(sample)
    return LandmarkDataset(samples, name=name or f"synthetic-{seed}")
