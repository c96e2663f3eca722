import os
from typing import List, Optional, Sequence

import cv2
import numpy as np
import pandas as pd

from evaluation.metrics import CED_MAX_THRESHOLD, CED_POINTS, ced_curve
from network.attention import AttentionMaps
from network.cascade import CascadeOutput
from utils.image_io import to_uint8, write_image

PREDICTION_COLOR = (0, 255, 0)      # BGR
GROUND_TRUTH_COLOR = (0, 0, 255)
CROSS_SIZE = 3


def ced_export(errors: Sequence[float], path: str, max_threshold: float = CED_MAX_THRESHOLD,
               points: int = CED_POINTS) -> pd.DataFrame:
    thresholds, fractions = ced_curve(errors, max_threshold, points)
    table = pd.DataFrame({'threshold': thresholds, 'fraction': fractions})
    directory = os.path.dirname(path)
    try:
        if directory:
            os.makedirs(directory, exist_ok=True)
        table.to_csv(path, index=False, float_format='%.17g')
    except OSError as e:
        raise OSError(f"Écriture de la CED impossible ({path}): {e}") from e
    return table


def max_scaled(values: np.ndarray) -> np.ndarray:
    """Mise à l'échelle par le maximum vers 8 bits (carte nulle -> image noire)"""
    peak = float(values.max()) if values.size else 0.0
    if peak <= 0.0:
        return np.zeros(values.shape, dtype=np.uint8)
    return to_uint8(values / peak)


def export_attention(maps: AttentionMaps, path_prefix: str, mask: Optional[np.ndarray] = None,
                     example: int = 0) -> List[str]:
    """Une image PGM par landmark, plus le masque agrégé s'il est fourni"""
    data = maps.maps.data[example]
    paths = []
    for index, landmark_map in enumerate(data):
        path = f"{path_prefix}_{maps.markup or 'markup'}_lm{index:03d}.pgm"
        write_image(path, max_scaled(landmark_map))
        paths.append(path)
    if mask is not None:
        path = f"{path_prefix}_mask.pgm"
        write_image(path, max_scaled(np.asarray(mask)[example, 0]))
        paths.append(path)
    return paths


def export_cascade_attention(output: CascadeOutput, path_prefix: str,
                             example: int = 0) -> List[str]:
    paths = []
    for stage in output.stages:
        prefix = f"{path_prefix}_stage{stage.index + 1}"
        for position, entry in enumerate(stage.heads.entries):
            mask = stage.mask.mask.data if position == stage.heads.fusion_index else None
            paths.extend(export_attention(entry.maps, prefix, mask=mask, example=example))
    return paths


def _draw_cross(canvas: np.ndarray, point: np.ndarray, color):
    height, width = canvas.shape[:2]
    x = int(round(float(point[0]) * (width - 1)))
    y = int(round(float(point[1]) * (height - 1)))
    cv2.drawMarker(canvas, (x, y), color, markerType=cv2.MARKER_CROSS, markerSize=CROSS_SIZE,
                   thickness=1, line_type=cv2.LINE_8)


def render_overlay(image: np.ndarray, pred: np.ndarray, path: str,
                   gt: Optional[np.ndarray] = None) -> str:
    """Image couleur (PPM) avec une croix 3x3 par landmark prédit (vert) et vrai (rouge)"""
    gray = np.asarray(image)
    if gray.ndim == 3:
        gray = gray[0]
    canvas = cv2.cvtColor(to_uint8(gray), cv2.COLOR_GRAY2BGR)
    if gt is not None:
        for point in np.asarray(gt):
            _draw_cross(canvas, point, GROUND_TRUTH_COLOR)
    for point in np.asarray(pred):
        _draw_cross(canvas, point, PREDICTION_COLOR)
    write_image(path, canvas)
    return path
