import os

import cv2
import numpy as np

# Poids de luminance appliqués à (R, G, B)
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def read_grayscale(path: str) -> np.ndarray:
    """Lit une image et retourne sa luminance float64 dans [0, 1], forme (H, W)"""
    if not os.path.isfile(path):
        raise OSError(f"Image introuvable: {path}")
    image = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if image is None:
        raise OSError(f"Image illisible: {path}")

    scale = float(np.iinfo(image.dtype).max) if np.issubdtype(image.dtype, np.integer) else 1.0
    image = image.astype(np.float64) / scale
    if image.ndim == 3:
        # OpenCV charge en BGR(A)
        red, green, blue = LUMA_WEIGHTS
        image = blue * image[..., 0] + green * image[..., 1] + red * image[..., 2]
    return np.clip(image, 0.0, 1.0)


def resize_bilinear(image: np.ndarray, width: int, height: int) -> np.ndarray:
    if image.shape[1] == width and image.shape[0] == height:
        return image.astype(np.float64, copy=True)
    return cv2.resize(image.astype(np.float64), (width, height), interpolation=cv2.INTER_LINEAR)


def to_uint8(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path: str, image: np.ndarray):
    """Écrit une image 8 bits (PGM pour (H, W), PPM pour (H, W, 3) en BGR)"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    if not cv2.imwrite(path, to_uint8(image)):
        raise OSError(f"Échec d'écriture de l'image: {path}")
