"""
Aumento de dados 3D no estilo nnU-Net: rotação, escala, deformação elástica,
ruído gaussiano, blur, brilho, contraste, baixa resolução e gamma.

Transformações espaciais são aplicadas igualmente na imagem (linear) e no rótulo
(vizinho mais próximo, borda replicada), então o rótulo nunca ganha classes novas.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

from app.core.exceptions import ShapeMismatchError
from app.services.volume_service import Volume, nearest_indices, resample_image

logger = logging.getLogger(__name__)

PLANES = ((1, 2), (0, 2), (0, 1))


@dataclass(frozen=True)
class AugmentParams:
    p_rotate: float = 0.2
    max_angle_deg: float = 30.0
    p_scale: float = 0.2
    scale_range: Tuple[float, float] = (0.7, 1.4)
    p_elastic: float = 0.2
    elastic_alpha: float = 2.0  # deslocamento máximo aproximado, em voxels
    elastic_sigma: float = 3.0
    p_noise: float = 0.1
    noise_variance: Tuple[float, float] = (0.0, 0.1)
    p_blur: float = 0.2
    blur_sigma: Tuple[float, float] = (0.5, 1.0)
    p_brightness: float = 0.15
    brightness_range: Tuple[float, float] = (0.75, 1.25)
    p_contrast: float = 0.15
    contrast_range: Tuple[float, float] = (0.75, 1.25)
    p_lowres: float = 0.25
    lowres_zoom: Tuple[float, float] = (0.5, 1.0)
    p_gamma: float = 0.3
    gamma_range: Tuple[float, float] = (0.7, 1.5)


DEFAULT_PARAMS = AugmentParams()


# --- Espaciais ---

def rotate(image: np.ndarray, label: np.ndarray, angle_deg: float, plane=(1, 2)):
    """Rotação em torno do centro do volume no plano dado. Múltiplos de 90° em plano quadrado são permutações exatas."""
    a, b = plane
    quarter = angle_deg / 90.0
    if quarter == int(quarter) and image.shape[a] == image.shape[b]:
        k = -int(quarter) % 4
        return (
            np.ascontiguousarray(np.rot90(image, k, axes=plane)),
            np.ascontiguousarray(np.rot90(label, k, axes=plane)),
        )

    theta = np.deg2rad(angle_deg)
    matrix = np.eye(3)
    matrix[a, a], matrix[a, b] = np.cos(theta), -np.sin(theta)
    matrix[b, a], matrix[b, b] = np.sin(theta), np.cos(theta)
    return _affine(image, label, matrix)


def scale(image: np.ndarray, label: np.ndarray, factor: float):
    # fator > 1 aproxima (amostra uma região menor)
    return _affine(image, label, np.eye(3) / factor)


def _affine(image, label, matrix):
    center = (np.array(image.shape, dtype=np.float64) - 1) / 2
    offset = center - matrix @ center
    out_image = ndimage.affine_transform(image, matrix, offset=offset, order=1, mode="nearest")
    out_label = ndimage.affine_transform(label, matrix, offset=offset, order=0, mode="nearest")
    return out_image.astype(np.float32), out_label.astype(label.dtype)


def elastic(image: np.ndarray, label: np.ndarray, rng: np.random.Generator, alpha: float, sigma: float):
    coords = np.indices(image.shape, dtype=np.float64)
    for axis in range(3):
        field = ndimage.gaussian_filter(rng.uniform(-1, 1, image.shape), sigma, mode="constant")
        peak = np.abs(field).max()
        if peak > 0:
            coords[axis] += field / peak * alpha
    out_image = ndimage.map_coordinates(image, coords, order=1, mode="nearest")
    out_label = ndimage.map_coordinates(label, coords, order=0, mode="nearest")
    return out_image.astype(np.float32), out_label.astype(label.dtype)


# --- Intensidade ---

def gaussian_noise(image, rng, variance):
    return image + rng.normal(0.0, np.sqrt(variance), image.shape)


def gaussian_blur(image, sigma):
    return ndimage.gaussian_filter(image, sigma)


def brightness(image, factor):
    return image * factor


def contrast(image, factor):
    lo, hi = image.min(), image.max()
    mean = image.mean()
    return np.clip((image - mean) * factor + mean, lo, hi)


def low_resolution(image, zoom):
    """Reduz por vizinho mais próximo e volta por interpolação linear."""
    small = tuple(max(1, int(round(s * zoom))) for s in image.shape)
    iz, iy, ix = (nearest_indices(s, t) for s, t in zip(image.shape, small))
    down = image[np.ix_(iz, iy, ix)]
    return resample_image(Volume(down.astype(np.float32)), image.shape).data


def gamma(image, value):
    lo, hi = image.min(), image.max()
    span = hi - lo
    if span <= 0:
        return image
    return ((image - lo) / span) ** value * span + lo


# --- Composição ---

def augment(
    image: np.ndarray,
    label: np.ndarray,
    rng: np.random.Generator,
    strength: float = 1.0,
    params: AugmentParams = DEFAULT_PARAMS,
):
    """
    Aplica cada transformação com probabilidade p * strength (limitada a 1).
    strength 0 devolve cópias idênticas. O número de sorteios não depende de quais
    transformações foram aplicadas, então a mesma seed dá sempre a mesma saída.
    """
    if image.shape != label.shape:
        raise ShapeMismatchError(f"Imagem {image.shape} e rótulo {label.shape} com shapes diferentes")

    image = np.array(image, dtype=np.float64)
    label = np.array(label)
    if strength <= 0:
        return image.astype(np.float32), label

    def chance(p):
        return rng.random() < min(1.0, p * strength)

    # 1. Espaciais
    do_rotate, angle, plane = chance(params.p_rotate), rng.uniform(-1, 1) * params.max_angle_deg, int(rng.integers(3))
    do_scale, factor = chance(params.p_scale), rng.uniform(*params.scale_range)
    do_elastic, elastic_seed = chance(params.p_elastic), int(rng.integers(2 ** 31))
    if do_rotate:
        image, label = rotate(image, label, angle, PLANES[plane])
    if do_scale:
        image, label = scale(image, label, factor)
    if do_elastic:
        image, label = elastic(image, label, np.random.default_rng(elastic_seed), params.elastic_alpha, params.elastic_sigma)
    image = np.asarray(image, dtype=np.float64)

    # 2. Intensidade
    draws = [
        (chance(params.p_noise), rng.uniform(*params.noise_variance), gaussian_noise),
        (chance(params.p_blur), rng.uniform(*params.blur_sigma), gaussian_blur),
        (chance(params.p_brightness), rng.uniform(*params.brightness_range), brightness),
        (chance(params.p_contrast), rng.uniform(*params.contrast_range), contrast),
        (chance(params.p_lowres), rng.uniform(*params.lowres_zoom), low_resolution),
        (chance(params.p_gamma), rng.uniform(*params.gamma_range), gamma),
    ]
    noise_seed = int(rng.integers(2 ** 31))
    for apply, value, transform in draws:
        if not apply:
            continue
        if transform is gaussian_noise:
            image = gaussian_noise(image, np.random.default_rng(noise_seed), value)
        else:
            image = np.asarray(transform(image, value), dtype=np.float64)

    return image.astype(np.float32), label
