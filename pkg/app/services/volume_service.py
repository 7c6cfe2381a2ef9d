"""
Geometria de volumes e rótulos: reamostragem, recorte, padding, caixas e normalização.
Todas as operações são puras (não alteram as entradas).
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from app.core.exceptions import (
    EmptyForegroundError,
    InvalidArgumentError,
    InvalidStatsError,
)
from app.utils import svol

logger = logging.getLogger(__name__)

Shape = Tuple[int, int, int]
Spacing = Tuple[float, float, float]

STD_FLOOR = 1e-8
DEFAULT_MARGIN = 0.1


# --- Tipos ---

@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidArgumentError(f"Volume precisa ser 3D com dimensões >= 1, recebeu {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("Volume contém intensidades não finitas")
        _check_spacing(self.spacing)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> Shape:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class LabelMap:
    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    num_classes: int = 15

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidArgumentError(f"LabelMap precisa ser 3D com dimensões >= 1, recebeu {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            if not np.array_equal(data, np.round(data)):
                raise InvalidArgumentError("LabelMap com valores não inteiros")
        if data.size and data.min() < 0:
            raise InvalidArgumentError("LabelMap com classe negativa")
        data = data.astype(np.uint8)
        if data.size and int(data.max()) >= self.num_classes:
            raise InvalidArgumentError(
                f"Classe {int(data.max())} fora de [0, {self.num_classes - 1}]"
            )
        _check_spacing(self.spacing)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> Shape:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray, num_classes: Optional[int] = None) -> "LabelMap":
        return LabelMap(data, self.spacing, self.num_classes if num_classes is None else num_classes)


@dataclass(frozen=True)
class BBox:
    lo: Shape
    hi: Shape
    frame_shape: Shape

    def __post_init__(self):
        lo, hi, frame = (tuple(int(v) for v in t) for t in (self.lo, self.hi, self.frame_shape))
        if not all(0 <= a < b <= f for a, b, f in zip(lo, hi, frame)):
            raise InvalidArgumentError(f"BBox inválida: lo={lo} hi={hi} frame={frame}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "frame_shape", frame)

    @property
    def extent(self) -> Shape:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    @property
    def slices(self):
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "frame_shape": list(self.frame_shape)}

    @classmethod
    def from_dict(cls, data: dict) -> "BBox":
        return cls(tuple(data["lo"]), tuple(data["hi"]), tuple(data["frame_shape"]))


@dataclass
class NormStats:
    clip_lo: float
    clip_hi: float
    mean: float
    std: float

    def validate(self):
        if not self.std > 0:
            raise InvalidStatsError(f"Desvio padrão inválido: {self.std}")
        if self.clip_lo > self.clip_hi:
            raise InvalidStatsError(f"clip_lo ({self.clip_lo}) > clip_hi ({self.clip_hi})")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NormStats":
        return cls(**{k: float(data[k]) for k in ("clip_lo", "clip_hi", "mean", "std")}).validate()


def _check_spacing(spacing):
    if len(spacing) != 3 or not all(float(s) > 0 for s in spacing):
        raise InvalidArgumentError(f"Espaçamento precisa ser positivo, recebeu {spacing}")


def _check_target(target_shape) -> Shape:
    target = tuple(int(t) for t in target_shape)
    if len(target) != 3 or min(target) < 1:
        raise InvalidArgumentError(f"Shape alvo inválido: {target_shape}")
    return target


def _rescaled_spacing(spacing: Spacing, source: Shape, target: Shape) -> Spacing:
    return tuple(s * a / b for s, a, b in zip(spacing, source, target))


# --- Reamostragem ---

def resample_image(v: Volume, target_shape) -> Volume:
    """Trilinear (align_corners=False, bordas replicadas). Espaçamento escala com a razão de shapes."""
    target = _check_target(target_shape)
    if target == v.shape:
        return Volume(v.data.copy(), v.spacing)

    tensor = torch.from_numpy(np.ascontiguousarray(v.data))[None, None]
    resized = F.interpolate(tensor, size=target, mode="trilinear", align_corners=False)
    return Volume(resized[0, 0].numpy(), _rescaled_spacing(v.spacing, v.shape, target))


def nearest_indices(source: int, target: int) -> np.ndarray:
    # centro do voxel alvo mapeado no grid de origem
    idx = np.floor((np.arange(target) + 0.5) * source / target).astype(np.int64)
    return np.clip(idx, 0, source - 1)


def resample_label(l: LabelMap, target_shape) -> LabelMap:
    """Vizinho mais próximo: nunca cria classes que não existiam na entrada."""
    target = _check_target(target_shape)
    if target == l.shape:
        return l.with_data(l.data.copy())

    iz, iy, ix = (nearest_indices(s, t) for s, t in zip(l.shape, target))
    data = l.data[np.ix_(iz, iy, ix)]
    return LabelMap(data, _rescaled_spacing(l.spacing, l.shape, target), l.num_classes)


# --- Normalização ---

def compute_foreground_stats(cases: Iterable[Tuple[Volume, LabelMap]]) -> NormStats:
    """Percentis 0.5/99.5, média e desvio globais dos voxels com rótulo > 0 (todos os casos juntos)."""
    pooled = []
    for volume, label in cases:
        if volume.shape != label.shape:
            raise InvalidArgumentError(f"Volume {volume.shape} e rótulo {label.shape} não batem")
        pooled.append(volume.data[label.data > 0].astype(np.float64))

    values = np.concatenate(pooled) if pooled else np.empty(0)
    if values.size == 0:
        raise EmptyForegroundError("Nenhum voxel de foreground para calcular estatísticas")

    clip_lo, clip_hi = np.percentile(values, [0.5, 99.5])
    std = max(float(values.std()), STD_FLOOR)
    stats = NormStats(float(clip_lo), float(clip_hi), float(values.mean()), std)
    logger.info(
        f"Estatísticas de foreground: {values.size} voxels, clip=[{stats.clip_lo:.2f}, {stats.clip_hi:.2f}], "
        f"média={stats.mean:.2f}, dp={stats.std:.2f}"
    )
    return stats


def clip_and_normalize(v: Volume, s: NormStats) -> Volume:
    s.validate()
    clipped = np.clip(v.data.astype(np.float64), s.clip_lo, s.clip_hi)
    return Volume(((clipped - s.mean) / s.std).astype(np.float32), v.spacing)


# --- Caixas ---

def full_frame_box(shape) -> BBox:
    shape = tuple(int(s) for s in shape)
    return BBox((0, 0, 0), shape, shape)


def _mask_bbox(mask: np.ndarray, margin_fraction: float) -> Optional[BBox]:
    if margin_fraction < 0:
        raise InvalidArgumentError(f"margin_fraction negativo: {margin_fraction}")
    coords = np.nonzero(mask)
    if coords[0].size == 0:
        return None

    lo, hi = [], []
    for axis, c in enumerate(coords):
        a, b = int(c.min()), int(c.max()) + 1
        # margem arredondada para cima; o epsilon evita 0.1*10 virar 2
        pad = int(math.ceil(margin_fraction * (b - a) - 1e-9))
        lo.append(max(0, a - pad))
        hi.append(min(mask.shape[axis], b + pad))
    return BBox(tuple(lo), tuple(hi), mask.shape)


def bbox_of_foreground(l: LabelMap, margin_fraction: float = DEFAULT_MARGIN) -> Optional[BBox]:
    """Menor caixa com todos os voxels > 0, expandida por eixo. None quando não há foreground."""
    return _mask_bbox(l.data > 0, margin_fraction)


def body_box(v: Volume, threshold: float, margin_fraction: float = DEFAULT_MARGIN) -> BBox:
    """Caixa do corpo por limiar de intensidade; cai para o quadro inteiro se nada passar do limiar."""
    box = _mask_bbox(v.data > threshold, margin_fraction)
    return box if box is not None else full_frame_box(v.shape)


def scale_bbox(b: BBox, from_shape, to_shape) -> BBox:
    """lo arredonda para baixo e hi para cima (aritmética inteira exata)."""
    src = _check_target(from_shape)
    dst = _check_target(to_shape)

    lo, hi = [], []
    for a, z, f, t in zip(b.lo, b.hi, src, dst):
        new_lo = min(max(a * t // f, 0), t - 1)
        new_hi = min(max(-(-z * t // f), new_lo + 1), t)
        lo.append(new_lo)
        hi.append(new_hi)
    return BBox(tuple(lo), tuple(hi), dst)


def _check_box_in_frame(b: BBox, shape):
    if any(h > s for h, s in zip(b.hi, shape)) or len(shape) != 3:
        raise InvalidArgumentError(f"Caixa {b.lo}-{b.hi} fora do quadro {shape}")


def crop(x: Union[Volume, LabelMap], b: BBox):
    _check_box_in_frame(b, x.shape)
    data = x.data[b.slices].copy()
    if isinstance(x, LabelMap):
        return x.with_data(data)
    return Volume(data, x.spacing)


def restore_to_canvas(l: LabelMap, b: BBox, original_shape) -> LabelMap:
    """Reamostra o rótulo para a extensão da caixa e cola numa tela zerada do tamanho original."""
    shape = _check_target(original_shape)
    _check_box_in_frame(b, shape)
    if b.frame_shape != shape:
        raise InvalidArgumentError(f"Caixa indexa {b.frame_shape}, mas a tela é {shape}")

    roi = resample_label(l, b.extent)
    canvas = np.zeros(shape, dtype=np.uint8)
    canvas[b.slices] = roi.data
    return LabelMap(canvas, roi.spacing, l.num_classes)


# --- Entrada/Saída ---

def load_volume(path) -> Volume:
    data, spacing, _ = svol.read_svol(path)
    return Volume(data.astype(np.float32), spacing)


def save_volume(v: Volume, path):
    svol.write_svol(path, v.data, v.spacing, "f32")


def load_label(path, num_classes: int = 15) -> LabelMap:
    data, spacing, _ = svol.read_svol(path)
    return LabelMap(data, spacing, num_classes)


def save_label(l: LabelMap, path):
    svol.write_svol(path, l.data, l.spacing, "u8")
