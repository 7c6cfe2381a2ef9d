"""
Álgebra de rótulos: binarização do estágio 1, máscaras por ramo, correção de pseudo-rótulos,
sobreposição do tumor e filtro de maior componente conexo.

Layout de classes: 0 fundo, 1..13 órgãos (ordem abaixo), 14 tumor.
"""
import logging
from dataclasses import dataclass, field
from typing import FrozenSet, Iterable

import numpy as np
from scipy import ndimage

from app.core.exceptions import InvalidArgumentError, ShapeMismatchError
from app.services.volume_service import LabelMap

logger = logging.getLogger(__name__)

ORGAN_NAMES = (
    "Liver", "Right Kidney", "Spleen", "Pancreas", "Aorta", "IVC", "RAG", "LAG",
    "Gallbladder", "Esophagus", "Stomach", "Duodenum", "Left Kidney",
)
ORGAN_CLASSES = tuple(range(1, len(ORGAN_NAMES) + 1))
TUMOR_CLASS = 14
NUM_CLASSES = 15

CONNECTIVITY = {6: 1, 18: 2, 26: 3}


def class_name(class_id: int) -> str:
    if class_id == TUMOR_CLASS:
        return "Tumor"
    if class_id == 0:
        return "Background"
    return ORGAN_NAMES[class_id - 1]


@dataclass(frozen=True)
class PartialLabel:
    labels: LabelMap
    annotated_set: FrozenSet[int] = field(default_factory=frozenset)
    tumor_annotated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "annotated_set", frozenset(int(c) for c in self.annotated_set))
        present = set(np.unique(self.labels.data).tolist()) - {0}
        organs = present - {TUMOR_CLASS}
        if not organs <= self.annotated_set:
            raise InvalidArgumentError(
                f"Rótulo parcial tem órgãos {sorted(organs - self.annotated_set)} fora do conjunto anotado"
            )
        if TUMOR_CLASS in present and not self.tumor_annotated:
            raise InvalidArgumentError("Rótulo parcial tem tumor mas tumor_annotated=False")


def annotated_set_of(l: LabelMap) -> FrozenSet[int]:
    """Conjunto A: classes de órgão presentes no rótulo parcial."""
    present = set(np.unique(l.data).tolist())
    return frozenset(c for c in present if c in ORGAN_CLASSES)


def _check_same_shape(a: LabelMap, b: LabelMap):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"Shapes diferentes: {a.shape} vs {b.shape}")


def binarize_foreground(l: LabelMap) -> LabelMap:
    """Estágio 1: tudo que é >= 1 vira 1."""
    return l.with_data((l.data >= 1).astype(np.uint8), num_classes=2)


def mask_tumor_out(l: LabelMap) -> LabelMap:
    """Entrada do ramo de órgãos: tumor vira fundo."""
    data = l.data.copy()
    data[data == TUMOR_CLASS] = 0
    return l.with_data(data)


def mask_organs_out(l: LabelMap) -> LabelMap:
    """Entrada do ramo de tumor: órgãos viram fundo e o tumor vira 1."""
    return l.with_data((l.data == TUMOR_CLASS).astype(np.uint8), num_classes=2)


def correct_pseudo_label(pseudo: LabelMap, partial: PartialLabel) -> LabelMap:
    """
    Correção estática do pseudo-rótulo de órgãos:
    1. parte do pseudo-rótulo
    2. zera voxels cuja classe pertence a A
    3. copia os voxels anotados do rótulo parcial
    """
    _check_same_shape(pseudo, partial.labels)
    out = pseudo.data.copy()
    if partial.annotated_set:
        out[np.isin(pseudo.data, sorted(partial.annotated_set))] = 0
    annotated = partial.labels.data > 0
    out[annotated] = partial.labels.data[annotated]
    return pseudo.with_data(out, num_classes=max(pseudo.num_classes, partial.labels.num_classes))


def correct_tumor_pseudo(teacher_pred: LabelMap, partial_tumor: LabelMap, annotated: bool) -> LabelMap:
    """
    Correção em tempo real do ramo de tumor. Em casos anotados os voxels anotados são forçados
    para 1 e as detecções extras do teacher ficam (união); sem anotação o pseudo-rótulo passa direto.
    """
    _check_same_shape(teacher_pred, partial_tumor)
    if not annotated:
        return teacher_pred.with_data(teacher_pred.data.copy())
    out = ((teacher_pred.data > 0) | (partial_tumor.data > 0)).astype(np.uint8)
    return teacher_pred.with_data(out, num_classes=2)


def merge_organ_tumor(organ_seg: LabelMap, tumor_seg: LabelMap) -> LabelMap:
    """Sobrepõe o tumor na segmentação de órgãos (o tumor ganha)."""
    _check_same_shape(organ_seg, tumor_seg)
    out = organ_seg.data.copy()
    out[tumor_seg.data > 0] = TUMOR_CLASS
    return LabelMap(out, organ_seg.spacing, NUM_CLASSES)


def largest_component_filter(
    l: LabelMap,
    connectivity: int = 26,
    exclude: Iterable[int] = (),
) -> LabelMap:
    """
    Para cada classe >= 1 mantém só o maior componente conexo.
    Empate de tamanho: fica o componente com o menor índice linear.
    Classes em `exclude` passam intactas (o pipeline exclui o tumor).
    """
    if connectivity not in CONNECTIVITY:
        raise InvalidArgumentError(f"Conectividade deve ser 6, 18 ou 26, recebeu {connectivity}")
    structure = ndimage.generate_binary_structure(3, CONNECTIVITY[connectivity])
    skip = set(int(c) for c in exclude)

    out = l.data.copy()
    linear = np.arange(l.data.size).reshape(l.shape)
    for class_id in np.unique(l.data):
        class_id = int(class_id)
        if class_id == 0 or class_id in skip:
            continue

        components, count = ndimage.label(l.data == class_id, structure=structure)
        if count <= 1:
            continue

        index = np.arange(1, count + 1)
        sizes = ndimage.sum_labels(np.ones_like(components), components, index)
        first = ndimage.minimum(linear, components, index)
        # maior tamanho primeiro; no empate, menor índice linear
        keep = index[np.lexsort((first, -sizes))[0]]
        out[(components > 0) & (components != keep)] = 0
        logger.debug(f"Classe {class_id}: {count - 1} componente(s) removido(s)")

    return l.with_data(out)
