"""
Preparação das amostras de treino por tarefa (estágio 1, professor, aluno de órgãos, tumor).

O ROI de treino do estágio 2 é a caixa do foreground do rótulo do caso com a mesma margem
da inferência, então o estágio 2 treina na escala do recorte do estágio 1. O pseudo-rótulo
fica no shape da tarefa e o provenance.json guarda a caixa em que ele foi previsto.
Nenhuma amostra depende da verdade escondida.
"""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import MissingArtifactError, ShapeMismatchError
from app.schemas.dataset import CaseRecord, DatasetManifest, Supervision
from app.services.label_service import (
    PartialLabel,
    binarize_foreground,
    correct_pseudo_label,
    mask_organs_out,
    mask_tumor_out,
)
from app.services.volume_service import (
    BBox,
    LabelMap,
    NormStats,
    Volume,
    bbox_of_foreground,
    body_box,
    clip_and_normalize,
    compute_foreground_stats,
    crop,
    full_frame_box,
    load_label,
    load_volume,
    resample_image,
    resample_label,
    restore_to_canvas,
)

logger = logging.getLogger(__name__)

PROVENANCE_FILE = "provenance.json"


class SampleKind(str, Enum):
    LABELED = "LABELED"
    CPL = "CPL"
    PL = "PL"
    TUMOR_ANNOTATED = "TUMOR_ANNOTATED"


@dataclass(frozen=True)
class TrainSample:
    image: np.ndarray  # float32 (D, H, W), já normalizada e no shape da tarefa
    target: np.ndarray  # uint8 (D, H, W)
    kind: SampleKind
    case_id: str

    def __post_init__(self):
        if self.image.shape != self.target.shape:
            raise ValueError(f"Imagem {self.image.shape} e alvo {self.target.shape} com shapes diferentes")


# --- Leitura ---

def load_case_image(manifest: DatasetManifest, record: CaseRecord) -> Volume:
    return load_volume(manifest.path(record.image_path))


def load_released_label(manifest: DatasetManifest, record: CaseRecord) -> LabelMap:
    return load_label(manifest.path(record.label_path))


def pseudo_label_path(pseudo_dir: str, case_id: str) -> str:
    return os.path.join(pseudo_dir, f"{case_id}.svol")


def load_pseudo_label(pseudo_dir: str, case_id: str) -> LabelMap:
    path = pseudo_label_path(pseudo_dir, case_id)
    if not os.path.exists(path):
        raise MissingArtifactError(path, "pseudo")
    return load_label(path)


def load_pseudo_roi(pseudo_dir: str, case_id: str, native_shape) -> BBox:
    """Caixa nativa em que o pseudo-rótulo do caso foi previsto (provenance.json)."""
    path = os.path.join(pseudo_dir, PROVENANCE_FILE)
    if not os.path.exists(path):
        raise MissingArtifactError(path, "pseudo")
    with open(path, encoding="utf-8") as f:
        entry = json.load(f)["cases"].get(case_id)
    if entry is None:
        raise MissingArtifactError(f"{path} ({case_id})", "pseudo")

    box = BBox.from_dict(entry["roi"])
    if box.frame_shape != tuple(native_shape):
        raise ShapeMismatchError(f"ROI de {case_id} indexa {box.frame_shape}, o caso tem {tuple(native_shape)}")
    return box


def fit_norm_stats(manifest: DatasetManifest) -> NormStats:
    """Estatísticas globais de foreground dos casos de treino rotulados (rótulos liberados)."""
    labeled = [r for r in manifest.train_cases() if r.label_path is not None]
    return compute_foreground_stats(
        (load_case_image(manifest, r), load_released_label(manifest, r)) for r in labeled
    )


# --- Geometria das tarefas ---

def stage2_roi(volume: Volume, pipeline, label: Optional[LabelMap] = None) -> BBox:
    """
    Caixa do foreground do rótulo nativo, expandida por pipeline.margin_fraction como a caixa do estágio 1.
    Sem rótulo ou com rótulo vazio, cai para a caixa do corpo.
    """
    box = bbox_of_foreground(label, pipeline.margin_fraction) if label is not None else None
    if box is None:
        return body_box(volume, pipeline.body_threshold, pipeline.margin_fraction)
    return box


def prepare_input(volume: Volume, box: BBox, stats: NormStats, shape) -> Volume:
    """crop -> normaliza -> reamostra (mesma ordem da inferência)."""
    return resample_image(clip_and_normalize(crop(volume, box), stats), shape)


def prepare_target(label: LabelMap, box: BBox, shape) -> LabelMap:
    return resample_label(crop(label, box), shape)


def _corrected_pseudo(
    manifest: DatasetManifest, record: CaseRecord, volume: Volume, pseudo_dir: str
) -> Tuple[LabelMap, BBox]:
    """Pseudo-rótulo e sua caixa; em casos parciais os órgãos anotados sobrescrevem a previsão."""
    pseudo = load_pseudo_label(pseudo_dir, record.case_id)
    box = load_pseudo_roi(pseudo_dir, record.case_id, volume.shape)
    if record.supervision != Supervision.PARTIAL_ORGAN:
        return pseudo, box
    partial = mask_tumor_out(prepare_target(load_released_label(manifest, record), box, pseudo.shape))
    corrected = correct_pseudo_label(
        pseudo, PartialLabel(partial, frozenset(record.annotated_organ_set), record.tumor_annotated)
    )
    return corrected, box


def _map_cases(fn: Callable, records: Sequence[CaseRecord], workers: int) -> list:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, records))
    return [fn(r) for r in records]


# --- Amostras do estágio 2 (órgãos) ---

def organ_labeled_samples(
    manifest: DatasetManifest, records: Sequence[CaseRecord], stats: NormStats, pipeline, workers: int = 1
) -> List[TrainSample]:
    """Rótulos liberados com o tumor apagado. Em casos parciais os órgãos ausentes viram fundo."""
    shape = pipeline.stage2_shape

    def _one(record):
        volume = load_case_image(manifest, record)
        released = load_released_label(manifest, record)
        box = stage2_roi(volume, pipeline, released)
        target = mask_tumor_out(prepare_target(released, box, shape))
        image = prepare_input(volume, box, stats, shape)
        return TrainSample(image.data, target.data, SampleKind.LABELED, record.case_id)

    return _map_cases(_one, records, workers)


def organ_cpl_samples(
    manifest: DatasetManifest,
    records: Sequence[CaseRecord],
    stats: NormStats,
    pipeline,
    pseudo_dir: str,
    workers: int = 1,
) -> List[TrainSample]:
    """Correção estática: o professor está congelado, então a correção é feita uma vez no carregamento."""
    shape = pipeline.stage2_shape

    def _one(record):
        volume = load_case_image(manifest, record)
        corrected, box = _corrected_pseudo(manifest, record, volume, pseudo_dir)
        image = prepare_input(volume, box, stats, shape)
        return TrainSample(image.data, corrected.data, SampleKind.CPL, record.case_id)

    return _map_cases(_one, records, workers)


def organ_pl_samples(
    manifest: DatasetManifest,
    records: Sequence[CaseRecord],
    stats: NormStats,
    pipeline,
    pseudo_dir: str,
    workers: int = 1,
) -> List[TrainSample]:
    shape = pipeline.stage2_shape

    def _one(record):
        volume = load_case_image(manifest, record)
        pseudo, box = _corrected_pseudo(manifest, record, volume, pseudo_dir)
        image = prepare_input(volume, box, stats, shape)
        return TrainSample(image.data, pseudo.data, SampleKind.PL, record.case_id)

    return _map_cases(_one, records, workers)


# --- Amostras do estágio 2 (tumor) ---

def tumor_records(manifest: DatasetManifest) -> List[CaseRecord]:
    """Casos com anotação de tumor (possivelmente incompleta). Imagens sem rótulo não entram."""
    return [r for r in manifest.train_cases() if r.tumor_annotated and r.label_path is not None]


def tumor_samples(
    manifest: DatasetManifest, records: Sequence[CaseRecord], stats: NormStats, pipeline, workers: int = 1
) -> List[TrainSample]:
    shape = pipeline.stage2_shape

    def _one(record):
        volume = load_case_image(manifest, record)
        released = load_released_label(manifest, record)
        box = stage2_roi(volume, pipeline, released)
        target = mask_organs_out(prepare_target(released, box, shape))
        image = prepare_input(volume, box, stats, shape)
        return TrainSample(image.data, target.data, SampleKind.TUMOR_ANNOTATED, record.case_id)

    return _map_cases(_one, records, workers)


# --- Amostras do estágio 1 ---

def _stage1_target(manifest: DatasetManifest, record: CaseRecord, volume: Volume, pseudo_dir) -> Optional[LabelMap]:
    if record.supervision == Supervision.FULL_ORGAN:
        return load_released_label(manifest, record)
    if pseudo_dir is None:
        return None
    pseudo, box = _corrected_pseudo(manifest, record, volume, pseudo_dir)
    return restore_to_canvas(pseudo, box, volume.shape)


def stage1_samples(
    manifest: DatasetManifest,
    records: Sequence[CaseRecord],
    stats: NormStats,
    pipeline,
    pseudo_dir: Optional[str] = None,
    workers: int = 1,
) -> List[TrainSample]:
    """
    Volume inteiro, alvo binário (abdômen vs fundo).
    Casos completos usam o rótulo liberado; parciais e sem rótulo usam o pseudo-rótulo
    (corrigido, no caso parcial) devolvido à tela nativa pela sua caixa. Sem pseudo_dir, só os completos entram.
    """
    shape = pipeline.stage1_shape

    def _one(record):
        volume = load_case_image(manifest, record)
        target = _stage1_target(manifest, record, volume, pseudo_dir)
        if target is None:
            return None
        box = full_frame_box(volume.shape)
        image = prepare_input(volume, box, stats, shape)
        binary = binarize_foreground(resample_label(target, shape))
        kind = SampleKind.LABELED if record.supervision == Supervision.FULL_ORGAN else SampleKind.PL
        return TrainSample(image.data, binary.data, kind, record.case_id)

    samples = [s for s in _map_cases(_one, records, workers) if s is not None]
    logger.info(f"Estágio 1: {len(samples)} amostras de {len(records)} casos")
    return samples


# --- Pools por tarefa ---

class TaskData:
    """
    Pools de amostras de um dataset, carregados sob demanda e guardados em cache.
    `with_pseudo` troca o diretório de pseudo-rótulos reaproveitando os pools que não dependem dele.
    """

    def __init__(self, manifest: DatasetManifest, stats: NormStats, pipeline, pseudo_dir: Optional[str] = None, workers: int = 1):
        self.manifest = manifest
        self.stats = stats
        self.pipeline = pipeline
        self.pseudo_dir = pseudo_dir
        self.workers = workers

    def _records(self, kind: Supervision) -> List[CaseRecord]:
        return self.manifest.by_supervision(kind)

    def _require_pseudo(self) -> str:
        if self.pseudo_dir is None:
            raise MissingArtifactError("pseudo-rótulos", "pseudo")
        return self.pseudo_dir

    @cached_property
    def full(self) -> List[TrainSample]:
        return organ_labeled_samples(self.manifest, self._records(Supervision.FULL_ORGAN), self.stats, self.pipeline, self.workers)

    @cached_property
    def partial_naive(self) -> List[TrainSample]:
        return organ_labeled_samples(self.manifest, self._records(Supervision.PARTIAL_ORGAN), self.stats, self.pipeline, self.workers)

    @cached_property
    def cpl(self) -> List[TrainSample]:
        return organ_cpl_samples(
            self.manifest, self._records(Supervision.PARTIAL_ORGAN), self.stats, self.pipeline, self._require_pseudo(), self.workers
        )

    @cached_property
    def pl(self) -> List[TrainSample]:
        return organ_pl_samples(
            self.manifest, self._records(Supervision.UNLABELED), self.stats, self.pipeline, self._require_pseudo(), self.workers
        )

    @cached_property
    def tumor(self) -> List[TrainSample]:
        return tumor_samples(self.manifest, tumor_records(self.manifest), self.stats, self.pipeline, self.workers)

    @cached_property
    def stage1(self) -> List[TrainSample]:
        return stage1_samples(
            self.manifest, self.manifest.train_cases(), self.stats, self.pipeline, self.pseudo_dir, self.workers
        )

    def pseudo_records(self) -> List[CaseRecord]:
        """Casos que recebem pseudo-rótulo: parciais e sem rótulo do treino."""
        return self._records(Supervision.PARTIAL_ORGAN) + self._records(Supervision.UNLABELED)

    def with_pseudo(self, pseudo_dir: str) -> "TaskData":
        other = TaskData(self.manifest, self.stats, self.pipeline, pseudo_dir, self.workers)
        for name in ("full", "partial_naive", "tumor"):
            if name in self.__dict__:
                other.__dict__[name] = self.__dict__[name]
        return other
