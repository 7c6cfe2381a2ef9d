"""
Inferência em dois estágios.

1. Estágio 1: volume inteiro normalizado e reamostrado -> máscara binária -> caixa do abdômen.
2. Estágio 2: ROI recortado -> órgãos e tumor -> sobreposição -> volta para a extensão da caixa.
3. Pós-processamento (maior componente por órgão; tumor isento) e restauração na tela nativa.
"""
import json
import logging
import os
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from app.core.config import PipelineSection
from app.core.exceptions import InvalidArgumentError, MissingArtifactError
from app.services.label_service import (
    NUM_CLASSES,
    TUMOR_CLASS,
    largest_component_filter,
    merge_organ_tumor,
)
from app.services.net_service import ModelHandle, load_checkpoint, predict_label, save_checkpoint
from app.services.volume_service import (
    BBox,
    LabelMap,
    NormStats,
    Volume,
    bbox_of_foreground,
    clip_and_normalize,
    crop,
    full_frame_box,
    resample_image,
    resample_label,
    restore_to_canvas,
    scale_bbox,
)

logger = logging.getLogger(__name__)

BUNDLE_FILE = "bundle.json"
StageHook = Callable[[str, float], None]


@dataclass(frozen=True)
class PipelineBundle:
    stage1_model: ModelHandle
    organ_model: Optional[ModelHandle]
    tumor_model: Optional[ModelHandle]
    stage1_stats: NormStats
    stage2_stats: NormStats
    options: PipelineSection

    def __post_init__(self):
        if self.stage1_model.spec.num_classes != 2:
            raise InvalidArgumentError("Modelo do estágio 1 precisa ser binário")
        if self.organ_model is None and self.tumor_model is None:
            raise InvalidArgumentError("Bundle precisa de pelo menos um modelo de estágio 2")
        if self.organ_model is not None and not 2 <= self.organ_model.spec.num_classes <= TUMOR_CLASS:
            raise InvalidArgumentError(f"Modelo de órgãos com {self.organ_model.spec.num_classes} classes")
        if self.tumor_model is not None and self.tumor_model.spec.num_classes != 2:
            raise InvalidArgumentError("Modelo de tumor precisa ser binário")
        self.stage1_stats.validate()
        self.stage2_stats.validate()


def _timed(hook: Optional[StageHook], name: str, fn):
    start = time.perf_counter()
    result = fn()
    if hook is not None:
        hook(name, time.perf_counter() - start)
    return result


# --- Estágios ---

def locate_abdomen(bundle: PipelineBundle, v: Volume) -> BBox:
    """Caixa do abdômen no grid nativo. Máscara vazia cai para o quadro inteiro."""
    shape = bundle.options.stage1_shape
    small = resample_image(clip_and_normalize(v, bundle.stage1_stats), shape)
    mask = predict_label(bundle.stage1_model, small)
    box = bbox_of_foreground(mask, bundle.options.margin_fraction)
    if box is None:
        logger.warning("Estágio 1 não encontrou abdômen; usando o volume inteiro")
        return full_frame_box(v.shape)
    return scale_bbox(box, shape, v.shape)


def _zeros(shape, spacing) -> LabelMap:
    return LabelMap(np.zeros(shape, dtype=np.uint8), spacing, NUM_CLASSES)


def segment_roi(bundle: PipelineBundle, v: Volume, b: BBox, hook: Optional[StageHook] = None) -> LabelMap:
    """Rótulo do ROI na resolução nativa (shape == b.extent)."""
    roi = crop(v, b)
    x = resample_image(clip_and_normalize(roi, bundle.stage2_stats), bundle.options.stage2_shape)

    def organs():
        if bundle.organ_model is None:
            return _zeros(x.shape, x.spacing)
        return _timed(hook, "organ", lambda: predict_label(bundle.organ_model, x))

    def tumor():
        if bundle.tumor_model is None:
            return _zeros(x.shape, x.spacing)
        return _timed(hook, "tumor", lambda: predict_label(bundle.tumor_model, x))

    if bundle.options.concurrent_stage2:
        with ThreadPoolExecutor(max_workers=2) as pool:
            organ_future, tumor_future = pool.submit(organs), pool.submit(tumor)
            organ_seg, tumor_seg = organ_future.result(), tumor_future.result()
    else:
        organ_seg, tumor_seg = organs(), tumor()

    merged = merge_organ_tumor(organ_seg, tumor_seg)
    return resample_label(merged, b.extent)


def run_pipeline(bundle: PipelineBundle, v: Volume, hook: Optional[StageHook] = None) -> LabelMap:
    box = _timed(hook, "locate", lambda: locate_abdomen(bundle, v))
    roi = segment_roi(bundle, v, box, hook)
    if bundle.options.postprocess:
        roi = _timed(
            hook,
            "postprocess",
            lambda: largest_component_filter(roi, bundle.options.connectivity, exclude=(TUMOR_CLASS,)),
        )
    out = restore_to_canvas(roi, box, v.shape)
    return LabelMap(out.data, v.spacing, NUM_CLASSES)


class TwoStagePipeline:
    """Imutável depois de construído; pode ser compartilhado entre threads para inferência por caso."""

    def __init__(self, bundle: PipelineBundle):
        self._bundle = bundle

    @property
    def bundle(self) -> PipelineBundle:
        return self._bundle

    def __call__(self, v: Volume, hook: Optional[StageHook] = None) -> LabelMap:
        return run_pipeline(self._bundle, v, hook)


# --- Persistência ---

def save_bundle(bundle: PipelineBundle, directory: str):
    os.makedirs(directory, exist_ok=True)
    save_checkpoint(bundle.stage1_model, os.path.join(directory, "stage1.ckpt"))
    if bundle.organ_model is not None:
        save_checkpoint(bundle.organ_model, os.path.join(directory, "organ.ckpt"))
    if bundle.tumor_model is not None:
        save_checkpoint(bundle.tumor_model, os.path.join(directory, "tumor.ckpt"))
    meta = {
        "stage1_stats": bundle.stage1_stats.to_dict(),
        "stage2_stats": bundle.stage2_stats.to_dict(),
        "options": json.loads(bundle.options.json()),
        "has_organ": bundle.organ_model is not None,
        "has_tumor": bundle.tumor_model is not None,
        # muda a cada gravação; o worker usa como chave de cache
        "bundle_id": uuid.uuid4().hex,
    }
    with open(os.path.join(directory, BUNDLE_FILE), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_bundle(directory: str, options=None) -> PipelineBundle:
    """`options` (PipelineSection) sobrescreve as opções gravadas, se dado."""
    meta_path = os.path.join(directory, BUNDLE_FILE)
    if not os.path.exists(meta_path):
        raise MissingArtifactError(meta_path, "infer")
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = json.load(f)

    def _model(name, present):
        return load_checkpoint(os.path.join(directory, name)) if present else None

    return PipelineBundle(
        stage1_model=load_checkpoint(os.path.join(directory, "stage1.ckpt")),
        organ_model=_model("organ.ckpt", meta["has_organ"]),
        tumor_model=_model("tumor.ckpt", meta["has_tumor"]),
        stage1_stats=NormStats.from_dict(meta["stage1_stats"]),
        stage2_stats=NormStats.from_dict(meta["stage2_stats"]),
        options=options if options is not None else PipelineSection.parse_obj(meta["options"]),
    )


def bundle_version(directory: str) -> Optional[str]:
    """Identificador da gravação atual do bundle (None se não houver bundle.json)."""
    meta_path = os.path.join(directory, BUNDLE_FILE)
    if not os.path.exists(meta_path):
        return None
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = json.load(f)
    return meta.get("bundle_id") or str(os.stat(meta_path).st_mtime_ns)
