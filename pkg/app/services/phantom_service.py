"""
Gerador determinístico de phantoms de abdômen 3D.

Reproduz os regimes de supervisão do dataset real em escala de bancada:
casos com todos os órgãos anotados, casos com anotação parcial e casos sem rótulo,
além de tumores anotados, parcialmente anotados e não anotados.
A verdade completa fica em `truth/` e nunca é lida pelo treino.
"""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from app.core.exceptions import ManifestError, PhantomConfigError
from app.schemas.dataset import (
    MANIFEST_VERSION,
    CaseRecord,
    DatasetManifest,
    PhantomConfig,
    Split,
    Supervision,
)
from app.services.label_service import NUM_CLASSES, TUMOR_CLASS
from app.services.volume_service import LabelMap, Volume, save_label, save_volume

logger = logging.getLogger(__name__)

MIN_EDGE = 8

# Layout canônico: centro (z, y, x) e semi-eixos como fração do volume, na ordem das classes 1..13
ORGAN_LAYOUT = (
    ((0.45, 0.40, 0.30), (0.16, 0.15, 0.15)),   # Liver
    ((0.55, 0.64, 0.26), (0.10, 0.07, 0.07)),   # Right Kidney
    ((0.42, 0.42, 0.74), (0.10, 0.10, 0.08)),   # Spleen
    ((0.52, 0.52, 0.54), (0.05, 0.05, 0.12)),   # Pancreas
    ((0.50, 0.70, 0.50), (0.20, 0.035, 0.035)), # Aorta
    ((0.50, 0.68, 0.40), (0.20, 0.035, 0.035)), # IVC
    ((0.36, 0.66, 0.32), (0.03, 0.02, 0.02)),   # RAG
    ((0.36, 0.66, 0.66), (0.03, 0.02, 0.02)),   # LAG
    ((0.56, 0.28, 0.38), (0.04, 0.03, 0.03)),   # Gallbladder
    ((0.20, 0.62, 0.52), (0.08, 0.025, 0.025)), # Esophagus
    ((0.34, 0.32, 0.62), (0.08, 0.08, 0.09)),   # Stomach
    ((0.60, 0.46, 0.44), (0.05, 0.04, 0.05)),   # Duodenum
    ((0.55, 0.64, 0.76), (0.10, 0.07, 0.07)),   # Left Kidney
)
BODY_CENTER = (0.5, 0.5, 0.5)
BODY_AXES = (0.46, 0.42, 0.44)


@dataclass
class PhantomCase:
    image: Volume
    truth: LabelMap
    released: Optional[LabelMap]
    record: CaseRecord


def _ellipsoid(grid, center, axes) -> np.ndarray:
    dist = sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, axes))
    return dist <= 1.0


def _draw_annotated_subset(rng: np.random.Generator, num_organs: int) -> List[int]:
    # uniforme entre os subconjuntos próprios não vazios de {1..n}
    code = int(rng.integers(1, 2 ** num_organs - 1))
    return [k + 1 for k in range(num_organs) if code >> k & 1]


def _case_layout(index: int, cfg: PhantomConfig) -> Tuple[str, Supervision, Split]:
    n_full, n_partial, n_unlabeled = cfg.n_full, cfg.n_partial, cfg.n_unlabeled
    if index < n_full:
        return f"case_{index:04d}", Supervision.FULL_ORGAN, Split.TRAIN
    if index < n_full + n_partial:
        return f"case_{index:04d}", Supervision.PARTIAL_ORGAN, Split.TRAIN
    if index < n_full + n_partial + n_unlabeled:
        return f"case_{index:04d}", Supervision.UNLABELED, Split.TRAIN
    return f"test_{index:04d}", Supervision.UNLABELED, Split.TEST


def validate_phantom_config(cfg: PhantomConfig):
    if min(cfg.volume_shape) < MIN_EDGE:
        raise PhantomConfigError(f"volume_shape {cfg.volume_shape} pequeno demais (mínimo {MIN_EDGE} por eixo)")
    if cfg.n_partial > 0 and cfg.num_organs < 2:
        raise PhantomConfigError("Casos parciais exigem pelo menos 2 órgãos")


def generate_case(cfg: PhantomConfig, index: int) -> PhantomCase:
    """Gera um caso. RNG próprio (seed XOR índice), então a ordem de geração não importa."""
    rng = np.random.default_rng(cfg.seed ^ index)
    case_id, supervision, split = _case_layout(index, cfg)
    shape = np.array(cfg.volume_shape, dtype=np.float64)
    grid = np.indices(cfg.volume_shape, dtype=np.float64)

    # 1. Corpo e órgãos (disjuntos: cada voxel fica com o primeiro órgão que o reivindica)
    body_center = shape * BODY_CENTER + rng.uniform(-1, 1, 3) * cfg.jitter_fraction * shape
    body = _ellipsoid(grid, body_center, shape * BODY_AXES)

    truth = np.zeros(cfg.volume_shape, dtype=np.uint8)
    organ_radius = {}
    for class_id in range(1, cfg.num_organs + 1):
        center_frac, axes_frac = ORGAN_LAYOUT[class_id - 1]
        center = shape * center_frac + rng.uniform(-1, 1, 3) * cfg.jitter_fraction * shape
        axes = np.maximum(shape * axes_frac * rng.uniform(0.9, 1.1), 1.0)
        mask = _ellipsoid(grid, center, axes) & body & (truth == 0)
        if not mask.any():
            raise PhantomConfigError(
                f"Não coube o órgão {class_id} em {cfg.volume_shape}; aumente volume_shape"
            )
        truth[mask] = class_id
        organ_radius[class_id] = float(axes.mean())

    # 2. Tumores: esferas dentro de um órgão hospedeiro
    tumors = []
    if rng.random() < cfg.tumor_rate:
        for _ in range(int(rng.integers(1, cfg.max_tumors + 1))):
            host = int(rng.integers(1, cfg.num_organs + 1))
            host_voxels = np.argwhere(truth == host)
            if host_voxels.size == 0:
                continue
            center = host_voxels[int(rng.integers(0, len(host_voxels)))]
            radius = max(rng.uniform(*cfg.tumor_radius_fraction) * organ_radius[host], cfg.tumor_min_radius_vox)
            mask = _ellipsoid(grid, center, (radius,) * 3) & (truth == host)
            truth[mask] = TUMOR_CLASS
            tumors.append((host, mask))

    # 3. Intensidades por classe + ruído
    image = np.full(cfg.volume_shape, cfg.air_mean, dtype=np.float64)
    image[body] = cfg.body_mean
    for class_id in range(1, cfg.num_organs + 1):
        organ = truth == class_id
        image[organ] = cfg.organ_means[class_id - 1] + cfg.organ_sigma * rng.standard_normal(int(organ.sum()))
    for host, mask in tumors:
        image[mask] = (
            cfg.organ_means[host - 1] + cfg.tumor_offset + cfg.organ_sigma * rng.standard_normal(int(mask.sum()))
        )
    image += cfg.noise_sigma * rng.standard_normal(cfg.volume_shape)

    # 4. Rótulo liberado (apaga o que o anotador não marcou)
    annotated_set = list(range(1, cfg.num_organs + 1))
    subset_draw = _draw_annotated_subset(rng, cfg.num_organs) if cfg.num_organs > 1 else annotated_set
    tumor_annotated = bool(tumors) and rng.random() < cfg.tumor_annotation_rate
    missed = [i > 0 and rng.random() < cfg.tumor_miss_rate for i in range(len(tumors))]

    released = None
    if supervision != Supervision.UNLABELED:
        released = truth.copy()
        if supervision == Supervision.PARTIAL_ORGAN:
            annotated_set = subset_draw
            organs_out = ~np.isin(truth, annotated_set + [0, TUMOR_CLASS])
            released[organs_out] = 0
        if not tumor_annotated:
            released[released == TUMOR_CLASS] = 0
        else:
            for (_, mask), miss in zip(tumors, missed):
                if miss:
                    released[mask] = 0
    else:
        annotated_set = []
        tumor_annotated = False

    spacing = cfg.spacing
    record = CaseRecord(
        case_id=case_id,
        image_path=f"images/{case_id}.svol",
        label_path=f"labels/{case_id}.svol" if released is not None else None,
        truth_path=f"truth/{case_id}.svol",
        supervision=supervision,
        annotated_organ_set=annotated_set,
        tumor_annotated=tumor_annotated,
        has_tumor=bool(tumors),
        split=split,
    )
    return PhantomCase(
        image=Volume(image.astype(np.float32), spacing),
        truth=LabelMap(truth, spacing, NUM_CLASSES),
        released=LabelMap(released, spacing, NUM_CLASSES) if released is not None else None,
        record=record,
    )


def _write_case(root: str, case: PhantomCase):
    save_volume(case.image, os.path.join(root, case.record.image_path))
    save_label(case.truth, os.path.join(root, case.record.truth_path))
    if case.released is not None:
        save_label(case.released, os.path.join(root, case.record.label_path))


def generate_phantom(cfg: PhantomConfig, root: str, workers: int = 1) -> DatasetManifest:
    """Gera o dataset inteiro em `root` e grava o manifest.json."""
    validate_phantom_config(cfg)
    total = cfg.n_full + cfg.n_partial + cfg.n_unlabeled + cfg.n_test
    os.makedirs(root, exist_ok=True)

    def _one(index):
        case = generate_case(cfg, index)
        _write_case(root, case)
        return case.record

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_one, range(total)))
    else:
        records = [_one(i) for i in range(total)]

    manifest = DatasetManifest(format_version=MANIFEST_VERSION, root=".", phantom=cfg, cases=records)
    save_manifest(manifest, os.path.join(root, "manifest.json"))
    manifest.bind(os.path.abspath(root))

    with_tumor = [r for r in records if r.has_tumor and r.split == Split.TRAIN]
    logger.info(
        f"Phantom gerado em {root}: {total} casos "
        f"({cfg.n_full} completos, {cfg.n_partial} parciais, {cfg.n_unlabeled} sem rótulo, {cfg.n_test} teste); "
        f"{sum(r.tumor_annotated for r in with_tumor)}/{len(with_tumor)} com tumor anotado"
    )
    return manifest


# --- Manifesto ---

def save_manifest(m: DatasetManifest, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    text = json.dumps(json.loads(m.json()), indent=2, sort_keys=True, ensure_ascii=False)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text + "\n")


def load_manifest(path: str, check_files: bool = True) -> DatasetManifest:
    if not os.path.exists(path):
        raise ManifestError(f"Manifesto não encontrado: {path}")

    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ManifestError(f"Manifesto ilegível: {e}")

    if not isinstance(raw, dict):
        raise ManifestError("Manifesto precisa ser um objeto JSON")
    if raw.get("format_version") != MANIFEST_VERSION:
        raise ManifestError(
            f"Versão de manifesto {raw.get('format_version')!r} não suportada (esperado {MANIFEST_VERSION})",
            field="format_version",
        )

    try:
        manifest = DatasetManifest.parse_obj(raw)
    except ValidationError as e:
        first = e.errors()[0]
        raise ManifestError(f"Manifesto inválido: {first['msg']}", field=".".join(str(p) for p in first["loc"]))

    manifest.bind(os.path.dirname(os.path.abspath(path)))
    if check_files:
        for i, case in enumerate(manifest.cases):
            for attr in ("image_path", "label_path", "truth_path"):
                rel = getattr(case, attr)
                if rel is not None and not os.path.exists(manifest.path(rel)):
                    raise ManifestError(f"Arquivo ausente: {rel}", field=f"cases.{i}.{attr}")
    return manifest
