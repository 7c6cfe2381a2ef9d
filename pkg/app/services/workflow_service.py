"""
Etapas compostas do fluxo StMt (professor, pseudo-rótulos, estágio 1, aluno de órgãos,
tumor e avaliação de um bundle). Usadas pelos subcomandos e pelo estudo de ablação.
"""
import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence

from app.core.config import RunConfig
from app.schemas.dataset import CaseRecord, DatasetManifest
from app.schemas.report import CaseResult
from app.services.eval_service import auc_mem_time, evaluate_case, profile_case
from app.services.label_service import TUMOR_CLASS
from app.services.net_service import NetSpec, build_model
from app.services.pipeline_service import PipelineBundle, run_pipeline
from app.services.sample_service import TaskData, load_case_image
from app.services.train_service import (
    PseudoResult,
    TrainResult,
    generate_pseudo_labels,
    train_student_organ,
    train_supervised,
    train_tumor_mean_teacher,
)
from app.services.volume_service import load_label, save_label

logger = logging.getLogger(__name__)


# --- Arquiteturas ---

def organ_spec(cfg: RunConfig) -> NetSpec:
    return cfg.nets.spec(cfg.phantom.num_organs + 1)


def binary_spec(cfg: RunConfig) -> NetSpec:
    return cfg.nets.spec(2)


def evaluated_classes(cfg: RunConfig) -> List[int]:
    return list(range(1, cfg.phantom.num_organs + 1)) + [TUMOR_CLASS]


# --- Treinos ---

def fit_teacher(cfg: RunConfig, data: TaskData, out_dir: str, naive_partial: bool = False) -> TrainResult:
    """Professor de órgãos nos casos completos. `naive_partial` junta os parciais com órgãos ausentes como fundo."""
    seed = cfg.task_seed("teacher")
    samples = data.full + (data.partial_naive if naive_partial else [])
    task = "baseline" if naive_partial else "teacher"
    return train_supervised(build_model(organ_spec(cfg), seed), samples, cfg.train.teacher, out_dir, seed, task)


def make_pseudo_labels(cfg: RunConfig, data: TaskData, teacher_ckpt: str, out_dir: str) -> PseudoResult:
    return generate_pseudo_labels(teacher_ckpt, data.manifest, data.pseudo_records(), data.stats, cfg.pipeline, out_dir)


def fit_stage1(cfg: RunConfig, data: TaskData, out_dir: str) -> TrainResult:
    seed = cfg.task_seed("stage1")
    return train_supervised(build_model(binary_spec(cfg), seed), data.stage1, cfg.train.stage1, out_dir, seed, "stage1")


def fit_organ_student(cfg: RunConfig, data: TaskData, out_dir: str, use_unlabeled: bool = True) -> TrainResult:
    """Sem dados não rotulados o pool de PL fica desligado e lambda2 vai a zero."""
    seed = cfg.task_seed("organ")
    train_cfg = cfg.train.organ if use_unlabeled else cfg.train.organ.copy(update={"lambda2": 0.0})
    return train_student_organ(
        build_model(organ_spec(cfg), seed),
        data.full,
        data.cpl,
        data.pl if use_unlabeled else None,
        train_cfg,
        out_dir,
        seed,
    )


@dataclass
class TumorFit:
    inference_ckpt: str
    result: TrainResult
    teacher_ckpt: Optional[str] = None


def fit_tumor(cfg: RunConfig, data: TaskData, out_dir: str, mean_teacher: bool = True) -> TumorFit:
    seed = cfg.task_seed("tumor")
    model = build_model(binary_spec(cfg), seed)
    if not mean_teacher:
        result = train_supervised(model, data.tumor, cfg.train.tumor, out_dir, seed, "tumor-fst")
        return TumorFit(result.final_path, result)

    mt = train_tumor_mean_teacher(model, data.tumor, cfg.train.tumor, out_dir, seed)
    use_teacher = cfg.pipeline.tumor_weights == "teacher"
    return TumorFit(mt.teacher_path if use_teacher else mt.student.final_path, mt.student, mt.teacher_path)


# --- Avaliação ---

def evaluate_bundle(
    bundle: PipelineBundle,
    manifest: DatasetManifest,
    records: Sequence[CaseRecord],
    cfg: RunConfig,
    profile: bool = False,
    predictions_dir: Optional[str] = None,
) -> List[CaseResult]:
    """Roda o pipeline em cada caso e mede contra a verdade escondida."""
    rows = []
    for record in records:
        volume = load_case_image(manifest, record)
        truth = load_label(manifest.path(record.truth_path))
        holder = {}

        def work():
            holder["pred"] = run_pipeline(bundle, volume)

        row = CaseResult(case_id=record.case_id, image_size="x".join(str(s) for s in volume.shape))
        if profile:
            runtime, curve = profile_case(work, cfg.eval.sample_interval_s, cfg.eval.memory_source, record.case_id)
            row.runtime_s, row.max_mem_mb, row.auc_mb_s = runtime, curve.max_mem, auc_mem_time(curve)
        else:
            work()

        pred = holder["pred"]
        row.metrics = evaluate_case(pred, truth, evaluated_classes(cfg), cfg.eval.nsd_tolerance_mm)
        if predictions_dir is not None:
            save_label(pred, os.path.join(predictions_dir, f"{record.case_id}.svol"))
        rows.append(row)
    return rows
