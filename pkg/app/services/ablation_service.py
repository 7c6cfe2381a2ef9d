"""
Estudo de ablação de seis braços (mais o StMt completo), por seed:

  baseline              supervisão total ingênua: parciais entram com órgãos ausentes como fundo
  FSO                   só casos completos (é também o professor do self-training)
  ST-partial            aluno com completos + CPL
  ST-partial+unlabeled  aluno com completos + CPL + PL
  FST                   tumor totalmente supervisionado
  MT                    tumor com mean teacher
  StMt                  ST-partial+unlabeled para órgãos + MT para tumor

O modelo do estágio 1 é treinado uma vez por seed, com os pseudo-rótulos do FSO, e compartilhado pelos braços.
"""
import csv
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.core.config import RunConfig
from app.schemas.dataset import DatasetManifest
from app.schemas.report import CaseResult
from app.services.label_service import TUMOR_CLASS
from app.services.net_service import load_checkpoint
from app.services.pipeline_service import PipelineBundle
from app.services.sample_service import TaskData
from app.services.volume_service import NormStats
from app.services.workflow_service import (
    evaluate_bundle,
    fit_organ_student,
    fit_stage1,
    fit_teacher,
    fit_tumor,
    make_pseudo_labels,
)

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["seed", "arm", "organ_dsc", "organ_nsd", "tumor_dsc", "tumor_nsd"]
ORGAN_ARMS = {"baseline", "FSO", "ST-partial", "ST-partial+unlabeled", "StMt"}
TUMOR_ARMS = {"FST", "MT", "StMt"}


@dataclass
class ArmResult:
    seed: int
    arm: str
    organ_dsc: Optional[float] = None
    organ_nsd: Optional[float] = None
    tumor_dsc: Optional[float] = None
    tumor_nsd: Optional[float] = None


def summarize_rows(seed: int, arm: str, rows: Sequence[CaseResult]) -> ArmResult:
    """Média dos órgãos por caso e depois entre casos; tumor só nos braços que o segmentam."""
    result = ArmResult(seed, arm)
    if arm in ORGAN_ARMS:
        organ = [[m for m in r.metrics if m.class_id != TUMOR_CLASS] for r in rows]
        result.organ_dsc = float(np.mean([np.mean([m.dsc for m in ms]) for ms in organ]))
        result.organ_nsd = float(np.mean([np.mean([m.nsd for m in ms]) for ms in organ]))
    if arm in TUMOR_ARMS:
        tumor = [m for r in rows for m in r.metrics if m.class_id == TUMOR_CLASS]
        result.tumor_dsc = float(np.mean([m.dsc for m in tumor]))
        result.tumor_nsd = float(np.mean([m.nsd for m in tumor]))
    return result


class _SeedRun:
    """Treina sob demanda os modelos de uma seed e guarda os checkpoints já produzidos."""

    def __init__(self, cfg: RunConfig, data: TaskData, out_dir: str):
        self.cfg = cfg
        self.data = data
        self.out_dir = out_dir
        self._ckpts: Dict[str, str] = {}
        self._pseudo_data: Optional[TaskData] = None

    def _dir(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def ckpt(self, name: str) -> str:
        if name not in self._ckpts:
            self._ckpts[name] = self._train(name)
        return self._ckpts[name]

    def pseudo_data(self) -> TaskData:
        if self._pseudo_data is None:
            pseudo_dir = self._dir("pseudo")
            make_pseudo_labels(self.cfg, self.data, self.ckpt("FSO"), pseudo_dir)
            self._pseudo_data = self.data.with_pseudo(pseudo_dir)
        return self._pseudo_data

    def _train(self, name: str) -> str:
        cfg, out = self.cfg, self._dir(name)
        if name == "stage1":
            # mesmo estágio 1 do fluxo principal: completos + pseudo-rótulos do FSO
            return fit_stage1(cfg, self.pseudo_data(), out).final_path
        if name == "FSO":
            return fit_teacher(cfg, self.data, out).final_path
        if name == "baseline":
            return fit_teacher(cfg, self.data, out, naive_partial=True).final_path
        if name == "ST-partial":
            return fit_organ_student(cfg, self.pseudo_data(), out, use_unlabeled=False).final_path
        if name == "ST-partial+unlabeled":
            return fit_organ_student(cfg, self.pseudo_data(), out, use_unlabeled=True).final_path
        if name == "FST":
            return fit_tumor(cfg, self.data, out, mean_teacher=False).inference_ckpt
        if name == "MT":
            return fit_tumor(cfg, self.data, out, mean_teacher=True).inference_ckpt
        raise KeyError(name)

    def bundle(self, arm: str) -> PipelineBundle:
        organ = {"StMt": "ST-partial+unlabeled"}.get(arm, arm) if arm in ORGAN_ARMS else None
        tumor = {"StMt": "MT"}.get(arm, arm) if arm in TUMOR_ARMS else None
        return PipelineBundle(
            stage1_model=load_checkpoint(self.ckpt("stage1")),
            organ_model=load_checkpoint(self.ckpt(organ)) if organ else None,
            tumor_model=load_checkpoint(self.ckpt(tumor)) if tumor else None,
            stage1_stats=self.data.stats,
            stage2_stats=self.data.stats,
            options=self.cfg.pipeline,
        )


def run_ablation(cfg: RunConfig, manifest: DatasetManifest, stats: NormStats, out_dir: str) -> List[ArmResult]:
    os.makedirs(out_dir, exist_ok=True)
    base_data = TaskData(manifest, stats, cfg.pipeline, workers=cfg.workers)
    test_cases = manifest.test_cases()

    results = []
    for seed in cfg.ablation.seeds:
        seeded = cfg.copy(update={"seed": seed})
        run = _SeedRun(seeded, base_data, os.path.join(out_dir, f"seed_{seed}"))
        for arm in cfg.ablation.arms:
            logger.info(f"Ablação: seed {seed}, braço {arm}")
            rows = evaluate_bundle(run.bundle(arm), manifest, test_cases, seeded)
            result = summarize_rows(seed, arm, rows)
            results.append(result)
            logger.info(f"  {arm}: órgãos={result.organ_dsc} tumor={result.tumor_dsc}")

    write_ablation_csv(results, os.path.join(out_dir, "metrics.csv"))
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as f:
        f.write(format_ablation_table(results, cfg.ablation.arms))
    return results


# --- Saídas ---

def _cell(value: Optional[float]) -> str:
    return "" if value is None else repr(value)


def write_ablation_csv(results: Sequence[ArmResult], path: str):
    """Só métricas de acurácia (determinísticas); tempo de execução fica de fora."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_COLUMNS)
        for r in results:
            writer.writerow([r.seed, r.arm, _cell(r.organ_dsc), _cell(r.organ_nsd), _cell(r.tumor_dsc), _cell(r.tumor_nsd)])


def format_ablation_table(results: Sequence[ArmResult], arms: Sequence[str]) -> str:
    def column(values):
        values = [v for v in values if v is not None]
        if not values:
            return f"{'-':>16}"
        return f"{100 * np.mean(values):>8.2f} ± {100 * np.std(values):<5.2f}"

    lines = [f"{'Método':<22} {'Órgãos DSC (%)':>16} {'Tumor DSC (%)':>16}"]
    for arm in arms:
        rows = [r for r in results if r.arm == arm]
        lines.append(f"{arm:<22} {column([r.organ_dsc for r in rows])} {column([r.tumor_dsc for r in rows])}")
    return "\n".join(lines) + "\n"
