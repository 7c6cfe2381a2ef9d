"""
Métricas de acurácia (DSC, NSD) e de eficiência (tempo, pico de memória, área memória-tempo),
com as tolerâncias do desafio (15 s e 4096 MB) e geração de relatório.
"""
import csv
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import psutil
import torch
from scipy import ndimage

from app.core.exceptions import CurveError, InvalidArgumentError, ShapeMismatchError
from app.schemas.report import CASE_COLUMNS, CaseResult, ClassMetric, ClassSummary, EvalReport
from app.services.label_service import TUMOR_CLASS, class_name
from app.services.volume_service import LabelMap

logger = logging.getLogger(__name__)

MB = 2 ** 20
SURFACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)


# --- Acurácia ---

def _check_pair(pred: LabelMap, gt: LabelMap):
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"Predição {pred.shape} e verdade {gt.shape} com shapes diferentes")


def dsc(pred: LabelMap, gt: LabelMap, class_id: int) -> float:
    _check_pair(pred, gt)
    p, g = pred.data == class_id, gt.data == class_id
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def surface(mask: np.ndarray) -> np.ndarray:
    """Voxels de borda (vizinhança 6); fora do volume conta como fundo."""
    return mask & ~ndimage.binary_erosion(mask, structure=SURFACE_STRUCTURE, border_value=0)


def nsd(pred: LabelMap, gt: LabelMap, class_id: int, tolerance_mm: float) -> float:
    _check_pair(pred, gt)
    if not np.allclose(pred.spacing, gt.spacing):
        raise ShapeMismatchError(f"Espaçamentos diferentes: {pred.spacing} vs {gt.spacing}")
    if tolerance_mm <= 0:
        raise InvalidArgumentError(f"Tolerância precisa ser > 0, recebeu {tolerance_mm}")

    sp, sg = surface(pred.data == class_id), surface(gt.data == class_id)
    n_p, n_g = int(sp.sum()), int(sg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0

    # distância (mm) de cada voxel até a superfície do outro lado
    to_g = ndimage.distance_transform_edt(~sg, sampling=pred.spacing)
    to_p = ndimage.distance_transform_edt(~sp, sampling=pred.spacing)
    near = int((to_g[sp] <= tolerance_mm).sum()) + int((to_p[sg] <= tolerance_mm).sum())
    return near / (n_p + n_g)


def evaluate_case(pred: LabelMap, gt: LabelMap, class_ids: Sequence[int], tolerance_mm: float) -> List[ClassMetric]:
    out = []
    for class_id in class_ids:
        both_empty = not (pred.data == class_id).any() and not (gt.data == class_id).any()
        out.append(ClassMetric(
            class_id=class_id,
            dsc=dsc(pred, gt, class_id),
            nsd=nsd(pred, gt, class_id, tolerance_mm),
            both_empty=both_empty,
        ))
    return out


# --- Eficiência ---

@dataclass
class MemTimeCurve:
    samples: List[Tuple[float, float]] = field(default_factory=list)
    case_id: str = ""

    def validate(self) -> "MemTimeCurve":
        if len(self.samples) < 2:
            raise CurveError(f"Curva de {self.case_id or '?'} precisa de pelo menos 2 amostras")
        times = [t for t, _ in self.samples]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise CurveError("Tempos da curva precisam ser estritamente crescentes")
        if any(m < 0 for _, m in self.samples):
            raise CurveError("Memória negativa na curva")
        return self

    @property
    def max_mem(self) -> float:
        return max(m for _, m in self.samples)

    def concat(self, other: "MemTimeCurve") -> "MemTimeCurve":
        """Junta duas curvas que compartilham o ponto final/inicial."""
        if not self.samples or not other.samples or self.samples[-1] != other.samples[0]:
            raise CurveError("Curvas só podem ser concatenadas num ponto compartilhado")
        return MemTimeCurve(self.samples + other.samples[1:], self.case_id)


def auc_mem_time(c: MemTimeCurve) -> float:
    """Integral trapezoidal da memória no tempo (MB*s)."""
    c.validate()
    t = np.array([s[0] for s in c.samples], dtype=np.float64)
    m = np.array([s[1] for s in c.samples], dtype=np.float64)
    return float(np.sum(np.diff(t) * (m[1:] + m[:-1]) / 2.0))


def memory_probe(source: str = "auto") -> Tuple[Callable[[], float], str]:
    """Retorna (função que lê MB, nome da fonte). auto: acelerador se houver, senão RSS do processo."""
    if source == "auto":
        source = "cuda" if torch.cuda.is_available() else "rss"
    if source == "cuda":
        if not torch.cuda.is_available():
            raise InvalidArgumentError("memory_source=cuda sem acelerador disponível")
        return (lambda: torch.cuda.memory_allocated() / MB), "cuda"
    process = psutil.Process(os.getpid())
    return (lambda: process.memory_info().rss / MB), "rss"


class _Sampler(threading.Thread):
    """Um escritor (esta thread) e um leitor (quem chamou profile_case) na lista de amostras."""

    def __init__(self, probe: Callable[[], float], interval: float, start: float):
        super().__init__(daemon=True)
        self.probe = probe
        self.interval = interval
        self.started_at = start
        self.samples: List[Tuple[float, float]] = []
        self.stop_event = threading.Event()

    def run(self):
        while not self.stop_event.wait(self.interval):
            self.samples.append((time.perf_counter() - self.started_at, self.probe()))


def profile_case(
    work: Callable[[], object],
    interval_s: float = 0.1,
    source: str = "auto",
    case_id: str = "",
) -> Tuple[float, MemTimeCurve]:
    """
    Mede tempo de parede e amostra memória a cada `interval_s` em paralelo com `work`.
    A curva tem amostra no início e no fim. Se `work` falhar, a exceção sobe com
    `runtime_s` e `curve` (truncada) anexados.
    """
    probe, _ = memory_probe(source)
    start = time.perf_counter()
    first = (0.0, probe())
    sampler = _Sampler(probe, interval_s, start)
    sampler.start()

    error = None
    try:
        work()
    except Exception as e:
        error = e
    finally:
        sampler.stop_event.set()
        sampler.join()
    runtime = time.perf_counter() - start

    samples = [first] + [s for s in sampler.samples if s[0] > 0.0]
    end_t = max(runtime, samples[-1][0] + 1e-9)
    samples.append((end_t, probe()))
    curve = MemTimeCurve(samples, case_id)

    if error is not None:
        error.runtime_s = runtime
        error.curve = curve
        raise error
    return runtime, curve


# --- Relatório ---

def _mean_sd(values: Sequence[float]) -> Tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def build_report(
    rows: Sequence[CaseResult],
    time_tolerance_s: float = 15.0,
    memory_tolerance_mb: float = 4096.0,
    nsd_tolerance_mm: float = 1.0,
    memory_source: str = "rss",
) -> EvalReport:
    """Agregados por classe (média ± dp), média dos órgãos, tumor e flags de tolerância por caso."""
    cases = []
    for row in rows:
        row = row.copy(deep=True)
        row.time_flag = row.runtime_s is not None and row.runtime_s > time_tolerance_s
        row.memory_flag = row.max_mem_mb is not None and row.max_mem_mb > memory_tolerance_mb
        cases.append(row)

    class_ids = sorted({m.class_id for row in cases for m in row.metrics})
    summaries = []
    for class_id in class_ids:
        metrics = [m for row in cases for m in row.metrics if m.class_id == class_id]
        dsc_mean, dsc_sd = _mean_sd([m.dsc for m in metrics])
        nsd_mean, nsd_sd = _mean_sd([m.nsd for m in metrics])
        summaries.append(ClassSummary(
            class_id=class_id,
            name=class_name(class_id),
            dsc_mean=dsc_mean,
            dsc_sd=dsc_sd,
            nsd_mean=nsd_mean,
            nsd_sd=nsd_sd,
            both_empty_cases=sum(m.both_empty for m in metrics),
        ))

    organs = [s for s in summaries if s.class_id != TUMOR_CLASS]
    tumor = next((s for s in summaries if s.class_id == TUMOR_CLASS), None)
    runtimes = [c.runtime_s for c in cases if c.runtime_s is not None]

    report = EvalReport(
        cases=cases,
        classes=summaries,
        organ_dsc_mean=float(np.mean([s.dsc_mean for s in organs])) if organs else None,
        organ_nsd_mean=float(np.mean([s.nsd_mean for s in organs])) if organs else None,
        tumor_dsc_mean=tumor.dsc_mean if tumor else None,
        tumor_nsd_mean=tumor.nsd_mean if tumor else None,
        runtime_mean_s=float(np.mean(runtimes)) if runtimes else None,
        nsd_tolerance_mm=nsd_tolerance_mm,
        time_tolerance_s=time_tolerance_s,
        memory_tolerance_mb=memory_tolerance_mb,
        memory_source=memory_source,
        flagged_cases=[c.case_id for c in cases if c.time_flag or c.memory_flag],
    )
    for case_id in report.flagged_cases:
        logger.warning(f"Caso {case_id} fora das tolerâncias de {time_tolerance_s} s / {memory_tolerance_mb} MB")
    return report


def _fmt(value: Optional[float], digits: int = 4) -> str:
    return "" if value is None else f"{value:.{digits}f}"


def write_report_csv(report: EvalReport, path: str):
    """Colunas fixas por caso seguidas de dsc_<classe> e nsd_<classe> em ordem crescente de classe."""
    class_ids = [s.class_id for s in report.classes]
    header = CASE_COLUMNS + [f"{k}_{c}" for c in class_ids for k in ("dsc", "nsd")]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for case in report.cases:
            metrics = {m.class_id: m for m in case.metrics}
            row = [
                case.case_id, case.image_size, _fmt(case.runtime_s), _fmt(case.max_mem_mb, 1),
                _fmt(case.auc_mb_s, 1), int(case.time_flag), int(case.memory_flag),
            ]
            for c in class_ids:
                m = metrics.get(c)
                row += [_fmt(m.dsc), _fmt(m.nsd)] if m else ["", ""]
            writer.writerow(row)


def format_accuracy_table(report: EvalReport) -> str:
    lines = [
        f"NSD com tolerância de {report.nsd_tolerance_mm} mm; ambos vazios contam 1.0",
        f"{'Classe':<14} {'DSC (%)':>16} {'NSD (%)':>16}",
    ]
    for s in report.classes:
        lines.append(
            f"{s.name:<14} {100 * s.dsc_mean:>8.2f} ± {100 * s.dsc_sd:<5.2f} {100 * s.nsd_mean:>8.2f} ± {100 * s.nsd_sd:<5.2f}"
        )
    if report.organ_dsc_mean is not None:
        lines.append(f"{'Organ mean':<14} {100 * report.organ_dsc_mean:>8.2f} {'':>7} {100 * report.organ_nsd_mean:>8.2f}")
    if report.tumor_dsc_mean is not None:
        lines.append(f"{'Tumor':<14} {100 * report.tumor_dsc_mean:>8.2f} {'':>7} {100 * report.tumor_nsd_mean:>8.2f}")
    return "\n".join(lines) + "\n"


def format_efficiency_table(report: EvalReport) -> str:
    lines = [
        f"Memória: {report.memory_source}; área em MB·s; tolerâncias {report.time_tolerance_s} s / {report.memory_tolerance_mb} MB",
        f"{'Case ID':<12} {'Image Size':<14} {'Running Time (s)':>17} {'Max Mem (MB)':>13} {'Total Mem (MB·s)':>17} Flags",
    ]
    for c in report.cases:
        flags = ",".join(name for name, on in (("time", c.time_flag), ("memory", c.memory_flag)) if on)
        lines.append(
            f"{c.case_id:<12} {c.image_size:<14} {_fmt(c.runtime_s, 2):>17} {_fmt(c.max_mem_mb, 0):>13} "
            f"{_fmt(c.auc_mb_s, 0):>17} {flags}"
        )
    return "\n".join(lines) + "\n"
