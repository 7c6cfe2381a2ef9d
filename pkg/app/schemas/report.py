from typing import Dict, List, Optional

from pydantic import BaseModel, Field

# Ordem estável das colunas do CSV de relatório
CASE_COLUMNS = ["case_id", "image_size", "runtime_s", "max_mem_mb", "auc_mb_s", "time_flag", "memory_flag"]


# --- Linhas por caso ---
class ClassMetric(BaseModel):
    class_id: int
    dsc: float = Field(..., ge=0, le=1)
    nsd: float = Field(..., ge=0, le=1)
    both_empty: bool = False


class CaseResult(BaseModel):
    case_id: str
    image_size: str = ""
    metrics: List[ClassMetric] = []
    runtime_s: Optional[float] = None
    max_mem_mb: Optional[float] = None
    auc_mb_s: Optional[float] = None
    time_flag: bool = False
    memory_flag: bool = False


# --- Agregados ---
class ClassSummary(BaseModel):
    class_id: int
    name: str
    dsc_mean: float
    dsc_sd: float
    nsd_mean: float
    nsd_sd: float
    both_empty_cases: int = 0


class EvalReport(BaseModel):
    cases: List[CaseResult]
    classes: List[ClassSummary]
    organ_dsc_mean: Optional[float] = None
    organ_nsd_mean: Optional[float] = None
    tumor_dsc_mean: Optional[float] = None
    tumor_nsd_mean: Optional[float] = None
    runtime_mean_s: Optional[float] = None
    nsd_tolerance_mm: float
    time_tolerance_s: float
    memory_tolerance_mb: float
    memory_source: str = "rss"
    flagged_cases: List[str] = []

    def class_summary(self, class_id: int) -> Optional[ClassSummary]:
        return next((c for c in self.classes if c.class_id == class_id), None)

    def by_case(self) -> Dict[str, CaseResult]:
        return {c.case_id: c for c in self.cases}
