import os
from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, PrivateAttr, root_validator, validator

MANIFEST_VERSION = "1"


class Supervision(str, Enum):
    FULL_ORGAN = "FULL_ORGAN"
    PARTIAL_ORGAN = "PARTIAL_ORGAN"
    UNLABELED = "UNLABELED"


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


# O que o gerador de phantom recebe
class PhantomConfig(BaseModel):
    volume_shape: Tuple[int, int, int] = (32, 32, 32)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    num_organs: int = Field(4, ge=1, le=13)
    tumor_rate: float = Field(0.6, ge=0, le=1)
    tumor_annotation_rate: float = Field(0.68, ge=0, le=1)  # 1497/2200 casos com tumor anotado
    tumor_miss_rate: float = Field(0.3, ge=0, le=1)  # tumores extras esquecidos pelo anotador
    max_tumors: int = Field(2, ge=1)
    tumor_radius_fraction: Tuple[float, float] = (0.05, 0.15)
    tumor_min_radius_vox: float = Field(1.5, gt=0)
    n_full: int = Field(20, ge=0)
    n_partial: int = Field(40, ge=0)
    n_unlabeled: int = Field(40, ge=0)
    n_test: int = Field(10, ge=0)

    # Modelo de intensidade (unidades tipo HU)
    air_mean: float = -1000.0
    body_mean: float = -100.0
    organ_means: Tuple[float, ...] = (
        60.0, 150.0, 100.0, 20.0, 200.0, 170.0, -20.0, -40.0, -60.0, 240.0, 280.0, 130.0, 320.0,
    )
    organ_sigma: float = Field(10.0, ge=0)
    tumor_offset: float = -50.0
    noise_sigma: float = Field(10.0, ge=0)
    jitter_fraction: float = Field(0.05, ge=0, le=0.2)
    seed: int = Field(0, ge=0, lt=2 ** 64)

    class Config:
        extra = "forbid"

    @validator("volume_shape")
    def _shape_positive(cls, v):
        if min(v) < 1:
            raise ValueError("volume_shape precisa de dimensões >= 1")
        return v

    @validator("tumor_radius_fraction")
    def _radius_range(cls, v):
        if not 0 < v[0] <= v[1]:
            raise ValueError("tumor_radius_fraction precisa ser (min, max) com 0 < min <= max")
        return v

    @root_validator(skip_on_failure=True)
    def _organ_means(cls, values):
        if len(values["organ_means"]) < values["num_organs"]:
            raise ValueError("organ_means precisa de uma média por órgão")
        return values


class CaseRecord(BaseModel):
    case_id: str
    image_path: str
    label_path: Optional[str] = None
    truth_path: str
    supervision: Supervision
    annotated_organ_set: List[int] = []
    tumor_annotated: bool = False
    has_tumor: bool = False
    split: Split = Split.TRAIN

    class Config:
        extra = "forbid"

    @root_validator(skip_on_failure=True)
    def _kind_consistency(cls, values):
        if values["supervision"] == Supervision.UNLABELED:
            if values.get("label_path") is not None:
                raise ValueError("Caso UNLABELED não pode ter label_path")
            if values.get("annotated_organ_set"):
                raise ValueError("Caso UNLABELED não pode ter órgãos anotados")
        elif values.get("label_path") is None:
            raise ValueError("Caso rotulado precisa de label_path")
        values["annotated_organ_set"] = sorted(set(values["annotated_organ_set"]))
        return values


class DatasetManifest(BaseModel):
    format_version: str = MANIFEST_VERSION
    root: str = "."
    phantom: PhantomConfig
    cases: List[CaseRecord] = []

    # diretório do manifest.json em disco (não serializado)
    _base_dir: str = PrivateAttr(".")

    class Config:
        extra = "forbid"

    @validator("cases")
    def _unique_ids(cls, v):
        ids = [c.case_id for c in v]
        if len(ids) != len(set(ids)):
            raise ValueError("case_id repetido no manifesto")
        return v

    @root_validator(skip_on_failure=True)
    def _full_cases_complete(cls, values):
        every_organ = list(range(1, values["phantom"].num_organs + 1))
        for case in values["cases"]:
            if case.supervision == Supervision.FULL_ORGAN and case.annotated_organ_set != every_organ:
                raise ValueError(f"Caso {case.case_id} é FULL_ORGAN mas não anota todos os órgãos")
        return values

    def by_supervision(self, kind: Supervision, split: Split = Split.TRAIN) -> List[CaseRecord]:
        return [c for c in self.cases if c.supervision == kind and c.split == split]

    def train_cases(self) -> List[CaseRecord]:
        return [c for c in self.cases if c.split == Split.TRAIN]

    def test_cases(self) -> List[CaseRecord]:
        return [c for c in self.cases if c.split == Split.TEST]

    def bind(self, base_dir: str) -> "DatasetManifest":
        self._base_dir = base_dir
        return self

    def path(self, relative: str) -> str:
        return os.path.normpath(os.path.join(self._base_dir, self.root, relative))

    def case(self, case_id: str) -> CaseRecord:
        for record in self.cases:
            if record.case_id == case_id:
                return record
        raise KeyError(case_id)
