"""
Utilitários dos testes: redes "oráculo" (a intensidade do voxel já é a classe) e
construção de casos sintéticos pequenos.
"""
import os
from typing import Callable, Dict, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from app.schemas.dataset import CaseRecord, DatasetManifest, PhantomConfig, Split, Supervision
from app.services.net_service import ModelHandle, NetSpec
from app.services.volume_service import LabelMap, NormStats, Volume, save_label, save_volume

# clip largo, média 0, dp 1: a normalização não muda a intensidade
IDENTITY_STATS = NormStats(clip_lo=-1e4, clip_hi=1e4, mean=0.0, std=1.0)


class Oracle(nn.Module):
    def __init__(self, num_classes: int, rule: Callable[[torch.Tensor], torch.Tensor]):
        super().__init__()
        self.num_classes = num_classes
        self.rule = rule

    def forward(self, x):
        labels = self.rule(x[:, 0]).long().clamp(0, self.num_classes - 1)
        return F.one_hot(labels, self.num_classes).movedim(-1, 1).float()


def oracle_model(num_classes: int, rule) -> ModelHandle:
    return ModelHandle(spec=NetSpec(num_classes=num_classes), network=Oracle(num_classes, rule).eval(), lineage=["oracle"])


def organ_oracle(num_classes: int) -> ModelHandle:
    return oracle_model(num_classes, torch.round)


def stage1_oracle() -> ModelHandle:
    return oracle_model(2, lambda x: x > 0.5)


def tumor_oracle() -> ModelHandle:
    return oracle_model(2, lambda x: x > 13.5)


def zero_model(num_classes: int) -> ModelHandle:
    return oracle_model(num_classes, torch.zeros_like)


class FixedOutput(nn.Module):
    """Ignora as intensidades e devolve o one-hot de um rótulo fixo no shape da entrada."""

    def __init__(self, labels: np.ndarray, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.labels = torch.from_numpy(labels.astype(np.int64))

    def forward(self, x):
        if tuple(x.shape[2:]) != tuple(self.labels.shape):
            raise ValueError(f"Entrada {tuple(x.shape[2:])} não bate com o rótulo fixo {tuple(self.labels.shape)}")
        onehot = F.one_hot(self.labels, self.num_classes).movedim(-1, 0).float()
        return onehot[None].expand(x.shape[0], -1, -1, -1, -1)


def fixed_model(label: LabelMap, num_classes: int) -> ModelHandle:
    return ModelHandle(spec=NetSpec(num_classes=num_classes), network=FixedOutput(label.data, num_classes).eval(), lineage=["fixed"])


def class_volume(label: LabelMap) -> Volume:
    """Imagem cujas intensidades são os ids de classe."""
    return Volume(label.data.astype(np.float32), label.spacing)


def blocks(shape: Sequence[int], boxes: Dict[int, tuple]) -> LabelMap:
    """Rótulo com um bloco por classe: {classe: ((z0, y0, x0), (z1, y1, x1))}."""
    data = np.zeros(tuple(shape), dtype=np.uint8)
    for class_id, (lo, hi) in boxes.items():
        data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = class_id
    return LabelMap(data)


def random_labels(rng: np.random.Generator, shape, classes: Sequence[int], fill: float = 0.5) -> np.ndarray:
    data = rng.choice(np.asarray(classes, dtype=np.uint8), size=shape)
    data[rng.random(shape) > fill] = 0
    return data


def class_id_dataset(root: str, truths: Sequence[LabelMap], num_organs: int) -> DatasetManifest:
    """Dataset de casos sem rótulo cujas imagens são os próprios ids de classe."""
    shape = truths[0].shape
    records = []
    for i, truth in enumerate(truths):
        case_id = f"case_{i:04d}"
        save_volume(class_volume(truth), os.path.join(root, "images", f"{case_id}.svol"))
        save_label(truth, os.path.join(root, "truth", f"{case_id}.svol"))
        records.append(CaseRecord(
            case_id=case_id,
            image_path=f"images/{case_id}.svol",
            truth_path=f"truth/{case_id}.svol",
            supervision=Supervision.UNLABELED,
            split=Split.TRAIN,
        ))
    phantom = PhantomConfig(volume_shape=shape, num_organs=num_organs, n_full=0, n_partial=0, n_unlabeled=len(truths), n_test=0)
    return DatasetManifest(phantom=phantom, cases=records).bind(root)
