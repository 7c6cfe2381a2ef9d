"""
Treino: lotes balanceados, treino supervisionado, pseudo-rótulos,
aluno de órgãos (self-training) e tumor com mean teacher.

Contrato de determinismo: dada a seed, as seeds de aumento por iteração são fixas,
então a execução é reprodutível mesmo com workers > 1 no preparo dos lotes.
O passo de otimização é sempre serial.
"""
import csv
import json
import logging
import math
import os
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from app.core.exceptions import EmptyPoolError, TrainingDivergedError
from app.schemas.dataset import CaseRecord, DatasetManifest
from app.services.augment_service import augment
from app.services.label_service import correct_tumor_pseudo
from app.services.loss_service import dice_ce_components, organ_loss, tumor_loss
from app.services.net_service import (
    ModelHandle,
    ParamVector,
    copy_model,
    ema_update_model,
    load_checkpoint,
    param_vector,
    predict_label,
    save_checkpoint,
)
from app.services.sample_service import (
    PROVENANCE_FILE,
    SampleKind,
    TrainSample,
    load_case_image,
    prepare_input,
    pseudo_label_path,
    stage2_roi,
)
from app.services.volume_service import LabelMap, NormStats, body_box, restore_to_canvas, save_label

logger = logging.getLogger(__name__)

StepCallback = Callable[[int, ParamVector, ParamVector], None]


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


# --- Agenda de lr e otimizador ---

def cosine_lr(epoch: int, epochs: int, lr0: float) -> float:
    """lr(e) = lr0 * 0.5 * (1 + cos(pi * e / E)); lr(0) = lr0, lr(E) = 0."""
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))


def make_optimizer(model: ModelHandle, cfg):
    optimizer = torch.optim.SGD(
        model.network.parameters(),
        lr=cfg.lr0,
        momentum=cfg.momentum,
        nesterov=cfg.nesterov and cfg.momentum > 0,
        weight_decay=cfg.weight_decay,
    )
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda e: cosine_lr(e, cfg.epochs, 1.0)
    )
    return optimizer, scheduler


# --- Lotes ---

def _check_pool(name: str, pool: Sequence[TrainSample]):
    if not pool:
        raise EmptyPoolError(name)


def uniform_batches(pool: Sequence[TrainSample], batch_size: int, rng: np.random.Generator) -> Iterator[List[TrainSample]]:
    _check_pool("labeled", pool)
    while True:
        yield [pool[int(i)] for i in rng.integers(0, len(pool), batch_size)]


def compose_organ_batches(
    full_cases: Sequence[TrainSample],
    cpl_cases: Sequence[TrainSample],
    pl_cases: Optional[Sequence[TrainSample]],
    cfg,
    rng: np.random.Generator,
) -> Iterator[List[TrainSample]]:
    """
    Cada lote tem batch_size/3 amostras de cada tipo (rotulado, CPL, PL), sorteadas uniformemente no pool.
    pl_cases=None desliga o pool de PL (só permitido com lambda2 = 0).
    """
    pools = [("full", full_cases), ("cpl", cpl_cases)]
    if pl_cases is None:
        if cfg.lambda2 != 0:
            raise EmptyPoolError("pl")
    else:
        pools.append(("pl", pl_cases))
    for name, pool in pools:
        _check_pool(name, pool)

    per_kind = max(1, cfg.batch_size // 3)
    while True:
        batch = []
        for _, pool in pools:
            batch += [pool[int(i)] for i in rng.integers(0, len(pool), per_kind)]
        yield batch


def _augment_one(sample: TrainSample, seed: Tuple[int, ...], strength: float) -> Tuple[np.ndarray, np.ndarray]:
    return augment(sample.image, sample.target, np.random.default_rng(list(seed)), strength)


def prepare_batch(
    batch: Sequence[TrainSample], seed: int, iteration: int, strength: float, pool: Optional[ThreadPoolExecutor] = None
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Aumenta e empilha o lote. A seed de cada amostra depende só de (seed, iteração, posição)."""
    jobs = [(s, (seed, iteration, slot), strength) for slot, s in enumerate(batch)]
    if pool is not None:
        pairs = list(pool.map(lambda job: _augment_one(*job), jobs))
    else:
        pairs = [_augment_one(*job) for job in jobs]
    images = torch.from_numpy(np.stack([p[0] for p in pairs]))[:, None]
    targets = torch.from_numpy(np.stack([p[1] for p in pairs]).astype(np.int64))
    return images, targets


# --- Log de métricas ---

class MetricsLog:
    """CSV append-only: uma linha por iteração."""

    def __init__(self, path: str, components: Sequence[str]):
        self.path = path
        self.columns = ["iteration", "epoch", "lr", "L_total"] + list(components)
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", newline="") as f:
            csv.writer(f).writerow(self.columns)

    def append(self, iteration: int, epoch: int, lr: float, total: float, components: Dict[str, float]):
        row = [iteration, epoch, repr(float(lr)), repr(float(total))]
        row += [repr(float(components[c])) if c in components else "" for c in self.columns[4:]]
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(row)


@dataclass
class TrainResult:
    final_path: str
    best_path: str
    metrics_path: str
    best_loss: float
    epoch_losses: List[float] = field(default_factory=list)


def _check_finite(loss: torch.Tensor, task: str, iteration: int):
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"Loss não finita em {task} na iteração {iteration} (valor {float(loss)}); "
            "reduza lr0 ou verifique a normalização"
        )


def _run_loop(
    model: ModelHandle,
    batches: Iterator[List[TrainSample]],
    step: Callable[[torch.Tensor, torch.Tensor, List[TrainSample]], Tuple[torch.Tensor, Dict[str, float]]],
    cfg,
    seed: int,
    out_dir: str,
    task: str,
    components: Sequence[str],
    after_step: Optional[Callable[[int], None]] = None,
    best_model: Optional[Callable[[], ModelHandle]] = None,
) -> TrainResult:
    """Laço comum: augment -> step (forward + loss) -> SGD; lr cosseno por época; checkpoints final e melhor."""
    os.makedirs(out_dir, exist_ok=True)
    optimizer, scheduler = make_optimizer(model, cfg)
    log = MetricsLog(os.path.join(out_dir, "metrics.csv"), components)
    final_path = os.path.join(out_dir, "final.ckpt")
    best_path = os.path.join(out_dir, "best.ckpt")
    pick = best_model or (lambda: model)

    best_loss = math.inf
    epoch_losses = []
    iteration = 0
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        model.train()
        for epoch in range(cfg.epochs):
            lr = optimizer.param_groups[0]["lr"]
            running = 0.0
            for _ in range(cfg.iters_per_epoch):
                batch = next(batches)
                images, targets = prepare_batch(batch, seed, iteration, cfg.aug_strength, pool)
                total, parts = step(images, targets, batch)
                _check_finite(total, task, iteration)

                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                if after_step is not None:
                    after_step(iteration)

                log.append(iteration, epoch, lr, float(total.detach()), parts)
                running += float(total.detach())
                iteration += 1
            scheduler.step()

            mean_loss = running / cfg.iters_per_epoch
            epoch_losses.append(mean_loss)
            logger.info(f"[{task}] época {epoch + 1}/{cfg.epochs} lr={lr:.5f} loss={mean_loss:.4f}")
            if mean_loss < best_loss:
                best_loss = mean_loss
                save_checkpoint(pick(), best_path)
    finally:
        if pool is not None:
            pool.shutdown()

    save_checkpoint(pick(), final_path)
    return TrainResult(final_path, best_path, log.path, best_loss, epoch_losses)


# --- Treinos ---

def train_supervised(
    model: ModelHandle, samples: Sequence[TrainSample], cfg, out_dir: str, seed: int = 0, task: str = "supervised"
) -> TrainResult:
    """Treino totalmente supervisionado (professor, estágio 1 e braços FSO/FST)."""
    seed_everything(seed)
    batches = uniform_batches(samples, cfg.batch_size, np.random.default_rng(seed))
    num_classes = model.spec.num_classes
    model.lineage = model.lineage + [f"{task}:seed={seed}"]

    def step(images, targets, _batch):
        dice_loss, ce = dice_ce_components(model.network(images), targets, num_classes)
        return dice_loss + ce, {"dice": float(dice_loss.detach()), "ce": float(ce.detach())}

    return _run_loop(model, batches, step, cfg, seed, out_dir, task, ("dice", "ce"))


def train_student_organ(
    model: ModelHandle,
    full: Sequence[TrainSample],
    cpl: Sequence[TrainSample],
    pl: Optional[Sequence[TrainSample]],
    cfg,
    out_dir: str,
    seed: int = 0,
) -> TrainResult:
    """Aluno de órgãos: L_o = L_ol + lambda1 * L_cpl + lambda2 * L_pl sobre lotes balanceados."""
    seed_everything(seed)
    batches = compose_organ_batches(full, cpl, pl, cfg, np.random.default_rng(seed))
    model.lineage = model.lineage + [f"organ-student:seed={seed}"]

    def step(images, targets, batch):
        logits = model.network(images)
        items = [(logits[i], targets[i], s.kind) for i, s in enumerate(batch)]
        return organ_loss(items, cfg)

    return _run_loop(model, batches, step, cfg, seed, out_dir, "organ", ("L_ol", "L_cpl", "L_pl"))


@dataclass
class MeanTeacherResult:
    student: TrainResult
    teacher_path: str
    teacher: ModelHandle


def train_tumor_mean_teacher(
    model: ModelHandle,
    samples: Sequence[TrainSample],
    cfg,
    out_dir: str,
    seed: int = 0,
    on_step: Optional[StepCallback] = None,
) -> MeanTeacherResult:
    """
    Mean teacher para tumor. A cada iteração: professor (sem gradiente) -> argmax ->
    correção com a anotação do caso -> L_t -> passo SGD do aluno -> EMA no professor.
    O professor nasce como cópia do aluno. `on_step(iteração, aluno, professor)` recebe os vetores após o EMA.
    """
    seed_everything(seed)
    for s in samples:
        if s.kind != SampleKind.TUMOR_ANNOTATED:
            raise ValueError(f"Amostra {s.case_id} não é TUMOR_ANNOTATED")
    batches = uniform_batches(samples, cfg.batch_size, np.random.default_rng(seed))
    model.lineage = model.lineage + [f"tumor-student:seed={seed}"]
    teacher = copy_model(model, "ema-teacher").eval()
    noise = torch.Generator().manual_seed(seed)

    def step(images, targets, _batch):
        with torch.no_grad():
            teacher_pred = teacher.network(images).argmax(dim=1).numpy()
        corrected = np.stack([
            correct_tumor_pseudo(LabelMap(p, num_classes=2), LabelMap(t, num_classes=2), annotated=True).data
            for p, t in zip(teacher_pred, targets.numpy())
        ])
        student_in = images
        if cfg.student_noise_sigma > 0:
            student_in = images + cfg.student_noise_sigma * torch.randn(images.shape, generator=noise)
        logits = model.network(student_in)
        return tumor_loss(logits, targets, torch.from_numpy(corrected.astype(np.int64)), cfg)

    def after_step(iteration):
        teacher_vec = ema_update_model(teacher, model, cfg.ema_decay)
        if on_step is not None:
            on_step(iteration, param_vector(model), teacher_vec)

    result = _run_loop(
        model, batches, step, cfg, seed, out_dir, "tumor", ("L_tl", "L_cpl"), after_step=after_step
    )
    teacher_path = os.path.join(out_dir, "teacher.ckpt")
    save_checkpoint(teacher, teacher_path)
    return MeanTeacherResult(result, teacher_path, teacher)


# --- Pseudo-rótulos ---

@dataclass
class PseudoResult:
    paths: Dict[str, str]
    failures: Dict[str, str]


def _teacher_roi(model: ModelHandle, volume, stats: NormStats, pipeline):
    """
    Localização grosseira com o próprio professor: previsão na caixa do corpo, devolvida ao grid
    nativo. O ROI final é a caixa do foreground previsto, como na inferência.
    """
    body = body_box(volume, pipeline.body_threshold, pipeline.margin_fraction)
    coarse = predict_label(model, prepare_input(volume, body, stats, pipeline.stage2_shape))
    return stage2_roi(volume, pipeline, restore_to_canvas(coarse, body, volume.shape))


def generate_pseudo_labels(
    teacher: Union[str, ModelHandle],
    manifest: DatasetManifest,
    records: Sequence[CaseRecord],
    stats: NormStats,
    pipeline,
    out_dir: str,
) -> PseudoResult:
    """
    Para cada caso:
    1. ROI a partir da previsão grosseira do professor
    2. recorta -> normaliza -> reamostra -> forward -> argmax
    3. grava no shape da tarefa; a caixa vai para o provenance.json
    Falhas por caso são registradas e a execução continua.
    """
    model = load_checkpoint(teacher) if isinstance(teacher, str) else teacher
    teacher_id = teacher if isinstance(teacher, str) else "/".join(model.lineage) or "in-memory"
    os.makedirs(out_dir, exist_ok=True)

    paths, failures, provenance = {}, {}, {}
    for record in records:
        try:
            volume = load_case_image(manifest, record)
            box = _teacher_roi(model, volume, stats, pipeline)
            pred = predict_label(model, prepare_input(volume, box, stats, pipeline.stage2_shape))
            path = pseudo_label_path(out_dir, record.case_id)
            save_label(pred, path)
            paths[record.case_id] = path
            provenance[record.case_id] = {"teacher": teacher_id, "roi": box.to_dict()}
        except Exception as e:
            logger.exception(f"Falha ao gerar pseudo-rótulo de {record.case_id}")
            failures[record.case_id] = str(e)

    with open(os.path.join(out_dir, PROVENANCE_FILE), "w", encoding="utf-8") as f:
        json.dump({"cases": provenance, "failures": failures}, f, indent=2, sort_keys=True)
    logger.info(f"Pseudo-rótulos: {len(paths)} gerados, {len(failures)} falhas")
    return PseudoResult(paths, failures)
