import argparse
import logging
import os

from app.commands.deps import (
    ORGAN_DIR,
    PSEUDO_DIR,
    STAGE1_DIR,
    TEACHER_DIR,
    TUMOR_DIR,
    CommandContext,
    checkpoint,
    dataset_manifest,
    norm_stats,
    prepare_run_dir,
    registered_run,
    require,
    write_run_manifest,
)
from app.services.sample_service import TaskData
from app.services.workflow_service import fit_organ_student, fit_stage1, fit_teacher, fit_tumor, make_pseudo_labels

logger = logging.getLogger(__name__)


def _task_data(ctx: CommandContext, pseudo_dir: str = None) -> TaskData:
    return TaskData(dataset_manifest(ctx), norm_stats(ctx), ctx.cfg.pipeline, pseudo_dir, ctx.cfg.workers)


# ==========================================
# 1. Professor e pseudo-rótulos
# ==========================================

def cmd_train_teacher(ctx: CommandContext, args: argparse.Namespace) -> int:
    data = _task_data(ctx)
    out = prepare_run_dir(ctx, TEACHER_DIR)
    with registered_run(ctx, "train-teacher", out):
        result = fit_teacher(ctx.cfg, data, out)
        write_run_manifest(ctx, out, "train-teacher", {"dataset": ctx.path("data")})
    logger.info(f"Professor salvo em {result.final_path} (melhor loss {result.best_loss:.4f})")
    return 0


def cmd_pseudo(ctx: CommandContext, args: argparse.Namespace) -> int:
    """Gera pseudo-rótulos para parciais e não rotulados; a correção dos parciais é feita ao carregar."""
    teacher = checkpoint(ctx, TEACHER_DIR, "train-teacher")
    data = _task_data(ctx)
    out = prepare_run_dir(ctx, PSEUDO_DIR)
    with registered_run(ctx, "pseudo", out):
        result = make_pseudo_labels(ctx.cfg, data, teacher, out)
        write_run_manifest(ctx, out, "pseudo", {"teacher": teacher, "dataset": ctx.path("data")})
    if result.failures:
        logger.error(f"{len(result.failures)} caso(s) falharam: {sorted(result.failures)}")
    return 0


# ==========================================
# 2. Estágio 1
# ==========================================

def cmd_train_stage1(ctx: CommandContext, args: argparse.Namespace) -> int:
    pseudo_dir = ctx.path(PSEUDO_DIR)
    if not os.path.isdir(pseudo_dir):
        logger.warning("Sem pseudo-rótulos: estágio 1 treina só com os casos completos")
        pseudo_dir = None
    data = _task_data(ctx, pseudo_dir)
    out = prepare_run_dir(ctx, STAGE1_DIR)
    with registered_run(ctx, "train-stage1", out):
        result = fit_stage1(ctx.cfg, data, out)
        inputs = {"dataset": ctx.path("data")}
        if pseudo_dir:
            inputs["pseudo"] = pseudo_dir
        write_run_manifest(ctx, out, "train-stage1", inputs)
    logger.info(f"Estágio 1 salvo em {result.final_path}")
    return 0


# ==========================================
# 3. Estágio 2: aluno de órgãos e tumor
# ==========================================

def cmd_train_organ_student(ctx: CommandContext, args: argparse.Namespace) -> int:
    pseudo_dir = require(ctx.path(PSEUDO_DIR, "provenance.json"), "pseudo")
    data = _task_data(ctx, os.path.dirname(pseudo_dir))
    out = prepare_run_dir(ctx, ORGAN_DIR)
    with registered_run(ctx, "train-organ-student", out):
        result = fit_organ_student(ctx.cfg, data, out, use_unlabeled=not args.partial_only)
        write_run_manifest(ctx, out, "train-organ-student", {"dataset": ctx.path("data"), "pseudo": ctx.path(PSEUDO_DIR)})
    logger.info(f"Aluno de órgãos salvo em {result.final_path}")
    return 0


def cmd_train_tumor_mt(ctx: CommandContext, args: argparse.Namespace) -> int:
    data = _task_data(ctx)
    out = prepare_run_dir(ctx, TUMOR_DIR)
    with registered_run(ctx, "train-tumor-mt", out):
        fit = fit_tumor(ctx.cfg, data, out, mean_teacher=not args.supervised)
        write_run_manifest(ctx, out, "train-tumor-mt", {"dataset": ctx.path("data")})
    logger.info(f"Tumor: pesos de inferência em {fit.inference_ckpt}")
    return 0


def register(subparsers):
    parser = subparsers.add_parser("train-teacher", help="Treina o professor de órgãos nos casos completos")
    parser.set_defaults(func=cmd_train_teacher)

    parser = subparsers.add_parser("pseudo", help="Gera pseudo-rótulos com o professor")
    parser.set_defaults(func=cmd_pseudo)

    parser = subparsers.add_parser("train-stage1", help="Treina o localizador do abdômen (estágio 1)")
    parser.set_defaults(func=cmd_train_stage1)

    parser = subparsers.add_parser("train-organ-student", help="Treina o aluno de órgãos (self-training)")
    parser.add_argument("--partial-only", action="store_true", help="Não usa os casos sem rótulo (lambda2 = 0)")
    parser.set_defaults(func=cmd_train_organ_student)

    parser = subparsers.add_parser("train-tumor-mt", help="Treina o segmentador de tumor com mean teacher")
    parser.add_argument("--supervised", action="store_true", help="Treino totalmente supervisionado, sem mean teacher")
    parser.set_defaults(func=cmd_train_tumor_mt)
