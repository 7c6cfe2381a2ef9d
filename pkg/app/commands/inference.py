import argparse
import csv
import glob
import logging
import os

from app.commands.deps import (
    DATA_DIR,
    INFER_DIR,
    ORGAN_DIR,
    STAGE1_DIR,
    TUMOR_DIR,
    CommandContext,
    checkpoint,
    norm_stats,
    prepare_run_dir,
    registered_run,
    require,
    write_run_manifest,
)
from app.services.eval_service import auc_mem_time, memory_probe, profile_case
from app.services.net_service import load_checkpoint
from app.services.pipeline_service import PipelineBundle, TwoStagePipeline, save_bundle
from app.services.volume_service import load_volume, save_label
from app.worker import segment_case_task

logger = logging.getLogger(__name__)

EFFICIENCY_FILE = "efficiency.csv"
EFFICIENCY_COLUMNS = ["case_id", "image_size", "runtime_s", "max_mem_mb", "auc_mb_s"]


def _tumor_checkpoint(ctx: CommandContext) -> str:
    teacher = ctx.path(TUMOR_DIR, "teacher.ckpt")
    if ctx.cfg.pipeline.tumor_weights == "teacher" and os.path.exists(teacher):
        return teacher
    return checkpoint(ctx, TUMOR_DIR, "train-tumor-mt")


def assemble_bundle(ctx: CommandContext) -> PipelineBundle:
    stats = norm_stats(ctx)
    return PipelineBundle(
        stage1_model=load_checkpoint(checkpoint(ctx, STAGE1_DIR, "train-stage1")),
        organ_model=load_checkpoint(checkpoint(ctx, ORGAN_DIR, "train-organ-student")),
        tumor_model=load_checkpoint(_tumor_checkpoint(ctx)),
        stage1_stats=stats,
        stage2_stats=stats,
        options=ctx.cfg.pipeline,
    )


def _input_images(ctx: CommandContext, in_dir: str):
    if in_dir:
        paths = sorted(glob.glob(os.path.join(require(in_dir, "phantom"), "*.svol")))
    else:
        # padrão: casos de teste do dataset
        paths = sorted(glob.glob(os.path.join(require(ctx.path(DATA_DIR, "images"), "phantom"), "test_*.svol")))
    return [(os.path.basename(p).split(".")[0], p) for p in paths]


def _run_local(pipeline: TwoStagePipeline, images, pred_dir: str, cfg) -> list:
    rows = []
    for case_id, path in images:
        volume = load_volume(path)
        holder = {}

        def work():
            holder["label"] = pipeline(volume)

        # 1. Inferência com amostragem de memória
        runtime, curve = profile_case(work, cfg.eval.sample_interval_s, cfg.eval.memory_source, case_id)
        save_label(holder["label"], os.path.join(pred_dir, f"{case_id}.svol"))
        rows.append([case_id, "x".join(map(str, volume.shape)), runtime, curve.max_mem, auc_mem_time(curve)])
        logger.info(f"{case_id}: {runtime:.2f} s, pico {curve.max_mem:.0f} MB")
    return rows


def _run_queued(bundle_dir: str, images, pred_dir: str) -> list:
    # 1. Despacha um job por caso
    jobs = [
        (case_id, path, segment_case_task.delay(bundle_dir, path, os.path.join(pred_dir, f"{case_id}.svol")))
        for case_id, path in images
    ]
    # 2. Espera os resultados; falhas ficam registradas e não derrubam o resto
    rows = []
    for case_id, path, job in jobs:
        result = job.get()
        if result.get("status") != "ok":
            logger.error(f"{case_id}: {result.get('error')}")
            continue
        shape = load_volume(path).shape
        rows.append([case_id, "x".join(map(str, shape)), result["runtime_s"], "", ""])
    return rows


def cmd_infer(ctx: CommandContext, args: argparse.Namespace) -> int:
    images = _input_images(ctx, args.in_dir)
    bundle = assemble_bundle(ctx)
    out = prepare_run_dir(ctx, args.out_dir or INFER_DIR)
    pred_dir = os.path.join(out, "predictions")
    os.makedirs(pred_dir, exist_ok=True)

    with registered_run(ctx, "infer", out):
        bundle_dir = os.path.join(out, "bundle")
        save_bundle(bundle, bundle_dir)
        if ctx.queue:
            rows = _run_queued(bundle_dir, images, pred_dir)
        else:
            rows = _run_local(TwoStagePipeline(bundle), images, pred_dir, ctx.cfg)

        with open(os.path.join(out, EFFICIENCY_FILE), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(EFFICIENCY_COLUMNS)
            writer.writerows(rows)
        write_run_manifest(ctx, out, "infer", {"images": args.in_dir or ctx.path(DATA_DIR, "images"), "bundle": bundle_dir})

    _, source = memory_probe(ctx.cfg.eval.memory_source)
    logger.info(f"{len(rows)}/{len(images)} casos segmentados em {pred_dir} (memória: {source})")
    return 0 if len(rows) == len(images) else 4


def register(subparsers):
    parser = subparsers.add_parser("infer", help="Segmenta volumes com o pipeline de dois estágios")
    parser.add_argument("--in", dest="in_dir", help="Diretório com volumes .svol (padrão: casos de teste)")
    parser.add_argument("--out", dest="out_dir", help="Diretório de saída (padrão: <run-root>/infer)")
    parser.set_defaults(func=cmd_infer)
