import argparse
import csv
import glob
import logging
import os

from app.commands.deps import (
    DATA_DIR,
    EVAL_DIR,
    INFER_DIR,
    CommandContext,
    prepare_run_dir,
    registered_run,
    require,
    write_run_manifest,
)
from app.commands.inference import EFFICIENCY_FILE
from app.db.base import CaseEfficiency, CaseMetric
from app.schemas.report import CaseResult
from app.services.eval_service import (
    build_report,
    evaluate_case,
    format_accuracy_table,
    format_efficiency_table,
    memory_probe,
    write_report_csv,
)
from app.services.volume_service import load_label
from app.services.workflow_service import evaluated_classes

logger = logging.getLogger(__name__)


def _efficiency(pred_dir: str) -> dict:
    # efficiency.csv fica ao lado de predictions/ quando veio do infer
    path = os.path.join(os.path.dirname(os.path.abspath(pred_dir)), EFFICIENCY_FILE)
    if not os.path.exists(path):
        return {}
    with open(path, newline="") as f:
        return {row["case_id"]: row for row in csv.DictReader(f)}


def _as_float(value):
    return float(value) if value not in (None, "") else None


def cmd_eval(ctx: CommandContext, args: argparse.Namespace) -> int:
    pred_dir = require(args.pred_dir or ctx.path(INFER_DIR, "predictions"), "infer")
    truth_dir = require(args.truth_dir or ctx.path(DATA_DIR, "truth"), "phantom")
    efficiency = _efficiency(pred_dir)
    class_ids = evaluated_classes(ctx.cfg)

    # 1. Métricas por caso
    rows = []
    for pred_path in sorted(glob.glob(os.path.join(pred_dir, "*.svol"))):
        case_id = os.path.basename(pred_path).split(".")[0]
        truth_path = os.path.join(truth_dir, f"{case_id}.svol")
        if not os.path.exists(truth_path):
            logger.warning(f"{case_id}: sem verdade correspondente em {truth_dir}; ignorado")
            continue
        pred, truth = load_label(pred_path), load_label(truth_path)
        eff = efficiency.get(case_id, {})
        rows.append(CaseResult(
            case_id=case_id,
            image_size=eff.get("image_size") or "x".join(map(str, truth.shape)),
            metrics=evaluate_case(pred, truth, class_ids, ctx.cfg.eval.nsd_tolerance_mm),
            runtime_s=_as_float(eff.get("runtime_s")),
            max_mem_mb=_as_float(eff.get("max_mem_mb")),
            auc_mb_s=_as_float(eff.get("auc_mb_s")),
        ))

    # 2. Relatório
    _, source = memory_probe(ctx.cfg.eval.memory_source)
    report = build_report(
        rows,
        time_tolerance_s=ctx.cfg.eval.time_tolerance_s,
        memory_tolerance_mb=ctx.cfg.eval.memory_tolerance_mb,
        nsd_tolerance_mm=ctx.cfg.eval.nsd_tolerance_mm,
        memory_source=source,
    )
    out = prepare_run_dir(ctx, args.out_dir or EVAL_DIR)
    with registered_run(ctx, "eval", out) as (db, run):
        write_report_csv(report, os.path.join(out, "report.csv"))
        with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as f:
            f.write(report.json(indent=2))
        with open(os.path.join(out, "accuracy.txt"), "w", encoding="utf-8") as f:
            f.write(format_accuracy_table(report))
        with open(os.path.join(out, "efficiency.txt"), "w", encoding="utf-8") as f:
            f.write(format_efficiency_table(report))
        write_run_manifest(ctx, out, "eval", {"predictions": pred_dir, "truth": truth_dir})

        # 3. Registro no banco
        if db is not None:
            for case in report.cases:
                db.add_all([
                    CaseMetric(run_id=run.id, case_id=case.case_id, class_id=m.class_id, dsc=m.dsc, nsd=m.nsd)
                    for m in case.metrics
                ])
                db.add(CaseEfficiency(
                    run_id=run.id, case_id=case.case_id, runtime_s=case.runtime_s, max_mem_mb=case.max_mem_mb,
                    auc_mb_s=case.auc_mb_s, time_flag=case.time_flag, memory_flag=case.memory_flag,
                ))
            db.commit()

    print(format_accuracy_table(report), end="")
    logger.info(f"Relatório de {len(rows)} casos em {out}")
    return 0


def register(subparsers):
    parser = subparsers.add_parser("eval", help="Calcula DSC/NSD e eficiência contra a verdade")
    parser.add_argument("--pred", dest="pred_dir", help="Predições .svol (padrão: <run-root>/infer/predictions)")
    parser.add_argument("--truth", dest="truth_dir", help="Verdade .svol (padrão: <run-root>/data/truth)")
    parser.add_argument("--out", dest="out_dir", help="Diretório de saída (padrão: <run-root>/eval)")
    parser.set_defaults(func=cmd_eval)
