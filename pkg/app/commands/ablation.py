import argparse
import logging
import os

from app.commands.deps import (
    ABLATE_DIR,
    DATA_DIR,
    CommandContext,
    dataset_manifest,
    norm_stats,
    prepare_run_dir,
    registered_run,
    write_run_manifest,
)
from app.services.ablation_service import format_ablation_table, run_ablation

logger = logging.getLogger(__name__)


def cmd_ablate(ctx: CommandContext, args: argparse.Namespace) -> int:
    """Estudo de ablação: todos os braços configurados, uma rodada por seed."""
    manifest = dataset_manifest(ctx)
    stats = norm_stats(ctx)
    out = prepare_run_dir(ctx, args.out_dir or ABLATE_DIR)
    with registered_run(ctx, "ablate", out):
        results = run_ablation(ctx.cfg, manifest, stats, out)
        write_run_manifest(ctx, out, "ablate", {"dataset": ctx.path(DATA_DIR)})
    print(format_ablation_table(results, ctx.cfg.ablation.arms), end="")
    logger.info(f"Métricas da ablação em {os.path.join(out, 'metrics.csv')}")
    return 0


def register(subparsers):
    parser = subparsers.add_parser("ablate", help="Roda o estudo de ablação (baseline, FSO, ST, FST, MT, StMt)")
    parser.add_argument("--out", dest="out_dir", help="Diretório de saída (padrão: <run-root>/ablate)")
    parser.set_defaults(func=cmd_ablate)
