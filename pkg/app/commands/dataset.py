import argparse
import json
import logging
import os

from app.commands.deps import DATA_DIR, NORM_STATS_FILE, CommandContext, prepare_run_dir, registered_run, write_run_manifest
from app.services.phantom_service import generate_phantom
from app.services.sample_service import fit_norm_stats

logger = logging.getLogger(__name__)


def cmd_phantom(ctx: CommandContext, args: argparse.Namespace) -> int:
    """Gera o dataset sintético e as estatísticas de normalização do treino."""
    out = prepare_run_dir(ctx, args.out or DATA_DIR)
    with registered_run(ctx, "phantom", out):
        # 1. Casos + manifesto
        manifest = generate_phantom(ctx.cfg.phantom, out, workers=ctx.cfg.workers)

        # 2. Estatísticas globais de foreground (só rótulos liberados do treino)
        stats = fit_norm_stats(manifest)
        with open(os.path.join(out, NORM_STATS_FILE), "w", encoding="utf-8") as f:
            json.dump(stats.to_dict(), f, indent=2, sort_keys=True)

        write_run_manifest(ctx, out, "phantom", {})
    logger.info(f"Dataset pronto em {out}")
    return 0


def register(subparsers):
    parser = subparsers.add_parser("phantom", help="Gera o dataset de phantoms")
    parser.add_argument("--out", help="Diretório de saída (padrão: <run-root>/data)")
    parser.set_defaults(func=cmd_phantom)
