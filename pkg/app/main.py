import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

# Importação da configuração e dos erros
from app.core.config import default_run_root, load_run_config
from app.core.exceptions import ConfigError, StmtError

# Importação dos Módulos (Subcomandos)
from app.commands import ablation, dataset, evaluation, inference, training
from app.commands.deps import CommandContext

logger = logging.getLogger("app")

TRAIN_TASKS = ("teacher", "stage1", "organ", "tumor")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stmt",
        description="StMt - segmentação de órgãos e tumores abdominais com self-training e mean teacher.",
    )
    parser.add_argument("--profile", help="Perfil em profiles/<nome>.cfg (ex: desk, flare)")
    parser.add_argument("--config", help="Arquivo de configuração chave=valor")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="CHAVE=VALOR",
                        help="Sobrescreve uma chave (pode repetir)")
    parser.add_argument("--run-root", help="Raiz das execuções (padrão: $STMT_RUN_ROOT ou ./runs)")
    parser.add_argument("--seed", type=int, help="Seed global")
    parser.add_argument("--workers", type=int, help="Workers de preparo de dados")
    parser.add_argument("--force", action="store_true", help="Sobrescreve o diretório de saída")
    parser.add_argument("--queue", action="store_true", help="infer: despacha os casos para o worker Celery")
    parser.add_argument("--no-registry", action="store_true", help="Não registra a execução no banco")
    parser.add_argument("--log-level", default="INFO", help="Nível de log (DEBUG, INFO, WARNING...)")

    # Registro dos subcomandos
    subparsers = parser.add_subparsers(dest="command", required=True)
    dataset.register(subparsers)
    training.register(subparsers)
    inference.register(subparsers)
    evaluation.register(subparsers)
    ablation.register(subparsers)
    return parser


def _flag_overrides(args: argparse.Namespace) -> List[str]:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
        overrides += [f"train.{task}.workers={args.workers}" for task in TRAIN_TASKS]
    return overrides


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        # 1. Configuração validada antes de qualquer trabalho
        cfg, provenance = load_run_config(args.config, args.profile, _flag_overrides(args))
        ctx = CommandContext(
            cfg=cfg,
            provenance=provenance,
            run_root=args.run_root or default_run_root(),
            force=args.force,
            queue=args.queue,
            record=not args.no_registry,
        )
        # 2. Subcomando
        return args.func(ctx, args)
    except ValidationError as e:
        logger.error(f"Configuração inválida: {e}")
        return ConfigError.exit_code
    except StmtError as e:
        logger.error(str(e))
        return e.exit_code
    except Exception:
        logger.exception("Falha inesperada")
        return StmtError.exit_code


if __name__ == "__main__":
    sys.exit(main())
