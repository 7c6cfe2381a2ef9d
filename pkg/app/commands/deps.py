"""
Dependências compartilhadas pelos subcomandos: diretórios de execução, artefatos de etapas
anteriores e registro das execuções no banco.
"""
import datetime
import json
import logging
import os
import shutil
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict

from app.core.config import Provenance, RunConfig, config_hash, echo_with_provenance
from app.core.exceptions import MissingArtifactError, OutputExistsError
from app.db.base import Run
from app.db.session import SessionLocal, database_url
from app.schemas.dataset import DatasetManifest
from app.services.phantom_service import load_manifest
from app.services.volume_service import NormStats

logger = logging.getLogger(__name__)

# Layout da raiz de execuções: uma pasta por etapa
DATA_DIR = "data"
TEACHER_DIR = "teacher"
PSEUDO_DIR = "pseudo"
STAGE1_DIR = "stage1"
ORGAN_DIR = "organ_student"
TUMOR_DIR = "tumor_mt"
INFER_DIR = "infer"
EVAL_DIR = "eval"
ABLATE_DIR = "ablate"

NORM_STATS_FILE = "norm_stats.json"


@dataclass
class CommandContext:
    cfg: RunConfig
    provenance: Provenance
    run_root: str
    force: bool = False
    queue: bool = False
    record: bool = True

    def path(self, *parts: str) -> str:
        return os.path.join(self.run_root, *parts)


# ==========================================
# 1. Artefatos de entrada
# ==========================================

def require(path: str, producer: str) -> str:
    """Garante que o artefato existe; senão diz qual subcomando o produz."""
    if not os.path.exists(path):
        raise MissingArtifactError(path, producer)
    return path


def dataset_manifest(ctx: CommandContext) -> DatasetManifest:
    return load_manifest(require(ctx.path(DATA_DIR, "manifest.json"), "phantom"))


def norm_stats(ctx: CommandContext) -> NormStats:
    path = require(ctx.path(DATA_DIR, NORM_STATS_FILE), "phantom")
    with open(path, "r", encoding="utf-8") as f:
        return NormStats.from_dict(json.load(f))


def checkpoint(ctx: CommandContext, directory: str, producer: str, name: str = "final.ckpt") -> str:
    return require(ctx.path(directory, name), producer)


# ==========================================
# 2. Diretório de saída
# ==========================================

def prepare_run_dir(ctx: CommandContext, directory: str) -> str:
    """Recusa sobrescrever sem --force; grava o eco da configuração resolvida."""
    out = os.path.abspath(directory if os.path.isabs(directory) else ctx.path(directory))
    if os.path.exists(out) and os.listdir(out):
        if not ctx.force:
            raise OutputExistsError(out)
        logger.warning(f"--force: apagando {out}")
        shutil.rmtree(out)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.cfg"), "w", encoding="utf-8") as f:
        f.write(echo_with_provenance(ctx.cfg, ctx.provenance))
    return out


def write_run_manifest(ctx: CommandContext, run_dir: str, command: str, inputs: Dict[str, str]):
    manifest = {
        "command": command,
        "inputs": {k: os.path.abspath(v) for k, v in sorted(inputs.items())},
        "config_hash": config_hash(ctx.cfg),
        "seed": ctx.cfg.seed,
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    with open(os.path.join(run_dir, "run.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


# ==========================================
# 3. Registro no banco
# ==========================================

@contextmanager
def registered_run(ctx: CommandContext, command: str, run_dir: str):
    """Registra a execução (RUNNING -> DONE/FAILED) e entrega (sessão, run). Com record=False entrega (None, None)."""
    if not ctx.record:
        yield None, None
        return

    db = SessionLocal(database_url(ctx.run_root))
    run = Run(command=command, run_dir=run_dir, config_hash=config_hash(ctx.cfg), seed=ctx.cfg.seed)
    db.add(run)
    db.commit()
    try:
        yield db, run
        run.status = "DONE"
    except Exception as e:
        db.rollback()
        run.status = "FAILED"
        run.error = str(e)[:1000]
        raise
    finally:
        run.finalizado_em = datetime.datetime.now(datetime.timezone.utc)
        db.merge(run)
        db.commit()
        db.close()
