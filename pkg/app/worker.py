import logging
import os
import time
from functools import lru_cache
from typing import Optional

from app.core.celery_app import celery_app
from app.services.pipeline_service import TwoStagePipeline, bundle_version, load_bundle
from app.services.volume_service import load_volume, save_label

logger = logging.getLogger(__name__)


@lru_cache(maxsize=4)
def _pipeline(bundle_dir: str, version: Optional[str]) -> TwoStagePipeline:
    # Um pipeline por processo e por gravação do bundle: regravar o diretório (--force) troca a chave
    return TwoStagePipeline(load_bundle(bundle_dir))


@celery_app.task(name="segment_case_task")
def segment_case_task(bundle_dir: str, image_path: str, output_path: str) -> dict:
    """
    Worker que roda em background.
    Segmenta um caso com o pipeline de dois estágios e grava o rótulo em SVOL.
    Falhas viram status de erro em vez de exceção.
    """
    case_id = os.path.basename(image_path).split(".")[0]
    try:
        # 1. Confere a entrada antes de carregar os modelos
        if not os.path.exists(image_path):
            raise FileNotFoundError(f"Imagem não encontrada: {image_path}")

        # 2. Carrega o pipeline (cache por processo) e o volume
        bundle_dir = os.path.abspath(bundle_dir)
        pipeline = _pipeline(bundle_dir, bundle_version(bundle_dir))
        volume = load_volume(image_path)

        # 3. Inferência
        start = time.perf_counter()
        label = pipeline(volume)
        runtime = time.perf_counter() - start

        # 4. Grava o resultado
        os.makedirs(os.path.dirname(os.path.abspath(output_path)), exist_ok=True)
        save_label(label, output_path)
        logger.info(f"Caso {case_id} segmentado em {runtime:.2f} s")
        return {"case_id": case_id, "status": "ok", "output_path": output_path, "runtime_s": runtime}

    except Exception as e:
        logger.exception(f"Erro no worker ao segmentar {case_id}")
        return {"case_id": case_id, "status": "error", "error": str(e)[:500]}
