import os

# Antes de qualquer import do app: tarefas Celery rodam no próprio processo
os.environ["STMT_CELERY_EAGER"] = "1"

import pytest

from app.core.config import build_run_config
from app.services.phantom_service import generate_phantom
from app.services.sample_service import fit_norm_stats

TINY = (16, 16, 16)


def tiny_tree(**sections) -> dict:
    """Configuração mínima: volumes 16³, redes de 2 escalas e treinos de poucas iterações."""
    task = {"epochs": 2, "iters_per_epoch": 2, "input_shape": list(TINY), "lr0": 0.01, "batch_size": 2}
    tree = {
        "seed": 0,
        "phantom": {
            "volume_shape": list(TINY),
            "num_organs": 3,
            "n_full": 3,
            "n_partial": 3,
            "n_unlabeled": 2,
            "n_test": 2,
            "tumor_rate": 1.0,
            "tumor_annotation_rate": 0.5,
        },
        "nets": {"base_channels": 4, "num_scales": 2, "max_channels": 16},
        "pipeline": {"stage1_shape": list(TINY), "stage2_shape": list(TINY)},
        "train": {
            "teacher": dict(task),
            "stage1": dict(task),
            "organ": dict(task, batch_size=3),
            "tumor": dict(task),
        },
        "eval": {"sample_interval_s": 0.02, "memory_source": "rss"},
        "ablation": {"seeds": [0]},
    }
    for name, values in sections.items():
        tree[name] = {**tree.get(name, {}), **values}
    return tree


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch, tmp_path):
    # Registro e raiz de execuções sempre dentro do tmp do teste
    monkeypatch.delenv("STMT_DATABASE_URL", raising=False)
    monkeypatch.setenv("STMT_RUN_ROOT", str(tmp_path / "runs"))
    for name in list(os.environ):
        if name.startswith("STMT__"):
            monkeypatch.delenv(name)


@pytest.fixture
def tiny_cfg():
    return build_run_config(tiny_tree())


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Phantom 16³ gerado uma vez por sessão: (manifest, stats)."""
    cfg = build_run_config(tiny_tree())
    root = tmp_path_factory.mktemp("phantom")
    manifest = generate_phantom(cfg.phantom, str(root))
    return manifest, fit_norm_stats(manifest)
