import csv
import json
import os

import numpy as np
import pytest
import torch

from app.core.config import PipelineSection, build_run_config, dump_run_config
from app.db.base import CaseEfficiency, CaseMetric, Run
from app.db.session import SessionLocal, database_url
from app.main import main
from app.services.ablation_service import run_ablation
from app.services.net_service import NetSpec, build_model
from app.services.pipeline_service import PipelineBundle, save_bundle
from app.services.volume_service import load_label, save_volume
from app.worker import segment_case_task
from tests.conftest import tiny_tree
from tests.helpers import IDENTITY_STATS, blocks, class_volume


@pytest.fixture
def run_args(tmp_path):
    """Argumentos globais: configuração mínima em arquivo e raiz de execuções isolada."""
    config = tmp_path / "tiny.cfg"
    config.write_text(dump_run_config(build_run_config(tiny_tree())))
    root = tmp_path / "runs"
    return ["--config", str(config), "--run-root", str(root)], root


def _runs(root, command):
    db = SessionLocal(database_url(str(root)))
    try:
        return db.query(Run).filter(Run.command == command).all()
    finally:
        db.close()


def test_phantom_writes_dataset_and_refuses_overwrite(run_args):
    args, root = run_args
    assert main(args + ["phantom"]) == 0

    data = root / "data"
    for name in ("manifest.json", "norm_stats.json", "config.cfg", "run.json"):
        assert (data / name).exists()
    assert len(os.listdir(data / "truth")) == 10
    assert json.loads((data / "run.json").read_text())["command"] == "phantom"

    assert main(args + ["phantom"]) == 2
    assert main(args + ["--force", "phantom"]) == 0
    assert [r.status for r in _runs(root, "phantom")] == ["DONE", "DONE"]


def test_missing_artifacts_exit_with_three(run_args):
    args, _ = run_args
    for command in (["train-teacher"], ["pseudo"], ["train-organ-student"], ["infer"], ["eval"], ["ablate"]):
        assert main(args + command) == 3


def test_invalid_configuration_exits_with_two(run_args):
    args, root = run_args
    assert main(args + ["--set", "train.organ.batch_size=4", "phantom"]) == 2
    assert main(args + ["--set", "nets.nope=1", "phantom"]) == 2
    assert not (root / "data").exists()


def test_eval_of_truth_against_itself(run_args):
    args, root = run_args
    assert main(args + ["--no-registry", "phantom"]) == 0
    truth = str(root / "data" / "truth")
    assert main(args + ["eval", "--pred", truth, "--truth", truth]) == 0

    report = json.loads((root / "eval" / "report.json").read_text())
    assert len(report["cases"]) == 10
    assert all(m["dsc"] == 1.0 and m["nsd"] == 1.0 for c in report["cases"] for m in c["metrics"])
    with open(root / "eval" / "report.csv", newline="") as f:
        header = next(csv.reader(f))
    assert header[-2:] == ["dsc_14", "nsd_14"]
    assert (root / "eval" / "accuracy.txt").exists() and (root / "eval" / "efficiency.txt").exists()

    run = _runs(root, "eval")[0]
    db = SessionLocal(database_url(str(root)))
    try:
        assert db.query(CaseMetric).filter(CaseMetric.run_id == run.id).count() == 10 * 4
        assert db.query(CaseEfficiency).filter(CaseEfficiency.run_id == run.id).count() == 10
    finally:
        db.close()


def test_training_after_phantom(run_args):
    args, root = run_args
    assert main(args + ["phantom"]) == 0
    assert main(args + ["train-teacher"]) == 0
    assert (root / "teacher" / "final.ckpt").exists()
    # pseudo-rótulos ainda não existem
    assert main(args + ["train-organ-student"]) == 3


# --- Worker ---

def _saved_bundle(directory):
    def net(classes, seed):
        return build_model(NetSpec(num_classes=classes, base_channels=4, num_scales=2, max_channels=16), seed)

    bundle = PipelineBundle(
        stage1_model=net(2, 1),
        organ_model=net(4, 2),
        tumor_model=net(2, 3),
        stage1_stats=IDENTITY_STATS,
        stage2_stats=IDENTITY_STATS,
        options=PipelineSection(stage1_shape=(8, 8, 8), stage2_shape=(8, 8, 8)),
    )
    save_bundle(bundle, str(directory))
    return str(directory)


def test_worker_segments_case(tmp_path):
    bundle_dir = _saved_bundle(tmp_path / "bundle")
    image = tmp_path / "case_0001.svol"
    save_volume(class_volume(blocks((12, 12, 12), {1: ((2, 2, 2), (8, 8, 8))})), str(image))
    output = tmp_path / "out" / "case_0001.svol"

    result = segment_case_task.delay(bundle_dir, str(image), str(output)).get()
    assert result["status"] == "ok" and result["case_id"] == "case_0001"
    assert result["runtime_s"] >= 0
    label = load_label(str(output))
    assert label.shape == (12, 12, 12)
    assert set(np.unique(label.data)) <= {0, 1, 2, 3, 14}


def test_worker_reports_errors_instead_of_raising(tmp_path):
    bundle_dir = _saved_bundle(tmp_path / "bundle")
    result = segment_case_task.delay(bundle_dir, str(tmp_path / "nada.svol"), str(tmp_path / "o.svol")).get()
    assert result["status"] == "error" and "nada.svol" in result["error"]

    image = tmp_path / "case.svol"
    save_volume(class_volume(blocks((8, 8, 8), {1: ((2, 2, 2), (5, 5, 5))})), str(image))
    result = segment_case_task.delay(str(tmp_path / "sem_bundle"), str(image), str(tmp_path / "o.svol")).get()
    assert result["status"] == "error"


def _constant_organ_bundle(directory, organ_class):
    """Bundle cujo modelo de órgãos responde `organ_class` em todo o ROI (cabeça zerada, viés dominante)."""
    organ = build_model(NetSpec(num_classes=4, base_channels=4, num_scales=2, max_channels=16), 2)
    with torch.no_grad():
        organ.network.head.weight.zero_()
        organ.network.head.bias.zero_()
        organ.network.head.bias[organ_class] = 10.0
    bundle = PipelineBundle(
        stage1_model=build_model(NetSpec(num_classes=2, base_channels=4, num_scales=2, max_channels=16), 1),
        organ_model=organ,
        tumor_model=None,
        stage1_stats=IDENTITY_STATS,
        stage2_stats=IDENTITY_STATS,
        options=PipelineSection(stage1_shape=(8, 8, 8), stage2_shape=(8, 8, 8)),
    )
    save_bundle(bundle, str(directory))
    return str(directory)


def test_worker_reloads_bundle_rewritten_in_place(tmp_path):
    image = tmp_path / "case_0002.svol"
    save_volume(class_volume(blocks((12, 12, 12), {1: ((2, 2, 2), (8, 8, 8))})), str(image))
    output = tmp_path / "out.svol"

    bundle_dir = _constant_organ_bundle(tmp_path / "bundle", organ_class=2)
    assert segment_case_task.delay(bundle_dir, str(image), str(output)).get()["status"] == "ok"
    first = load_label(str(output)).data
    assert 2 in first and set(np.unique(first)) <= {0, 2}

    # mesmo diretório regravado (como um --force): o worker precisa servir o bundle novo
    _constant_organ_bundle(tmp_path / "bundle", organ_class=3)
    assert segment_case_task.delay(bundle_dir, str(image), str(output)).get()["status"] == "ok"
    second = load_label(str(output)).data
    assert 3 in second and set(np.unique(second)) <= {0, 3}


# --- Fluxo completo ---

@pytest.mark.slow
def test_full_workflow(run_args):
    args, root = run_args
    for command in (
        ["phantom"],
        ["train-teacher"],
        ["pseudo"],
        ["train-stage1"],
        ["train-organ-student"],
        ["train-tumor-mt"],
        ["infer"],
        ["eval"],
    ):
        assert main(args + command) == 0, command

    predictions = os.listdir(root / "infer" / "predictions")
    assert sorted(predictions) == ["test_0008.svol", "test_0009.svol"]
    with open(root / "infer" / "efficiency.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2 and all(float(r["runtime_s"]) > 0 for r in rows)
    assert len(json.loads((root / "eval" / "report.json").read_text())["cases"]) == 2

    # mesma inferência despachada pela fila (Celery em modo eager)
    assert main(args + ["--queue", "infer", "--out", str(root / "infer_queue")]) == 0
    queued = root / "infer_queue" / "predictions"
    for name in predictions:
        assert np.array_equal(
            load_label(str(queued / name)).data,
            load_label(str(root / "infer" / "predictions" / name)).data,
        )


@pytest.mark.slow
def test_ablation_is_reproducible(tiny_dataset, tmp_path):
    manifest, stats = tiny_dataset
    cfg = build_run_config(tiny_tree())
    first = run_ablation(cfg, manifest, stats, str(tmp_path / "a"))
    second = run_ablation(cfg, manifest, stats, str(tmp_path / "b"))

    assert [r.arm for r in first] == list(cfg.ablation.arms)
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()
    assert first == second
    for r in first:
        assert (r.organ_dsc is None) == (r.arm in {"FST", "MT"})
        assert (r.tumor_dsc is None) == (r.arm not in {"FST", "MT", "StMt"})
