import json

import numpy as np
import pytest

from app.core.exceptions import ManifestError, PhantomConfigError
from app.schemas.dataset import PhantomConfig, Split, Supervision
from app.services.label_service import TUMOR_CLASS
from app.services.phantom_service import generate_case, generate_phantom, load_manifest, validate_phantom_config
from app.services.volume_service import load_label


def _small(**kw):
    base = dict(volume_shape=(16, 16, 16), num_organs=3, n_full=2, n_partial=2, n_unlabeled=2, n_test=1, tumor_rate=1.0)
    base.update(kw)
    return PhantomConfig(**base)


def test_case_generation_is_deterministic_and_order_free():
    cfg = _small()
    a, b = generate_case(cfg, 3), generate_case(cfg, 3)
    assert np.array_equal(a.image.data, b.image.data)
    assert np.array_equal(a.truth.data, b.truth.data)
    assert not np.array_equal(generate_case(cfg, 2).image.data, a.image.data)


def test_supervision_regimes(tiny_dataset):
    manifest, _ = tiny_dataset
    full = manifest.by_supervision(Supervision.FULL_ORGAN)
    partial = manifest.by_supervision(Supervision.PARTIAL_ORGAN)
    unlabeled = manifest.by_supervision(Supervision.UNLABELED)

    assert len(full) == 3 and len(partial) == 3 and len(unlabeled) == 2
    assert len(manifest.test_cases()) == 2
    assert all(r.annotated_organ_set == [1, 2, 3] for r in full)
    assert all(0 < len(r.annotated_organ_set) < 3 for r in partial)
    assert all(r.label_path is None for r in unlabeled + manifest.test_cases())


def test_released_labels_hide_what_annotator_missed(tiny_dataset):
    manifest, _ = tiny_dataset
    for record in manifest.train_cases():
        if record.label_path is None:
            continue
        released = load_label(manifest.path(record.label_path)).data
        truth = load_label(manifest.path(record.truth_path)).data

        # o liberado é a verdade com classes apagadas, nunca trocadas
        assert ((released == truth) | (released == 0)).all()
        organs = set(np.unique(released).tolist()) - {0, TUMOR_CLASS}
        assert organs <= set(record.annotated_organ_set)
        if not record.tumor_annotated:
            assert TUMOR_CLASS not in released


def test_truth_always_complete(tiny_dataset):
    manifest, _ = tiny_dataset
    for record in manifest.cases:
        truth = load_label(manifest.path(record.truth_path)).data
        classes = set(np.unique(truth).tolist())
        assert 1 in classes and classes <= {0, 1, 2, 3, TUMOR_CLASS}
        assert (TUMOR_CLASS in classes) == record.has_tumor


def test_tumor_annotation_rate_is_respected(tmp_path):
    cfg = PhantomConfig(
        volume_shape=(16, 16, 16), num_organs=2, n_full=300, n_partial=0, n_unlabeled=0, n_test=0,
        tumor_rate=1.0, tumor_annotation_rate=0.68,
    )
    records = [generate_case(cfg, i).record for i in range(cfg.n_full)]
    with_tumor = [r for r in records if r.has_tumor]
    rate = sum(r.tumor_annotated for r in with_tumor) / len(with_tumor)
    assert rate == pytest.approx(0.68, abs=0.15)


def test_invalid_phantom_config():
    with pytest.raises(PhantomConfigError):
        validate_phantom_config(_small(volume_shape=(4, 16, 16)))
    with pytest.raises(PhantomConfigError):
        validate_phantom_config(_small(num_organs=1))
    with pytest.raises(ValueError):
        PhantomConfig(num_organs=14)


def test_manifest_round_trip_and_errors(tmp_path):
    manifest = generate_phantom(_small(), str(tmp_path / "data"))
    path = tmp_path / "data" / "manifest.json"
    assert load_manifest(str(path)).cases == manifest.cases

    raw = json.loads(path.read_text())
    raw["format_version"] = "9"
    path.write_text(json.dumps(raw))
    with pytest.raises(ManifestError) as err:
        load_manifest(str(path))
    assert err.value.field == "format_version"

    raw["format_version"] = "1"
    raw["cases"][0]["supervision"] = "UNLABELED"
    path.write_text(json.dumps(raw))
    with pytest.raises(ManifestError):
        load_manifest(str(path))

    with pytest.raises(ManifestError):
        load_manifest(str(tmp_path / "missing.json"))


def test_manifest_detects_missing_files(tmp_path):
    manifest = generate_phantom(_small(), str(tmp_path / "data"))
    (tmp_path / "data" / manifest.cases[0].image_path).unlink()
    with pytest.raises(ManifestError) as err:
        load_manifest(str(tmp_path / "data" / "manifest.json"))
    assert err.value.field == "cases.0.image_path"
    assert manifest.cases[-1].split == Split.TEST
