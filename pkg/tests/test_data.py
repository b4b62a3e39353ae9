"""Dataset file format, synthetic generation, label scaling, checkpoints."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from traitfusion import data as data_io
from traitfusion.data import (
    Checkpoint,
    CheckpointError,
    DataValidationError,
    DatasetFormatError,
    FeatureRecord,
    LabelTransform,
    SyntheticSpec,
    generate_synthetic,
    load_checkpoint,
    load_dataset,
    normalize_labels,
    save_checkpoint,
    save_dataset,
)
from traitfusion.model import TraitFusionModel, build_model_config
from traitfusion.tensor import RngState


def small_spec(n=20, seed=0, **kw):
    base = dict(n=n, text_dim=12, audio_dim=8, video_dim=8, seed=seed)
    base.update(kw)
    return SyntheticSpec(**base)


def small_model(trait="A", seed=0):
    cfg = build_model_config(
        trait, text_dim=12, audio_dim=8, video_dim=8,
        text_chunks=3, audio_chunks=2, video_chunks=2,
        cwp_hidden=6, model_dim=6, heads=2, ensemble_size=2, head_hidden=(5, 4),
    )
    return TraitFusionModel(cfg, RngState(seed))


class TestDatasetIO:
    def test_empty_file_warns_and_returns_empty(self, tmp_path, caplog):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        with caplog.at_level("WARNING", logger="traitfusion.data"):
            records = load_dataset(p)
        assert records == []
        assert any("empty" in r.message for r in caplog.records)

    def test_round_trip_100_records_lossless(self, tmp_path):
        records = generate_synthetic(small_spec(n=100, seed=7))
        path = tmp_path / "d.jsonl"
        save_dataset(records, path)
        loaded = load_dataset(path)
        assert len(loaded) == 100
        for a, b in zip(records, loaded):
            assert a.id == b.id and a.labels == b.labels and a.meta == b.meta
            for k in a.features:
                assert np.array_equal(a.features[k], b.features[k])

    def test_declared_dim_mismatch_rejected_with_id(self, tmp_path):
        records = generate_synthetic(small_spec(n=1))
        line = data_io.record_to_json(records[0])
        obj = json.loads(line)
        obj["features"]["audio"]["dim"] = 9  # actual payload has 8 floats
        p = tmp_path / "bad.jsonl"
        p.write_text(json.dumps(obj) + "\n")
        with pytest.raises(DatasetFormatError, match="synth-0-00000.*declares dim 9.*8"):
            load_dataset(p)

    def test_parse_error_carries_line_number(self, tmp_path):
        records = generate_synthetic(small_spec(n=1))
        p = tmp_path / "bad.jsonl"
        p.write_text("{oops\n" + data_io.record_to_json(records[0]) + "\n")
        with pytest.raises(DatasetFormatError, match="line 1"):
            load_dataset(p)

    def test_label_out_of_range_rejected(self, tmp_path):
        records = generate_synthetic(small_spec(n=1))
        obj = json.loads(data_io.record_to_json(records[0]))
        obj["labels"]["H"] = 5.7
        p = tmp_path / "bad.jsonl"
        p.write_text(json.dumps(obj) + "\n")
        with pytest.raises(DatasetFormatError, match="outside"):
            load_dataset(p)

    def test_cross_record_dim_conflict_names_record(self, tmp_path):
        r1, r2 = generate_synthetic(small_spec(n=2))
        o2 = json.loads(data_io.record_to_json(r2))
        vec = np.zeros(5, dtype="<f4")
        import base64
        o2["features"]["audio"] = {"dim": 5, "b64": base64.b64encode(vec.tobytes()).decode()}
        p = tmp_path / "bad.jsonl"
        p.write_text(data_io.record_to_json(r1) + "\n" + json.dumps(o2) + "\n")
        with pytest.raises(DatasetFormatError, match="synth-0-00001.*conflicts"):
            load_dataset(p)

    def test_unlabeled_records_allowed(self, tmp_path):
        rec = generate_synthetic(small_spec(n=1))[0]
        rec.labels = None
        p = tmp_path / "u.jsonl"
        save_dataset([rec], p)
        loaded = load_dataset(p)
        assert loaded[0].labels is None

    def test_validate_for_trait(self):
        records = generate_synthetic(small_spec(n=3))
        data_io.validate_for_trait(records, "H")
        del records[1].features["text_E"]
        with pytest.raises(DataValidationError, match="text_E"):
            data_io.validate_for_trait(records, "E")


class TestSynthetic:
    def test_linear_teacher_recoverable_by_least_squares(self):
        records = generate_synthetic(small_spec(n=60, seed=3, noise_std=0.0))
        for trait in ("H", "C"):
            X = np.stack([
                np.concatenate([r.features[f"text_{trait}"], r.features["audio"],
                                r.features["video"]]).astype(np.float64)
                for r in records])
            y = np.array([r.labels[trait] for r in records])
            design = np.hstack([X, np.ones((len(records), 1))])
            coef, *_ = np.linalg.lstsq(design, y, rcond=None)
            residual = design @ coef - y
            assert np.abs(residual).max() < 1e-8

    def test_n_zero_gives_empty_dataset(self):
        assert generate_synthetic(small_spec(n=0)) == []

    def test_same_seed_identical_files(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_dataset(generate_synthetic(small_spec(n=10, seed=9)), a)
        save_dataset(generate_synthetic(small_spec(n=10, seed=9)), b)
        assert a.read_bytes() == b.read_bytes()

    def test_labels_lie_in_range(self):
        for teacher in ("linear", "planted-gate"):
            records = generate_synthetic(small_spec(n=50, teacher=teacher, noise_std=0.5))
            for r in records:
                for v in r.labels.values():
                    assert 1.0 <= v <= 5.0

    def test_planted_gate_deviates_from_linear(self):
        # the gate rule must not be expressible as a linear map of the features
        records = generate_synthetic(small_spec(n=120, seed=4, teacher="planted-gate"))
        X = np.stack([
            np.concatenate([r.features["text_H"], r.features["audio"],
                            r.features["video"]]).astype(np.float64)
            for r in records])
        y = np.array([r.labels["H"] for r in records])
        design = np.hstack([X, np.ones((len(records), 1))])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        residual = design @ coef - y
        assert np.abs(residual).max() > 1e-3

    def test_passes_loader_validation(self, tmp_path):
        p = tmp_path / "ok.jsonl"
        save_dataset(generate_synthetic(small_spec(n=5)), p)
        assert len(load_dataset(p)) == 5


class TestLabelTransform:
    def test_minmax_midpoint(self):
        tr = LabelTransform.for_mode("minmax")
        assert tr.apply(np.array(3.0)) == 0.5

    def test_none_is_identity(self):
        tr = LabelTransform.for_mode("none")
        y = np.array([1.0, 2.5, 5.0])
        assert np.array_equal(tr.apply(y), y)
        assert np.array_equal(tr.invert(y), y)

    @given(st.lists(st.floats(1.0, 5.0), min_size=1, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_round_trip_identity(self, values):
        tr = LabelTransform.for_mode("minmax")
        y = np.array(values)
        back = tr.invert(tr.apply(y))
        assert np.abs(back - y).max() < 1e-12

    def test_normalize_labels_dataset(self):
        records = generate_synthetic(small_spec(n=4))
        normed, tr = normalize_labels(records, "minmax")
        for orig, scaled in zip(records, normed):
            for t, v in orig.labels.items():
                assert abs(scaled.labels[t] - (v - 1.0) / 4.0) < 1e-15
        identity, tr2 = normalize_labels(records, "none")
        assert identity[0].labels == records[0].labels


class TestCheckpoint:
    def test_save_load_save_idempotent(self, tmp_path):
        model = small_model()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(model, p1)
        restored = load_checkpoint(p1)
        save_checkpoint(restored, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bitwise_f32_round_trip(self, tmp_path):
        model = small_model(seed=5)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        restored = load_checkpoint(path)
        for name, p in model.param_dict().items():
            want = p.value.array.astype(np.float32)
            got = restored.param_dict()[name].value.array.astype(np.float32)
            assert np.array_equal(want, got), name

    def test_corrupted_blob_fails_hash_check(self, tmp_path):
        model = small_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        raw[-3] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="hash mismatch"):
            load_checkpoint(path)

    def test_truncated_blob_detected(self, tmp_path):
        model = small_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_version_mismatch_detected(self, tmp_path):
        model = small_model()
        ckpt = Checkpoint.from_model(model)
        ckpt.manifest["format_version"] = 99
        path = tmp_path / "m.ckpt"
        ckpt.save(path)
        with pytest.raises(CheckpointError, match="version"):
            Checkpoint.load(path)

    def test_predictions_survive_round_trip(self, tmp_path):
        model = small_model(seed=8)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        restored = load_checkpoint(path)
        rng = np.random.default_rng(0)
        text = rng.normal(size=(6, 12))
        audio = rng.normal(size=(6, 8))
        video = rng.normal(size=(6, 8))
        a = model.predict(text, audio, video)
        b = restored.predict(text, audio, video)
        denom = np.maximum(np.abs(a), 1e-9)
        assert (np.abs(a - b) / denom).max() <= 1e-5

    def test_manifest_carries_config_and_variant(self, tmp_path):
        model = small_model()
        ckpt = Checkpoint.from_model(model)
        assert ckpt.manifest["model_config"]["trait"] == "A"
        assert ckpt.manifest["variant"] == "full"
        assert ckpt.trait == "A"
