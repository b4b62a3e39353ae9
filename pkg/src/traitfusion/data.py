"""Feature-record files, dataset validation, label handling, synthetic data,
and checkpoint persistence.

Dataset container: one JSON object per line with fields ``id``, ``labels``
(optional), ``meta``, and ``features.{name}.dim`` / ``features.{name}.b64``
holding base64-encoded little-endian float32 vectors. Human-inspectable and
stream-parsable; payloads stay compact.

Checkpoint container: a decimal length prefix line, a canonical-JSON manifest
(model/train config, format version, parameter index, blob hash), then the
raw little-endian float32 parameter blob.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ModelConfig, TRAITS, TraitFusionModel
from .tensor import RngState

__all__ = [
    "DatasetFormatError", "DataValidationError", "CheckpointError",
    "FeatureRecord", "load_dataset", "save_dataset",
    "validate_for_trait", "validate_dims", "batch_arrays",
    "LabelTransform", "normalize_labels",
    "SyntheticSpec", "generate_synthetic",
    "Checkpoint", "save_checkpoint", "load_checkpoint",
    "CHECKPOINT_VERSION",
]

logger = logging.getLogger("traitfusion.data")

CHECKPOINT_VERSION = 1

_TEXT_KEYS = tuple(f"text_{t}" for t in TRAITS)


class DatasetFormatError(ValueError):
    pass


class DataValidationError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class FeatureRecord:
    """One interview sample: per-modality feature vectors plus labels/meta."""

    id: str
    labels: dict[str, float] | None
    meta: dict
    features: dict[str, np.ndarray]  # float32 vectors

    def feature_dims(self) -> dict[str, int]:
        return {k: int(v.shape[0]) for k, v in self.features.items()}


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------


def _encode_vector(vec: np.ndarray) -> dict:
    v = np.asarray(vec, dtype="<f4").reshape(-1)
    return {"dim": int(v.shape[0]), "b64": base64.b64encode(v.tobytes()).decode("ascii")}


def _decode_vector(record_id: str, name: str, obj) -> np.ndarray:
    if not isinstance(obj, dict) or "dim" not in obj or "b64" not in obj:
        raise DatasetFormatError(
            f"record {record_id!r}: feature {name!r} must carry 'dim' and 'b64'")
    try:
        raw = base64.b64decode(obj["b64"], validate=True)
    except Exception as exc:
        raise DatasetFormatError(
            f"record {record_id!r}: feature {name!r} has invalid base64") from exc
    vec = np.frombuffer(raw, dtype="<f4")
    if vec.shape[0] != int(obj["dim"]):
        raise DatasetFormatError(
            f"record {record_id!r}: feature {name!r} declares dim {obj['dim']} "
            f"but payload has {vec.shape[0]} values")
    return vec


def _validate_labels(record_id: str, labels) -> dict[str, float] | None:
    if labels is None:
        return None
    if not isinstance(labels, dict):
        raise DatasetFormatError(f"record {record_id!r}: labels must be an object")
    out = {}
    for trait, value in labels.items():
        if trait not in TRAITS:
            raise DatasetFormatError(
                f"record {record_id!r}: unknown trait {trait!r} in labels")
        v = float(value)
        if not 1.0 <= v <= 5.0:
            raise DatasetFormatError(
                f"record {record_id!r}: label {trait}={v} outside [1, 5]")
        out[trait] = v
    return out


def record_to_json(record: FeatureRecord) -> str:
    obj = {"id": record.id, "meta": record.meta,
           "features": {k: _encode_vector(v) for k, v in sorted(record.features.items())}}
    if record.labels is not None:
        obj["labels"] = record.labels
    return json.dumps(obj, sort_keys=True)


def record_from_json(line: str, line_no: int) -> FeatureRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"line {line_no}: not valid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict) or "id" not in obj:
        raise DatasetFormatError(f"line {line_no}: record must be an object with an 'id'")
    rid = str(obj["id"])
    features = obj.get("features")
    if not isinstance(features, dict) or not features:
        raise DatasetFormatError(f"record {rid!r}: missing features")
    decoded = {name: _decode_vector(rid, name, spec) for name, spec in features.items()}
    labels = _validate_labels(rid, obj.get("labels"))
    meta = obj.get("meta") or {}
    return FeatureRecord(id=rid, labels=labels, meta=meta, features=decoded)


def load_dataset(path: Path | str) -> list[FeatureRecord]:
    """Parse and validate a dataset file; raises naming the offending line or
    record on any invariant violation. Dims must agree across the file."""
    path = Path(path)
    records: list[FeatureRecord] = []
    dims: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = record_from_json(line, line_no)
            for name, dim in rec.feature_dims().items():
                if name in dims and dims[name] != dim:
                    raise DatasetFormatError(
                        f"record {rec.id!r}: feature {name!r} dim {dim} conflicts "
                        f"with earlier records ({dims[name]})")
                dims.setdefault(name, dim)
            records.append(rec)

    if not records:
        logger.warning("dataset %s is empty", path)
        return records

    labeled = [r for r in records if r.labels]
    stats = {}
    for t in TRAITS:
        vals = [r.labels[t] for r in labeled if t in r.labels]
        if vals:
            stats[t] = f"n={len(vals)} mean={np.mean(vals):.3f} range=[{min(vals):.2f},{max(vals):.2f}]"
    logger.info("loaded %d records from %s; dims=%s; labels: %s",
                len(records), path, dims, stats or "none")
    return records


def save_dataset(records: Sequence[FeatureRecord], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(record_to_json(rec) + "\n")


# ---------------------------------------------------------------------------
# Trait-level validation and batching
# ---------------------------------------------------------------------------


def validate_for_trait(records: Sequence[FeatureRecord], trait: str,
                       require_labels: bool = True) -> None:
    """Check that every record carries the per-trait text feature, audio,
    video, and (by default) a label for the trait."""
    if trait not in TRAITS:
        raise DataValidationError(f"unknown trait {trait!r}")
    text_key = f"text_{trait}"
    for rec in records:
        for key in (text_key, "audio", "video"):
            if key not in rec.features:
                raise DataValidationError(
                    f"record {rec.id!r}: missing feature {key!r} needed for trait {trait}")
        if require_labels and (rec.labels is None or trait not in rec.labels):
            raise DataValidationError(
                f"record {rec.id!r}: missing label for trait {trait}")


def validate_dims(records: Sequence[FeatureRecord], cfg: ModelConfig) -> None:
    """Dataset dims must match the model's configured input dims."""
    if not records:
        return
    dims = records[0].feature_dims()
    expected = {
        f"text_{cfg.trait}": cfg.text.input_dim,
        "audio": cfg.audio.input_dim,
        "video": cfg.video.input_dim,
    }
    for key, want in expected.items():
        got = dims.get(key)
        if got != want:
            raise DataValidationError(
                f"feature {key!r} has dim {got} but the model config expects {want}")


def batch_arrays(records: Sequence[FeatureRecord], trait: str):
    """Stack (text, audio, video, labels) float64 arrays for one trait."""
    text_key = f"text_{trait}"
    text = np.stack([r.features[text_key] for r in records]).astype(np.float64)
    audio = np.stack([r.features["audio"] for r in records]).astype(np.float64)
    video = np.stack([r.features["video"] for r in records]).astype(np.float64)
    if all(r.labels is not None and trait in r.labels for r in records):
        labels = np.array([r.labels[trait] for r in records], dtype=np.float64)
    else:
        labels = None
    return text, audio, video, labels


# ---------------------------------------------------------------------------
# Label scaling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelTransform:
    """Label-scale mapping with its exact inverse; reported MSE always lives
    on the raw 1-5 scale regardless of training-time normalization."""

    mode: str  # "none" | "minmax"

    @classmethod
    def identity(cls) -> "LabelTransform":
        return cls("none")

    @classmethod
    def for_mode(cls, mode: str) -> "LabelTransform":
        if mode not in ("none", "minmax"):
            raise DataValidationError(f"unknown label transform {mode!r}")
        return cls(mode)

    def apply(self, y: np.ndarray) -> np.ndarray:
        if self.mode == "minmax":
            return (np.asarray(y, dtype=np.float64) - 1.0) / 4.0
        return np.asarray(y, dtype=np.float64)

    def invert(self, y: np.ndarray) -> np.ndarray:
        if self.mode == "minmax":
            return np.asarray(y, dtype=np.float64) * 4.0 + 1.0
        return np.asarray(y, dtype=np.float64)


def normalize_labels(records: Sequence[FeatureRecord], mode: str):
    """Return (records with transformed labels, transform). mode "none" is
    the identity; "minmax" maps [1,5] to [0,1]."""
    transform = LabelTransform.for_mode(mode)
    if mode == "none":
        return list(records), transform
    out = []
    for rec in records:
        labels = rec.labels
        if labels is not None:
            labels = {t: float(transform.apply(np.asarray(v))) for t, v in labels.items()}
        out.append(FeatureRecord(rec.id, labels, rec.meta, rec.features))
    return out, transform


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator spec: standard-normal features, labels from a planted teacher
    on the concatenated features, affinely mapped into [1, 5] plus noise."""

    n: int
    text_dim: int = 32
    audio_dim: int = 16
    video_dim: int = 16
    teacher: str = "linear"  # "linear" | "planted-gate"
    noise_std: float = 0.0
    seed: int = 0
    gate_sharpness: float = 2.0  # planted-gate only
    text_weight: float = 0.25    # planted-gate only

    def __post_init__(self):
        if self.n < 0:
            raise DataValidationError("n must be >= 0")
        if self.teacher not in ("linear", "planted-gate"):
            raise DataValidationError(f"unknown teacher {self.teacher!r}")
        if self.noise_std < 0:
            raise DataValidationError("noise_std must be >= 0")


_GENDERS = ("female", "male", "nonbinary")
_EDUCATION = ("high school", "bachelor", "master", "doctorate")


def _teacher_raw(spec: SyntheticSpec, trait: str, text: np.ndarray,
                 audio: np.ndarray, video: np.ndarray, rng: RngState) -> np.ndarray:
    """Raw (unscaled) teacher scores for one trait over the whole set."""
    tw = rng.normal((text.shape[1],)) / math.sqrt(text.shape[1])
    aw = rng.normal((audio.shape[1],)) / math.sqrt(audio.shape[1])
    vw = rng.normal((video.shape[1],)) / math.sqrt(video.shape[1])
    if spec.teacher == "linear":
        return text @ tw + audio @ aw + video @ vw
    gw = rng.normal((text.shape[1],)) / math.sqrt(text.shape[1])
    gate = 1.0 / (1.0 + np.exp(-spec.gate_sharpness * (text @ gw)))
    return gate * (audio @ aw) + (1.0 - gate) * (video @ vw) + spec.text_weight * (text @ tw)


def generate_synthetic(spec: SyntheticSpec) -> list[FeatureRecord]:
    """Pure function of its spec: same spec, same records, bit for bit."""
    rng = RngState(spec.seed).child("synthetic")
    feat_rng = rng.child("features")
    meta_rng = rng.child("meta")

    # draw at f32 precision so stored features reproduce the teacher exactly
    per_trait_text = {
        t: feat_rng.normal((spec.n, spec.text_dim)).astype(np.float32)
        for t in TRAITS
    }
    audio = feat_rng.normal((spec.n, spec.audio_dim)).astype(np.float32)
    video = feat_rng.normal((spec.n, spec.video_dim)).astype(np.float32)

    labels_per_trait: dict[str, np.ndarray] = {}
    for t in TRAITS:
        teacher_rng = rng.child("teacher", t)
        raw = _teacher_raw(spec, t, per_trait_text[t].astype(np.float64),
                           audio.astype(np.float64), video.astype(np.float64),
                           teacher_rng)
        if spec.n == 0:
            labels_per_trait[t] = raw
            continue
        lo, hi = 1.3, 4.7
        span = max(float(raw.max() - raw.min()), 1e-9)
        a = (hi - lo) / span
        b = lo - a * float(raw.min())
        y = a * raw + b
        if spec.noise_std > 0:
            y = y + teacher_rng.normal((spec.n,), std=spec.noise_std)
        labels_per_trait[t] = np.clip(y, 1.0, 5.0)

    records = []
    for i in range(spec.n):
        meta = {
            "gender": str(meta_rng.choice(_GENDERS)),
            "age": int(meta_rng.integers(20, 61)),
            "education": str(meta_rng.choice(_EDUCATION)),
            "work_experience": f"{int(meta_rng.integers(0, 31))} years",
        }
        features = {f"text_{t}": per_trait_text[t][i] for t in TRAITS}
        features["audio"] = audio[i]
        features["video"] = video[i]
        labels = {t: float(labels_per_trait[t][i]) for t in TRAITS}
        records.append(FeatureRecord(id=f"synth-{spec.seed}-{i:05d}", labels=labels,
                                     meta=meta, features=features))
    return records


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Manifest (configs + parameter index + blob hash) plus the f32 blob.

    load(save(model)) reproduces every parameter bitwise at 32-bit precision.
    """

    manifest: dict
    blob: bytes

    @classmethod
    def from_model(cls, model: TraitFusionModel, train_cfg=None,
                   extra: dict | None = None) -> "Checkpoint":
        index = []
        parts = []
        offset = 0
        for p in model.parameters():
            raw = np.asarray(p.value.array, dtype="<f4").tobytes()
            index.append({"name": p.name, "shape": list(p.shape), "offset": offset})
            parts.append(raw)
            offset += len(raw)
        blob = b"".join(parts)
        manifest = {
            "format_version": CHECKPOINT_VERSION,
            "model_config": model.cfg.to_dict(),
            "variant": model.variant,
            "train_config": train_cfg.to_dict() if train_cfg is not None else None,
            "params": index,
            "blob_sha256": hashlib.sha256(blob).hexdigest(),
            "extra": extra or {},
        }
        return cls(manifest=manifest, blob=blob)

    def save(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = json.dumps(self.manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(str(len(header)).encode("ascii") + b"\n")
            fh.write(header)
            fh.write(self.blob)
        os.replace(tmp, path)  # atomic publish

    @classmethod
    def load(cls, path: Path | str) -> "Checkpoint":
        path = Path(path)
        payload = path.read_bytes()
        newline = payload.find(b"\n")
        if newline < 0:
            raise CheckpointError(f"{path}: missing manifest length prefix")
        try:
            header_len = int(payload[:newline])
        except ValueError as exc:
            raise CheckpointError(f"{path}: bad manifest length prefix") from exc
        start = newline + 1
        if len(payload) < start + header_len:
            raise CheckpointError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(payload[start:start + header_len].decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: manifest is not valid JSON") from exc
        version = manifest.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: format version {version!r} unsupported (expected {CHECKPOINT_VERSION})")
        blob = payload[start + header_len:]
        expected = sum(
            4 * int(np.prod(e["shape"], dtype=np.int64)) if e["shape"] else 4
            for e in manifest["params"]
        )
        if len(blob) != expected:
            raise CheckpointError(
                f"{path}: truncated blob ({len(blob)} bytes, expected {expected})")
        digest = hashlib.sha256(blob).hexdigest()
        if digest != manifest.get("blob_sha256"):
            raise CheckpointError(f"{path}: blob hash mismatch (file corrupted?)")
        return cls(manifest=manifest, blob=blob)

    def param_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for entry in self.manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            off = entry["offset"]
            vec = np.frombuffer(self.blob, dtype="<f4", count=count, offset=off)
            out[entry["name"]] = vec.astype(np.float64).reshape(shape)
        return out

    def restore_model(self) -> TraitFusionModel:
        cfg = ModelConfig.from_dict(self.manifest["model_config"])
        model = TraitFusionModel(cfg, RngState(0), variant=self.manifest["variant"])
        model.load_param_arrays(self.param_arrays())
        return model

    @property
    def trait(self) -> str:
        return self.manifest["model_config"]["trait"]

    def label_transform(self) -> LabelTransform:
        mode = self.manifest.get("extra", {}).get("label_transform", "none")
        return LabelTransform.for_mode(mode)


def save_checkpoint(model: TraitFusionModel, path: Path | str, train_cfg=None,
                    extra: dict | None = None) -> Checkpoint:
    ckpt = Checkpoint.from_model(model, train_cfg=train_cfg, extra=extra)
    ckpt.save(path)
    return ckpt


def load_checkpoint(path: Path | str) -> TraitFusionModel:
    return Checkpoint.load(path).restore_model()
