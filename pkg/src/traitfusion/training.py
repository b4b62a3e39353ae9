"""Optimization pipeline: Adam, EMA shadow weights, K-fold ensembling,
grid search, stability studies, and MSE metric aggregation.

Everything is bit-deterministic under a fixed seed when run sequentially;
folds and grid cells own independent rng streams derived from
(seed, fold id), so parallel fold execution cannot change results.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data as data_io
from . import ops
from .model import ModelConfig, TraitFusionModel
from .tensor import ParamTensor, RngState, Tensor, no_grad

__all__ = [
    "TrainConfig", "TrainingDiverged", "AdamState", "adam_step", "Adam",
    "EmaState", "kfold_split", "EpochRecord", "MetricsReport",
    "train_trait", "grid_search", "DEFAULT_GRID", "aggregate_mse", "fmt4",
    "stability_study", "compare_head_stability", "evaluate_mse", "ensemble_predict",
]


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 200
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    ema_decay: float = 0.999
    k_folds: int = 5
    seed: int = 0
    # per-module dropout overrides applied to the model config; None keeps it
    dropout_cwp: float | None = 0.2
    dropout_cmc: float | None = 0.3
    dropout_tfe: float | None = 0.1
    normalize_labels: bool = False
    jobs: int = 1
    split_seed: int | None = None  # fixed split for stability studies

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1], got {self.ema_decay}")
        if self.k_folds < 1:
            raise ValueError("k_folds must be >= 1 (1 disables fold ensembling)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "batch_size": self.batch_size, "epochs": self.epochs,
            "betas": list(self.betas), "adam_eps": self.adam_eps,
            "ema_decay": self.ema_decay, "k_folds": self.k_folds, "seed": self.seed,
            "dropout_cwp": self.dropout_cwp, "dropout_cmc": self.dropout_cmc,
            "dropout_tfe": self.dropout_tfe, "normalize_labels": self.normalize_labels,
            "jobs": self.jobs, "split_seed": self.split_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[ParamTensor]) -> "AdamState":
        return cls(
            m={p.name: np.zeros(p.shape) for p in params},
            v={p.name: np.zeros(p.shape) for p in params},
        )


def adam_step(
    params: Sequence[ParamTensor],
    grads: dict[str, np.ndarray] | None,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    t: int | None = None,
) -> AdamState:
    """One bias-corrected Adam update, in place on the params.

    grads=None consumes each parameter's own accumulated gradient.
    """
    if t is None:
        t = state.t + 1
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    b1, b2 = betas
    for p in params:
        g = grads[p.name] if grads is not None else p.value.grad
        if g is None:
            raise ValueError(f"no gradient for parameter {p.name!r}")
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} ({p.name})")
        m = state.m[p.name]
        v = state.v[p.name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.value.array[...] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    state.t = t
    return state


class Adam:
    """Stateful wrapper around adam_step for training loops."""

    def __init__(self, params: Sequence[ParamTensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState.for_params(self.params)

    def step(self) -> None:
        adam_step(self.params, None, self.state, self.lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# EMA shadow weights
# ---------------------------------------------------------------------------


class EmaState:
    """Exponential moving average of parameter values.

    shadow <- decay * shadow + (1 - decay) * params, elementwise per update.
    """

    def __init__(self, shadow: dict[str, np.ndarray], decay: float):
        if not 0.0 <= decay <= 1.0:
            raise ValueError(f"ema decay must lie in [0, 1], got {decay}")
        self.shadow = {k: np.array(v, dtype=np.float64) for k, v in shadow.items()}
        self.decay = decay

    @classmethod
    def from_params(cls, params: Sequence[ParamTensor], decay: float) -> "EmaState":
        return cls({p.name: np.array(p.value.array) for p in params}, decay)

    @classmethod
    def zeros_like(cls, params: Sequence[ParamTensor], decay: float) -> "EmaState":
        return cls({p.name: np.zeros(p.shape) for p in params}, decay)

    def update(self, params: Sequence[ParamTensor]) -> "EmaState":
        d = self.decay
        for p in params:
            s = self.shadow[p.name]
            if s.shape != p.shape:
                raise ValueError(f"shadow shape {s.shape} != param shape {p.shape} ({p.name})")
            s[...] = d * s + (1.0 - d) * p.value.array
        return self

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: np.array(v) for k, v in self.shadow.items()}

    @contextmanager
    def swapped(self, params: Sequence[ParamTensor]):
        """Run a block with shadow weights loaded; live weights are restored after."""
        stash = {p.name: np.array(p.value.array) for p in params}
        for p in params:
            p.value.array[...] = self.shadow[p.name]
        try:
            yield
        finally:
            for p in params:
                p.value.array[...] = stash[p.name]


# ---------------------------------------------------------------------------
# K-fold splitting
# ---------------------------------------------------------------------------


def kfold_split(n: int, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded K-fold partition of [0, n): disjoint validation sets covering
    every index, sizes differing by at most one."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if n < k:
        raise ValueError(f"cannot split n={n} samples into k={k} folds")
    perm = RngState(seed).child("kfold").permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i in range(k):
        val = np.sort(folds[i])
        train = np.sort(np.concatenate([folds[j] for j in range(k) if j != i]))
        out.append((train, val))
    return out


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    fold: int
    epoch: int
    train_loss: float
    val_mse_live: float
    val_mse_ema: float

    def to_dict(self) -> dict:
        return {"fold": self.fold, "epoch": self.epoch, "train_loss": self.train_loss,
                "val_mse_live": self.val_mse_live, "val_mse_ema": self.val_mse_ema}


@dataclass
class MetricsReport:
    trait: str
    variant: str
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: dict[int, int] = field(default_factory=dict)
    fold_val_mse: dict[int, float] = field(default_factory=dict)
    final_mse: float = math.nan
    final_train_mse: float = math.nan
    param_count: int = 0

    def summary(self) -> dict:
        return {
            "trait": self.trait,
            "variant": self.variant,
            "best_epoch": {str(k): v for k, v in sorted(self.best_epoch.items())},
            "fold_val_mse": {str(k): v for k, v in sorted(self.fold_val_mse.items())},
            "final_mse": self.final_mse,
            "final_train_mse": self.final_train_mse,
            "param_count": self.param_count,
        }

    def save(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
        with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def fmt4(x: float) -> str:
    """Four-decimal formatting used by every report table."""
    return f"{x:.4f}"


def aggregate_mse(per_trait: dict[str, float]) -> float:
    """Arithmetic mean over the four traits; summaries print it to 4 decimals."""
    missing = [t for t in ("H", "E", "A", "C") if t not in per_trait]
    if missing:
        raise ValueError(f"aggregate_mse needs all four traits, missing {missing}")
    return float(np.mean([per_trait[t] for t in ("H", "E", "A", "C")]))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _eval_mse(model: TraitFusionModel, text, audio, video, labels_raw,
              transform: "data_io.LabelTransform") -> float:
    """Eval-mode MSE on the raw 1-5 label scale (dropout off, no graph)."""
    with no_grad():
        preds = model.forward(Tensor(text), Tensor(audio), Tensor(video)).to_numpy()
    preds = transform.invert(preds)
    return float(np.mean((preds - labels_raw) ** 2))


def evaluate_mse(model: TraitFusionModel, records, transform=None) -> float:
    """MSE of a trained model on labeled records, raw label scale."""
    transform = transform or data_io.LabelTransform.identity()
    text, audio, video, labels = data_io.batch_arrays(records, model.cfg.trait)
    return _eval_mse(model, text, audio, video, labels, transform)


def ensemble_predict(models: Sequence[TraitFusionModel], records,
                     transforms: Sequence["data_io.LabelTransform"] | None = None) -> np.ndarray:
    """Fold-ensemble prediction: mean of the fold models' raw-scale predictions."""
    if not models:
        raise ValueError("ensemble_predict needs at least one model")
    trait = models[0].cfg.trait
    if any(m.cfg.trait != trait for m in models):
        raise ValueError("all fold models must share one trait")
    if transforms is None:
        transforms = [data_io.LabelTransform.identity()] * len(models)
    text, audio, video, _ = data_io.batch_arrays(records, trait)
    preds = [tr.invert(m.predict(text, audio, video)) for m, tr in zip(models, transforms)]
    return np.mean(preds, axis=0)


@dataclass
class _FoldResult:
    fold_id: int
    epoch_records: list[EpochRecord]
    best_arrays: dict[str, np.ndarray]
    best_epoch: int
    best_val: float
    final_train: float


def _train_single_fold(
    fold_id: int,
    dataset,
    train_idx: np.ndarray,
    val_idx: np.ndarray,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    variant: str,
    log_fn: Callable[[str], None] | None = None,
) -> _FoldResult:
    """Train one fold; the rng streams depend only on (seed, fold id), so
    folds may run in any order or in parallel without changing results."""
    trait = model_cfg.trait
    master = RngState(cfg.seed)
    fold_rng = master.child("fold", fold_id)

    train_records = [dataset[i] for i in train_idx]
    val_records = [dataset[i] for i in val_idx]
    text, audio, video, labels_raw = data_io.batch_arrays(train_records, trait)
    v_text, v_audio, v_video, v_labels_raw = data_io.batch_arrays(val_records, trait)

    transform = data_io.LabelTransform.for_mode(
        "minmax" if cfg.normalize_labels else "none")
    labels = transform.apply(labels_raw)

    model = TraitFusionModel(model_cfg, fold_rng.child("init"), variant=variant)
    optimizer = Adam(model.parameters(), cfg.lr, cfg.betas, cfg.adam_eps)
    ema = EmaState.from_params(model.parameters(), cfg.ema_decay)
    shuffle_rng = fold_rng.child("shuffle")
    dropout_rng = fold_rng.child("dropout")

    n = len(train_records)
    epoch_records: list[EpochRecord] = []
    best_epoch, best_val, best_arrays = -1, math.inf, None
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        total_loss, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            bt = Tensor(text[idx])
            ba = Tensor(audio[idx])
            bv = Tensor(video[idx])
            by = Tensor(labels[idx])
            preds = model.forward(bt, ba, bv, rng=dropout_rng, training=True)
            loss = ops.mse_loss(preds, by)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                ids = ", ".join(train_records[i].id for i in idx[:8])
                raise TrainingDiverged(
                    f"non-finite loss at trait {trait} fold {fold_id} epoch {epoch} "
                    f"batch starting {start} (records: {ids})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            ema.update(model.parameters())
            total_loss += loss_val * len(idx)
            seen += len(idx)

        train_loss = total_loss / seen
        val_live = _eval_mse(model, v_text, v_audio, v_video, v_labels_raw, transform)
        with ema.swapped(model.parameters()):
            val_ema = _eval_mse(model, v_text, v_audio, v_video, v_labels_raw, transform)
        epoch_records.append(EpochRecord(fold_id, epoch, train_loss, val_live, val_ema))
        if val_ema < best_val:
            best_val, best_epoch = val_ema, epoch
            best_arrays = ema.arrays()
        if log_fn is not None and (epoch + 1) % max(1, cfg.epochs // 10) == 0:
            log_fn(f"[{trait}/fold{fold_id}] epoch {epoch + 1}/{cfg.epochs} "
                   f"train {train_loss:.4f} val(ema) {val_ema:.4f}")

    final_train = _eval_mse(model, text, audio, video, labels_raw, transform)
    return _FoldResult(fold_id, epoch_records, best_arrays, best_epoch, best_val, final_train)


def train_trait(
    dataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    variant: str = "full",
    out_dir: Path | str | None = None,
    log_fn: Callable[[str], None] | None = None,
):
    """K-fold training of one trait regressor.

    Returns (checkpoints, report): one checkpoint per fold holding the
    best-validation-epoch EMA weights. Fold-ensemble prediction at eval time
    is the mean of the fold models' predictions.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    data_io.validate_for_trait(dataset, model_cfg.trait)
    data_io.validate_dims(dataset, model_cfg)

    split_seed = cfg.split_seed if cfg.split_seed is not None else cfg.seed
    if cfg.k_folds == 1:
        all_idx = np.arange(len(dataset))
        splits = [(all_idx, all_idx)]  # no held-out fold: validate on train
    else:
        splits = kfold_split(len(dataset), cfg.k_folds, split_seed)

    if cfg.jobs > 1 and len(splits) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=min(cfg.jobs, len(splits))) as pool:
            futures = [
                pool.submit(_train_single_fold, fold_id, dataset, train_idx, val_idx,
                            model_cfg, cfg, variant)
                for fold_id, (train_idx, val_idx) in enumerate(splits)
            ]
            results = [f.result() for f in futures]
    else:
        results = [
            _train_single_fold(fold_id, dataset, train_idx, val_idx, model_cfg, cfg,
                               variant, log_fn)
            for fold_id, (train_idx, val_idx) in enumerate(splits)
        ]

    report = MetricsReport(trait=model_cfg.trait, variant=variant)
    checkpoints = []
    fold_train_mse = []
    for res in results:  # fold order, regardless of completion order
        report.epochs.extend(res.epoch_records)
        fold_train_mse.append(res.final_train)
        model = TraitFusionModel(model_cfg, RngState(cfg.seed).child("fold", res.fold_id).child("init"),
                                 variant=variant)
        model.load_param_arrays(res.best_arrays)
        report.best_epoch[res.fold_id] = res.best_epoch
        report.fold_val_mse[res.fold_id] = res.best_val
        report.param_count = model.parameter_count()
        checkpoints.append(data_io.Checkpoint.from_model(
            model, train_cfg=cfg,
            extra={"fold": res.fold_id, "best_epoch": res.best_epoch, "val_mse": res.best_val,
                   "label_transform": "minmax" if cfg.normalize_labels else "none"}))

    report.final_mse = float(np.mean(list(report.fold_val_mse.values())))
    report.final_train_mse = float(np.mean(fold_train_mse))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for fold_id, ckpt in enumerate(checkpoints):
            ckpt.save(out_dir / f"fold{fold_id}.ckpt")
        report.save(out_dir)
    return checkpoints, report


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------


DEFAULT_GRID = {
    "lr": [1e-4, 3e-4],
    "dropout_cwp": [0.1, 0.2],
    "dropout_cmc": [0.2, 0.3],
}

_MODEL_GRID_KEYS = {"ensemble_size"}


def grid_search(
    dataset,
    model_cfg: ModelConfig,
    grid: dict[str, list],
    cfg: TrainConfig,
    out_path: Path | str | None = None,
    log_fn: Callable[[str], None] | None = None,
) -> list[dict]:
    """Exhaustive sweep over the grid's cross product, each cell scored by
    mean K-fold validation MSE; returns rows ranked ascending by that score."""
    if not grid:
        raise ValueError("grid must be non-empty")
    train_fields = set(TrainConfig.__dataclass_fields__)
    for key in grid:
        if key not in train_fields and key not in _MODEL_GRID_KEYS:
            raise ValueError(f"unknown grid key {key!r}")

    keys = list(grid)
    rows = []
    for cell_id, values in enumerate(product(*(grid[k] for k in keys))):
        assignment = dict(zip(keys, values))
        cell_train = {k: v for k, v in assignment.items() if k in train_fields}
        cell_cfg = replace(cfg, **cell_train)
        cell_model_cfg = model_cfg
        if "ensemble_size" in assignment:
            cell_model_cfg = replace(model_cfg, ensemble_size=assignment["ensemble_size"])
        _, report = train_trait(dataset, cell_model_cfg, cell_cfg)
        rows.append({
            "cell": cell_id,
            "params": assignment,
            "fold_val_mse": {str(k): v for k, v in sorted(report.fold_val_mse.items())},
            "mean_val_mse": report.final_mse,
        })
        if log_fn is not None:
            log_fn(f"grid cell {cell_id}: {assignment} -> {fmt4(report.final_mse)}")

    rows.sort(key=lambda r: (r["mean_val_mse"], r["cell"]))
    for rank, row in enumerate(rows):
        row["rank"] = rank
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return rows


# ---------------------------------------------------------------------------
# Stability study
# ---------------------------------------------------------------------------


def stability_study(
    dataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    n_runs: int,
    variant: str = "full",
    seeds: Sequence[int] | None = None,
) -> dict:
    """Final validation MSE across n_runs reseeded trainings on a fixed split.

    Reports mean and sample standard deviation (4-decimal strings included);
    used to compare the ensemble head against the single-head variant.
    """
    if n_runs < 2:
        raise ValueError("stability_study needs n_runs >= 2")
    if seeds is None:
        seeds = [cfg.seed + i for i in range(n_runs)]
    if len(seeds) != n_runs:
        raise ValueError(f"got {len(seeds)} seeds for {n_runs} runs")
    split_seed = cfg.split_seed if cfg.split_seed is not None else cfg.seed
    values = []
    for s in seeds:
        run_cfg = replace(cfg, seed=s, split_seed=split_seed)
        _, report = train_trait(dataset, model_cfg, run_cfg, variant=variant)
        values.append(report.final_mse)
    arr = np.asarray(values)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1))
    return {
        "variant": variant,
        "values": values,
        "mean": mean,
        "std": std,
        "mean_4dp": fmt4(mean),
        "std_4dp": fmt4(std),
    }


def compare_head_stability(dataset, model_cfg: ModelConfig, cfg: TrainConfig,
                           n_runs: int = 5) -> dict:
    """Run the stability study for the full ensemble head and the single-head
    ablation under identical seeds/splits."""
    return {
        "ensemble": stability_study(dataset, model_cfg, cfg, n_runs, variant="full"),
        "single_head": stability_study(dataset, model_cfg, cfg, n_runs, variant="single-head"),
    }
