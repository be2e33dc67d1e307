"""Two-stage training: new layers first, then the whole network end to end."""
from __future__ import annotations

import csv
import enum
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .architecture import ModelParams, ModelVariant, Scale, build, forward, freeze_mask
from .dataset import AGE_MAX, AnnotationRecord, ImageSample, Observer, Split, encode_attributes
from .optim import AdamState, adam_step

MIN_DELTA = 1e-6  # normalised units

log = logging.getLogger(__name__)


class Monitor(enum.Enum):
    APPARENT_MAE = "apparent_mae"
    REAL_LOSS = "real_loss"
    DUAL_LOSS = "dual_loss"


class TargetLabel(enum.Enum):
    APPARENT = "apparent"
    REAL = "real"
    DUAL = "dual"


class TrainingError(RuntimeError):
    pass


def default_lr(variant: ModelVariant | str) -> float:
    return 1e-6 if ModelVariant(variant) is ModelVariant.CASE1 else 1e-4


@dataclass
class TrainConfig:
    lr_stage1: float = 1e-4
    lr_stage2: float | None = None  # None: same as stage 1
    max_epochs_stage1: int = 3000
    max_epochs_stage2: int = 1500
    patience: int = 50
    batch_size: int = 32
    loss_weights: tuple[float, float] = (1.0, 1.0)
    monitor: Monitor | None = None  # None: chosen from the target label
    seed: int = 0
    init_seed: int | None = None  # None: same as seed
    target_label: TargetLabel = TargetLabel.APPARENT
    eval_batch_size: int = 256

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.target_label = TargetLabel(self.target_label)
        if self.monitor is not None:
            self.monitor = Monitor(self.monitor)
        self.validate()

    def validate(self) -> None:
        if self.lr_stage1 <= 0 or (self.lr_stage2 is not None and self.lr_stage2 <= 0):
            raise ValueError("learning rates must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.max_epochs_stage1 < 0 or self.max_epochs_stage2 < 0:
            raise ValueError("max epochs must be >= 0")
        w_a, w_r = self.loss_weights
        if w_a < 0 or w_r < 0 or (w_a == 0 and w_r == 0):
            raise ValueError("loss weights must be >= 0 and not both zero")

    def lr(self, stage: int) -> float:
        return self.lr_stage1 if stage == 1 or self.lr_stage2 is None else self.lr_stage2

    def max_epochs(self, stage: int) -> int:
        return self.max_epochs_stage1 if stage == 1 else self.max_epochs_stage2

    def resolved_monitor(self) -> Monitor:
        if self.monitor is not None:
            return self.monitor
        return Monitor.APPARENT_MAE if self.target_label is TargetLabel.APPARENT else Monitor.REAL_LOSS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_label"] = self.target_label.value
        d["monitor"] = None if self.monitor is None else self.monitor.value
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def config_for(variant: ModelVariant | str, **overrides) -> TrainConfig:
    """A config with the per-variant defaults (learning rate, target label)."""
    variant = ModelVariant(variant)
    base = {"lr_stage1": default_lr(variant),
            "target_label": TargetLabel.DUAL if variant.dual_head else TargetLabel.APPARENT}
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------- arrays


@dataclass
class ArrayData:
    """Stacked model inputs and normalised targets for a list of samples.

    Observer-conditioned variants see every sample twice, once per
    observer gender, with that observer's apparent label.
    """

    images: np.ndarray
    attrs: np.ndarray | None
    y_apparent: np.ndarray
    y_real: np.ndarray
    records: list[AnnotationRecord]
    observers: list[Observer | None]

    def __len__(self) -> int:
        return len(self.images)


def apparent_label(record: AnnotationRecord, observer: Observer | None) -> float:
    if observer is None:
        return record.apparent_mean
    if record.apparent_by_observer is None:
        raise TrainingError(f"{record.image_id}: no per-observer apparent labels")
    return record.apparent_by_observer[observer]


def make_arrays(samples: Sequence[ImageSample], variant: ModelVariant, observers=None) -> ArrayData:
    if not samples:
        raise TrainingError("empty dataset")
    variant = ModelVariant(variant)
    if variant is ModelVariant.CASE3_OBSERVER:
        obs_list = list(Observer) if observers is None else list(observers)
    else:
        obs_list = [None]
    imgs, attrs, ya, yr, recs, obs_out = [], [], [], [], [], []
    for s in samples:
        for o in obs_list:
            imgs.append(s.pixels)
            if variant.uses_attributes:
                attrs.append(encode_attributes(s.record, o))
            ya.append(apparent_label(s.record, o) / AGE_MAX)
            yr.append(s.record.real_age / AGE_MAX)
            recs.append(s.record)
            obs_out.append(o)
    return ArrayData(np.stack(imgs), np.stack(attrs) if attrs else None,
                     np.array(ya), np.array(yr), recs, obs_out)


# ------------------------------------------------------------------ loss


def _loss_from_targets(out, y_app, y_real, variant: ModelVariant, config: TrainConfig) -> T.Tensor:
    if variant.dual_head:
        if config.target_label is not TargetLabel.DUAL:
            raise TrainingError("dual-head variants train on both labels (target_label='dual')")
        w_a, w_r = config.loss_weights
        terms = []
        if w_a:
            terms.append(T.scale(T.mse(out.apparent, y_app.reshape(out.apparent.shape)), w_a))
        if w_r:
            terms.append(T.scale(T.mse(out.real, y_real.reshape(out.real.shape)), w_r))
        return terms[0] if len(terms) == 1 else T.add(*terms)
    if config.target_label is TargetLabel.DUAL:
        raise TrainingError("single-head variants need target_label 'apparent' or 'real'")
    y = y_app if config.target_label is TargetLabel.APPARENT else y_real
    return T.mse(out.apparent, y.reshape(out.apparent.shape))


def compute_loss(output, records, config: TrainConfig, variant: ModelVariant | str | None = None,
                 observer: Observer | None = None) -> T.Tensor:
    """Weighted MSE between the head outputs and the normalised labels of ``records``."""
    if isinstance(records, AnnotationRecord):
        records = [records]
    if variant is None:
        variant = ModelVariant.CASE3 if output.real is not None else ModelVariant.CASE2
    variant = ModelVariant(variant)
    y_app = np.array([apparent_label(r, observer) for r in records]) / AGE_MAX
    y_real = np.array([r.real_age for r in records]) / AGE_MAX
    return _loss_from_targets(output, y_app, y_real, variant, config)


# ------------------------------------------------------------ prediction


def _thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("PERCEPT_AGE_THREADS", "1")))
    except ValueError:
        return 1


def predict_normalized(params: ModelParams, data: ArrayData, batch_size: int = 256):
    """Normalised head outputs ``(apparent [N], real [N] | None)``, in sample order."""
    starts = list(range(0, len(data), batch_size))

    def run(s):
        with T.no_grad():
            out = forward(params, data.images[s : s + batch_size],
                          None if data.attrs is None else data.attrs[s : s + batch_size])
        return out.apparent.data.reshape(-1), None if out.real is None else out.real.data.reshape(-1)

    workers = min(_thread_cap(), len(starts))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    app = np.concatenate([p[0] for p in parts])
    real = None if parts[0][1] is None else np.concatenate([p[1] for p in parts])
    return app, real


# -------------------------------------------------------------- training


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without an improvement of at least ``min_delta``."""

    def __init__(self, patience: int, min_delta: float = MIN_DELTA):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.best_epoch = 0
        self.epoch = 0
        self.stale = 0

    def improved(self, value: float) -> bool:
        return value < self.best - self.min_delta

    def update(self, value: float) -> bool:
        self.epoch += 1
        if self.improved(value):
            self.best, self.best_epoch, self.stale = value, self.epoch, 0
        else:
            self.stale += 1
        return self.stale >= self.patience


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    train_loss: float
    val_loss: float
    val_loss_apparent: float
    val_loss_real: float | None
    val_mae_apparent: float
    val_mae_real: float | None
    monitored: float
    wall_time: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    stopped_early: dict[int, bool] = field(default_factory=dict)

    def stage(self, stage: int) -> list[EpochRecord]:
        return [r for r in self.records if r.stage == stage]

    def extend(self, other: "TrainLog") -> None:
        self.records.extend(other.records)
        self.stopped_early.update(other.stopped_early)

    def to_csv(self, path) -> None:
        names = [f.name for f in fields(EpochRecord)]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for r in self.records:
                w.writerow(["" if getattr(r, n) is None else repr(getattr(r, n)) for n in names])


@dataclass
class Checkpoint:
    params: ModelParams
    stage: int
    epoch: int
    val_mae: float  # years, on the selection head

    def metadata(self) -> dict:
        return {"stage": self.stage, "epoch": self.epoch, "val_mae": self.val_mae}


@dataclass
class ValidationResult:
    loss: float
    loss_apparent: float
    loss_real: float | None
    mae_apparent: float  # years, apparent head vs the apparent (or single-head target) label
    mae_real: float | None  # years, real head vs real label
    selection_mae: float


def selection_head(variant: ModelVariant, config: TrainConfig) -> str:
    """Which head's validation MAE picks the best checkpoint."""
    if variant.dual_head:
        return "apparent" if config.resolved_monitor() is Monitor.APPARENT_MAE else "real"
    return "apparent"


def validate(params: ModelParams, data: ArrayData, config: TrainConfig) -> ValidationResult:
    variant = params.variant
    app, real = predict_normalized(params, data, config.eval_batch_size)
    if variant.dual_head:
        y_a, y_r = data.y_apparent, data.y_real
    else:
        y_a = data.y_apparent if config.target_label is TargetLabel.APPARENT else data.y_real
        y_r = None
    loss_a = float(np.mean((app - y_a) ** 2))
    mae_a = float(np.mean(np.abs(app - y_a))) * AGE_MAX
    loss_r = mae_r = None
    if real is not None:
        loss_r = float(np.mean((real - y_r) ** 2))
        mae_r = float(np.mean(np.abs(real - y_r))) * AGE_MAX
        w_a, w_r = config.loss_weights
        loss = w_a * loss_a + w_r * loss_r
    else:
        loss = loss_a
    sel = mae_r if selection_head(variant, config) == "real" else mae_a
    return ValidationResult(loss, loss_a, loss_r, mae_a, mae_r, sel)


def _monitored(v: ValidationResult, monitor: Monitor) -> float:
    if monitor is Monitor.APPARENT_MAE:
        return v.mae_apparent / AGE_MAX
    if monitor is Monitor.REAL_LOSS:
        return v.loss_real if v.loss_real is not None else v.loss_apparent
    return v.loss


def _as_arrays(data, variant) -> ArrayData:
    return data if isinstance(data, ArrayData) else make_arrays(data, variant)


def train_stage(params: ModelParams, stage: int, data_train, data_val, config: TrainConfig):
    """Run one training stage; returns ``(final params, TrainLog, best Checkpoint)``.

    ``params`` is not modified.  Parameters outside the stage's freeze mask
    receive no gradient and stay bitwise identical.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    variant = params.variant
    train = _as_arrays(data_train, variant)
    val = _as_arrays(data_val, variant)
    if len(train) == 0 or len(val) == 0:
        raise TrainingError("empty dataset")

    params = params.copy()
    trainable = freeze_mask(params.spec, stage)
    for name, t in params.tensors.items():
        t.requires_grad = name in trainable
    state = AdamState(lr=config.lr(stage))
    rng = np.random.default_rng([config.seed, stage])
    monitor = config.resolved_monitor()
    stopper = EarlyStopping(config.patience)
    tlog = TrainLog()

    best = Checkpoint(params.copy(), stage, 0, validate(params, val, config).selection_mae)
    best_norm = best.val_mae / AGE_MAX
    n = len(train)
    bs = config.batch_size
    stopped = False
    for epoch in range(1, config.max_epochs(stage) + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        try:
            for s in range(0, n, bs):
                idx = order[s : s + bs]
                T.reset_tape()
                out = forward(params, train.images[idx], None if train.attrs is None else train.attrs[idx])
                loss = _loss_from_targets(out, train.y_apparent[idx], train.y_real[idx], variant, config)
                T.backward(loss)
                grads = {}
                for name in trainable:
                    t = params.tensors[name]
                    grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
                    t.grad = None
                adam_step(params.tensors, grads, state)
                total += loss.item() * len(idx)
            v = validate(params, val, config)
        except T.NonFiniteError as exc:
            T.reset_tape()
            raise TrainingError(f"stage {stage}, epoch {epoch}: training diverged ({exc})") from exc
        if not np.isfinite(total):
            raise TrainingError(f"stage {stage}, epoch {epoch}: training loss is not finite")
        mon = _monitored(v, monitor)
        log.info("stage %d epoch %d: train loss %.6f, val loss %.6f, val MAE app %.3f real %s",
                 stage, epoch, total / n, v.loss, v.mae_apparent,
                 "-" if v.mae_real is None else f"{v.mae_real:.3f}")
        tlog.records.append(EpochRecord(stage, epoch, total / n, v.loss, v.loss_apparent, v.loss_real,
                                       v.mae_apparent, v.mae_real, mon, time.perf_counter() - t0))
        if v.selection_mae / AGE_MAX < best_norm - MIN_DELTA:
            best = Checkpoint(params.copy(), stage, epoch, v.selection_mae)
            best_norm = v.selection_mae / AGE_MAX
        if stopper.update(mon):
            stopped = True
            break
    tlog.stopped_early[stage] = stopped
    for t in params.tensors.values():
        t.requires_grad = False
    return params, tlog, best


def run_case(variant: ModelVariant | str, dataset, config: TrainConfig, scale: Scale | str = Scale.DESK,
             stacked_attribute_encoder: bool = False):
    """Build, train stage 1, continue stage 2 from the stage-1 best checkpoint.

    ``dataset`` is a list of samples carrying split tags, or a mapping
    ``{Split: samples}``.  Returns ``(best Checkpoint, TrainLog)``.
    """
    variant = ModelVariant(variant)
    if isinstance(dataset, dict):
        splits = dataset
    else:
        splits = {s: [x for x in dataset if x.record.split is s] for s in Split}
    if not splits.get(Split.TRAIN) or not splits.get(Split.VALIDATION):
        raise TrainingError("dataset needs non-empty train and validation splits")
    init_seed = config.seed if config.init_seed is None else config.init_seed
    _, params = build(variant, scale, init_seed, stacked_attribute_encoder)
    train = make_arrays(splits[Split.TRAIN], variant)
    val = make_arrays(splits[Split.VALIDATION], variant)
    tlog = TrainLog()
    _, log1, best1 = train_stage(params, 1, train, val, config)
    tlog.extend(log1)
    _, log2, best2 = train_stage(best1.params, 2, train, val, config)
    tlog.extend(log2)
    # stage 2 starts from best1; its epoch-0 snapshot is best1 itself, so best2 is never worse
    return best2, tlog
