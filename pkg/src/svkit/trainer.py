"""Training loop: schedules, validation, logging, checkpoint/resume.

Determinism contract: every random choice is drawn from a generator
seeded by an explicit integer lineage (seed, stream tag, epoch), so a
run can be reproduced bit-for-bit from its config and a resumed run
continues exactly where the checkpoint left off. Stream tags: 31 for
batch shuffling/cropping, 37 for resampled noise targets.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .corpus import MIN_CROP, NoiseTargetSource, make_batches
from .diffcore import AdamState, adam_step, softmax_cross_entropy
from .errors import NumericError
from .model import (
    aux_mse_loss,
    aux_predictions,
    aux_target_dims,
    forward,
    gtm_regularizer,
    load_checkpoint,
    save_checkpoint,
    total_loss,
)

VARIANTS = ("baseline", "gtm", "gncn")

_BATCH_STREAM = 31
_NOISE_STREAM = 37


@dataclass
class TrainConfig:
    """Hyperparameters for one training run.

    variant selects the objective: plain cross-entropy ("baseline"),
    cross-entropy plus the Gaussian-center regularizer at fixed weight
    gtm_alpha ("gtm"), or cross-entropy plus the noise-target regression
    branches at a decaying task weight ("gncn").
    """

    variant: str = "baseline"
    epochs: int = 20
    batch_size: int = 128
    crop_range: tuple = (200, 400)
    lr_initial: float = 0.001
    lr_final: float = 0.0001
    weight_decay: float = 1e-4
    gtm_alpha: float = 0.05
    gtm_squared: bool = True
    task_weight_initial: float = 0.1
    task_weight_factor: float = 0.5
    task_weight_floor: float = 1e-3
    patience: int = 1
    aux_squared: bool = True
    seed: int = 0
    validation_cap: int = 400

    def __post_init__(self):
        self.crop_range = (int(self.crop_range[0]), int(self.crop_range[1]))
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got "
                             f"{self.variant!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 for batchnorm, got "
                             f"{self.batch_size}")
        if self.lr_initial <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got "
                             f"{self.weight_decay}")
        if self.gtm_alpha < 0:
            raise ValueError(f"gtm_alpha must be >= 0, got {self.gtm_alpha}")
        if self.task_weight_initial < 0:
            raise ValueError(f"task_weight_initial must be >= 0, got "
                             f"{self.task_weight_initial}")
        if not 0.0 < self.task_weight_factor <= 1.0:
            raise ValueError(f"task_weight_factor must lie in (0, 1], got "
                             f"{self.task_weight_factor}")
        if self.task_weight_floor <= 0:
            raise ValueError(f"task_weight_floor must be positive, got "
                             f"{self.task_weight_floor}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.validation_cap < MIN_CROP:
            raise ValueError(f"validation_cap must be >= {MIN_CROP}, got "
                             f"{self.validation_cap}")

    def to_dict(self):
        d = dict(self.__dict__)
        d["crop_range"] = list(self.crop_range)
        return d


@dataclass
class StepRecord:
    step: int
    epoch: int
    ce: float
    aux: float
    task_weight: float
    learning_rate: float
    total: float


@dataclass
class EpochRecord:
    epoch: int
    mean_ce: float
    mean_aux: float
    val_ce: float
    val_acc: float
    task_weight_next: float


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def epoch_steps(self, epoch):
        return [s for s in self.steps if s.epoch == epoch]

    def write_step_csv(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("step,epoch,ce,aux,task_weight,learning_rate,total\n")
            for s in self.steps:
                f.write(f"{s.step},{s.epoch},{s.ce!r},{s.aux!r},"
                        f"{s.task_weight!r},{s.learning_rate!r},{s.total!r}\n")

    def write_epoch_csv(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("epoch,mean_ce,mean_aux,val_ce,val_acc,task_weight_next\n")
            for e in self.epochs:
                f.write(f"{e.epoch},{e.mean_ce!r},{e.mean_aux!r},"
                        f"{e.val_ce!r},{e.val_acc!r},{e.task_weight_next!r}\n")


class DivergenceError(NumericError):
    """Training produced non-finite values; .step is the failing step."""

    def __init__(self, message, step, log=None):
        super().__init__(message)
        self.step = step
        self.log = log


def schedule_lr(step, total_steps, lr_initial, lr_final):
    """Geometric interpolation from lr_initial (step 0) to lr_final."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return float(lr_initial)
    if step == total_steps:
        return float(lr_final)
    return float(lr_initial * (lr_final / lr_initial) ** (step / total_steps))


def schedule_task_weight(val_history, current, factor=0.5, floor=1e-3,
                         patience=1):
    """Halve the task weight when validation CE stops improving.

    The weight decays by `factor` whenever the last `patience` epochs
    failed to beat the best validation CE seen before them, and never
    drops below `floor`. A weight of exactly 0 is left alone so a
    disabled auxiliary task stays disabled.
    """
    if current <= 0.0:
        return current
    stall = 0
    best = np.inf
    for ce in val_history:
        if ce < best:
            best = ce
            stall = 0
        else:
            stall += 1
    if stall >= patience:
        return max(current * factor, floor)
    return current


def _label_map(train_sequences, val_sequences):
    speakers = sorted({s.speaker_id for s in train_sequences})
    label_map = {spk: i for i, spk in enumerate(speakers)}
    for s in val_sequences:
        if s.speaker_id not in label_map:
            raise ValueError(f"validation speaker {s.speaker_id!r} absent "
                             "from the training set")
    return label_map


def validate(model, sequences, label_map, cap=400):
    """Eval-mode cross-entropy and accuracy over held-out utterances.

    Each utterance is truncated to its first `cap` frames. Running
    batchnorm statistics are read, never written.
    """
    if not sequences:
        raise ValueError("no validation utterances")
    ce_sum = 0.0
    hits = 0
    for seq in sequences:
        frames = seq.frames[:cap].astype(np.float64)
        record = forward(model, frames[None], "eval")
        label = np.array([label_map[seq.speaker_id]])
        ce_sum += softmax_cross_entropy(record.logits, label).item()
        hits += int(np.argmax(record.logits.values[0]) == label[0])
    n = len(sequences)
    return ce_sum / n, hits / n


def _save(checkpoint_path, model, opt, progress, epoch):
    # a "{epoch}" placeholder keeps one file per epoch instead of the
    # latest only
    path = str(checkpoint_path).format(epoch=epoch)
    tmp = path + ".tmp"
    save_checkpoint(tmp, model, opt, progress)
    os.replace(tmp, path)


def _run_epochs(model, opt, train_sequences, val_sequences, config,
                start_epoch, task_weight, val_history, checkpoint_path, log,
                stop_after_epoch=None):
    variant = config.variant
    if variant == "gncn" and model.aux is None:
        raise ValueError("gncn training needs a model built with an "
                         "auxiliary branch configuration")
    label_map = _label_map(train_sequences, val_sequences)
    if len(label_map) != model.spec.num_speakers:
        raise ValueError(f"corpus has {len(label_map)} speakers but the "
                         f"model expects {model.spec.num_speakers}")

    noise = None
    if variant == "gncn":
        noise = NoiseTargetSource(config.seed,
                                  aux_target_dims(model.spec, model.aux),
                                  mode=model.aux.noise_mode)

    lo = config.crop_range[0]
    usable = sum(1 for s in train_sequences if s.num_frames >= lo)
    steps_per_epoch = usable // config.batch_size
    if steps_per_epoch < 1:
        raise ValueError(f"{usable} usable utterances cannot fill a batch "
                         f"of {config.batch_size}")
    total_steps = config.epochs * steps_per_epoch
    global_step = (start_epoch - 1) * steps_per_epoch

    last_epoch = config.epochs
    if stop_after_epoch is not None:
        if stop_after_epoch < start_epoch:
            raise ValueError(f"stop_after_epoch {stop_after_epoch} precedes "
                             f"start epoch {start_epoch}")
        last_epoch = min(last_epoch, stop_after_epoch)

    for epoch in range(start_epoch, last_epoch + 1):
        rng = np.random.default_rng([config.seed, _BATCH_STREAM, epoch])
        if noise is not None and model.aux.noise_mode == "resampled":
            noise.reseed([config.seed, _NOISE_STREAM, epoch])
        batches = make_batches(train_sequences, config.batch_size, rng,
                               config.crop_range)
        for batch in batches:
            lr = schedule_lr(global_step, total_steps,
                             config.lr_initial, config.lr_final)
            labels = np.array([label_map[s.speaker_id] for s in batch])
            try:
                record = forward(model, batch, "train")
                ce = softmax_cross_entropy(record.logits, labels)
                aux = None
                weight = 0.0
                if variant == "gtm":
                    aux = gtm_regularizer(model.params["classifier.weight"],
                                          record.classifier_input, labels,
                                          squared=config.gtm_squared)
                    weight = config.gtm_alpha
                elif variant == "gncn" and task_weight > 0.0:
                    utts = [s.utterance_id for s in batch]
                    targets = {layer: noise.batch_targets(utts, layer)
                               for layer in aux_target_dims(model.spec,
                                                            model.aux)}
                    aux = aux_mse_loss(aux_predictions(model, record),
                                       targets, len(batch),
                                       squared=config.aux_squared)
                    weight = task_weight
                if aux is None:
                    loss = total_loss(ce, None, 0.0, "baseline")
                else:
                    loss = total_loss(ce, aux, weight, variant)
                model.zero_grad()
                loss.backward()
                adam_step(model.params, model.grads(), opt, learning_rate=lr)
            except NumericError as exc:
                raise DivergenceError(
                    f"training diverged at step {global_step + 1} "
                    f"(epoch {epoch}): {exc}", step=global_step + 1,
                    log=log) from exc
            global_step += 1
            log.steps.append(StepRecord(
                step=global_step, epoch=epoch, ce=ce.item(),
                aux=0.0 if aux is None else aux.item(),
                task_weight=weight, learning_rate=lr, total=loss.item()))

        val_ce, val_acc = validate(model, val_sequences, label_map,
                                   cap=config.validation_cap)
        val_history.append(val_ce)
        if variant == "gncn":
            task_weight = schedule_task_weight(
                val_history, task_weight, factor=config.task_weight_factor,
                floor=config.task_weight_floor, patience=config.patience)
        epoch_steps = log.epoch_steps(epoch)
        log.epochs.append(EpochRecord(
            epoch=epoch,
            mean_ce=sum(s.ce for s in epoch_steps) / len(epoch_steps),
            mean_aux=sum(s.aux for s in epoch_steps) / len(epoch_steps),
            val_ce=val_ce, val_acc=val_acc, task_weight_next=task_weight))
        if checkpoint_path is not None:
            progress = {
                "epoch": epoch,
                "task_weight": task_weight,
                "val_history": list(val_history),
                "seed": config.seed,
                "config": config.to_dict(),
            }
            _save(checkpoint_path, model, opt, progress, epoch)
    return log


def train(model, train_sequences, val_sequences, config,
          checkpoint_path=None, stop_after_epoch=None):
    """Train from scratch; returns the TrainLog (model updates in place).

    When checkpoint_path is given, a checkpoint with optimizer state and
    progress is (re)written atomically at every epoch end (a "{epoch}"
    placeholder in the path keeps every epoch). stop_after_epoch halts
    early without touching the schedules, e.g. to hand off to
    resume_training later.
    """
    opt = AdamState(model.params, learning_rate=config.lr_initial,
                    weight_decay=config.weight_decay)
    weight = config.task_weight_initial if config.variant == "gncn" else 0.0
    return _run_epochs(model, opt, train_sequences, val_sequences, config,
                       start_epoch=1, task_weight=weight,
                       val_history=[], checkpoint_path=checkpoint_path,
                       log=TrainLog(), stop_after_epoch=stop_after_epoch)


def resume_training(checkpoint_path, train_sequences, val_sequences, config,
                    out_checkpoint_path=None, stop_after_epoch=None):
    """Continue a checkpointed run up to config.epochs.

    The checkpoint's progress must have been written by train() with a
    matching config; seed or variant mismatches are rejected.
    """
    model, opt, progress = load_checkpoint(checkpoint_path)
    if progress is None or opt is None:
        raise ValueError(f"{checkpoint_path} lacks optimizer/progress state "
                         "and cannot be resumed")
    saved = progress.get("config", {})
    for key in ("variant", "seed", "batch_size", "epochs", "crop_range",
                "lr_initial", "lr_final"):
        ours = getattr(config, key)
        ours = list(ours) if isinstance(ours, tuple) else ours
        if key in saved and saved[key] != ours:
            raise ValueError(f"resume config mismatch on {key!r}: checkpoint "
                             f"has {saved[key]!r}, got {ours!r}")
    start = int(progress["epoch"]) + 1
    if start > config.epochs:
        raise ValueError(f"checkpoint already covers all {config.epochs} "
                         "epochs")
    if out_checkpoint_path is None:
        out_checkpoint_path = checkpoint_path
    return model, _run_epochs(
        model, opt, train_sequences, val_sequences, config,
        start_epoch=start, task_weight=float(progress["task_weight"]),
        val_history=list(progress["val_history"]),
        checkpoint_path=out_checkpoint_path, log=TrainLog(),
        stop_after_epoch=stop_after_epoch)
