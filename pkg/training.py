"""
Training: BCE loss, Adam, the LR-halving / abort / restart-from-best
scheduler, and the epoch loop.

Schedule (all counts in epochs without strict val-loss improvement):
    every 16 stale epochs -> halve the learning rate
    32 stale epochs       -> abort; reload the best weights and restart at
                             lr 0.5e-4 while restarts remain
"""

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from checkpoint import Checkpoint, save_checkpoint
from dataset import SampleStore
from errors import InsufficientDataError, NonFiniteError, TrainingDiverged
from imageops import augment_batch, to_model_input
from metrics import avg_class_accuracy, confusion_matrix
from models import (
    AugmentationPolicy,
    Manifest,
    ModelGraph,
    Role,
    SchedulerAction,
    SchedulerState,
    SplitAssignment,
    TrainConfig,
    TrainLogRow,
)
from network import ParameterSet, backward, forward, update_running_stats

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


# ============================================================================
# LOSS
# ============================================================================

def bce_loss(probs: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean binary cross-entropy over all N x 16 elements.

    Returns:
        (loss, d_loss/d_probs). Probabilities are clamped to
        [1e-7, 1 - 1e-7]; clamping is logged.
    """
    if probs.shape != targets.shape:
        raise ValueError(f"probs {probs.shape} and targets {targets.shape} differ in shape")
    p = probs.astype(np.float64)
    t = targets.astype(np.float64)
    clamped = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n_clamped = int(np.count_nonzero(clamped != p))
    if n_clamped:
        logger.warning(f"⚠️ BCE clamped {n_clamped} probabilities to [{PROB_CLAMP}, {1 - PROB_CLAMP}]")
    loss = float(-np.mean(t * np.log(clamped) + (1.0 - t) * np.log(1.0 - clamped)))
    grad = (-(t / clamped) + (1.0 - t) / (1.0 - clamped)) / p.size
    return loss, grad.astype(probs.dtype)


def one_hot(labels: Sequence[int], num_classes: int = 16, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)] = 1.0
    return out


# ============================================================================
# ADAM
# ============================================================================

@dataclass
class AdamState:
    """First/second moments per trainable tensor and the step counter."""
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros(cls, params: ParameterSet) -> "AdamState":
        return cls(
            m={k: np.zeros_like(params[k]) for k in params.trainable},
            v={k: np.zeros_like(params[k]) for k in params.trainable},
        )


def adam_step(
    params: ParameterSet,
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    checked: bool = False,
) -> None:
    """Bias-corrected Adam update, in place; `state.t` always advances."""
    if checked:
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NonFiniteError(f"gradient of '{name}' (step {state.t + 1})")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        state.m[name] = m.astype(params[name].dtype, copy=False)
        state.v[name] = v.astype(params[name].dtype, copy=False)
        m_hat = m / c1
        v_hat = v / c2
        params.tensors[name] = (params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(params[name].dtype)


# ============================================================================
# SCHEDULER
# ============================================================================

def scheduler_update(
    state: SchedulerState,
    val_loss: float,
    halve_patience: int = 16,
    abort_patience: int = 32,
) -> SchedulerAction:
    """
    Advance the scheduler by one epoch.

    Strict improvement resets the stale counter; every fresh multiple of
    `halve_patience` below `abort_patience` halves the LR; reaching
    `abort_patience` aborts.
    """
    if not math.isfinite(val_loss):
        raise ValueError(f"validation loss must be finite, got {val_loss}")
    state.epoch += 1
    if val_loss < state.best_val_loss:
        state.best_val_loss = val_loss
        state.epochs_since_improve = 0
        return SchedulerAction.CONTINUE
    state.epochs_since_improve += 1
    if state.epochs_since_improve >= abort_patience:
        return SchedulerAction.ABORT
    if state.epochs_since_improve % halve_patience == 0:
        state.current_lr = state.current_lr / 2.0
        return SchedulerAction.HALVE_LR
    return SchedulerAction.CONTINUE


def scheduler_restart(state: SchedulerState, restart_lr: float) -> None:
    state.current_lr = restart_lr
    state.epochs_since_improve = 0
    state.restarts_done += 1


# ============================================================================
# TRAINER
# ============================================================================

def sample_seed(seed: int, epoch: int, index: int) -> int:
    """Augmentation seed of one sample in one epoch, independent of batching."""
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


class Trainer:
    """
    Epoch loop over a split: seeded shuffle, augmented batches, Adam steps,
    validation and scheduling, with the best weights kept and checkpointed.
    """

    def __init__(
        self,
        manifest: Manifest,
        assignment: SplitAssignment,
        graph: ModelGraph,
        params: ParameterSet,
        config: TrainConfig,
        policy: AugmentationPolicy,
        checkpoint_path: Optional[Path] = None,
        on_epoch: Optional[Callable[[TrainLogRow], None]] = None,
    ):
        self.manifest = manifest
        self.assignment = assignment
        self.graph = graph
        self.params = params.copy()
        self.config = config
        self.policy = policy
        self.checkpoint_path = checkpoint_path
        self.on_epoch = on_epoch
        self.num_classes = graph.num_classes
        self.train_idx = assignment.indices(Role.TRAIN)
        self.val_idx = assignment.indices(Role.VAL)
        input_hw = (graph.input_shape[1], graph.input_shape[2])
        self.store = SampleStore(manifest, input_hw, assignment, forbid_test=True)
        self.workers = 1 if config.deterministic else config.workers
        self.adam = AdamState.zeros(self.params)
        self.state = SchedulerState(current_lr=config.lr_init)
        self.log: List[TrainLogRow] = []
        self.best_params = self.params.copy()
        self.best_meta: Dict[str, object] = {"epoch": 0, "val_loss": None, "seed": config.seed}
        self._val_cache: Optional[Tuple[np.ndarray, np.ndarray]] = None

    # -- data ---------------------------------------------------------------

    def _validation_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        if self._val_cache is None:
            images = [self.store.get(i) for i in self.val_idx]
            labels = np.array([self.store.label(i) for i in self.val_idx], dtype=np.int64)
            self._val_cache = (to_model_input(images), labels)
        return self._val_cache

    # -- epoch pieces (overridable) ------------------------------------------

    def run_epoch(self, epoch: int) -> float:
        """One pass over the training role; returns the sample-weighted mean loss."""
        cfg = self.config
        order = np.random.default_rng([cfg.seed, epoch]).permutation(self.train_idx)
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = [int(i) for i in order[start:start + cfg.batch_size]]
            images = augment_batch(
                [self.store.get(i) for i in idx], self.policy,
                [sample_seed(cfg.seed, epoch, i) for i in idx], self.workers,
            )
            x = to_model_input(images)
            targets = one_hot([self.store.label(i) for i in idx], self.num_classes)
            probs, cache = forward(self.graph, self.params, x, mode="train", checked=cfg.checked, return_cache=True)
            loss, _ = bce_loss(probs, targets)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, list(self.log))
            grads = backward(self.graph, self.params, x, targets, cache=cache)
            adam_step(self.params, grads, self.adam, self.state.current_lr,
                      cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.checked)
            update_running_stats(self.params, cache, cfg.bn_momentum)
            total += loss * len(idx)
        return total / len(order)

    def validate(self) -> Tuple[float, float]:
        """(val loss, val average class accuracy) on un-augmented images."""
        x, labels = self._validation_arrays()
        probs = predict_probs(self.graph, self.params, x, self.config.batch_size)
        loss, _ = bce_loss(probs, one_hot(labels, self.num_classes))
        cm = confusion_matrix(np.argmax(probs, axis=1), labels, self.num_classes)
        return loss, avg_class_accuracy(cm)

    # -- loop ---------------------------------------------------------------

    def _keep_best(self, epoch: int, val_loss: float, val_acc: float) -> None:
        self.best_params = self.params.copy()
        self.best_meta = {
            "epoch": epoch,
            "val_loss": val_loss,
            "val_avg_class_acc": val_acc,
            "lr": self.state.current_lr,
            "seed": self.config.seed,
        }
        if self.checkpoint_path is not None:
            save_checkpoint(self.graph, self.best_params, self.best_meta, self.checkpoint_path)

    def fit(self) -> Tuple[Checkpoint, List[TrainLogRow]]:
        cfg = self.config
        if cfg.max_epochs == 0:
            logger.info("Training skipped: max_epochs is 0")
            return Checkpoint(self.graph, self.params.copy(), dict(self.best_meta)), []
        if not self.train_idx or not self.val_idx:
            raise InsufficientDataError("train/val split", min(len(self.train_idx), len(self.val_idx)), 1)

        logger.info(
            f"🚀 Training {len(self.train_idx)} samples, validating on {len(self.val_idx)}, "
            f"up to {cfg.max_epochs} epochs at lr {cfg.lr_init}"
        )
        for epoch in range(1, cfg.max_epochs + 1):
            started = time.perf_counter()
            train_loss = self.run_epoch(epoch)
            val_loss, val_acc = self.validate()
            if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
                raise TrainingDiverged(epoch, list(self.log))
            action = scheduler_update(self.state, val_loss, cfg.halve_patience, cfg.abort_patience)
            if self.state.epochs_since_improve == 0:
                self._keep_best(epoch, val_loss, val_acc)

            stop = False
            if action == SchedulerAction.ABORT:
                if self.state.restarts_done < cfg.max_restarts:
                    self.params = self.best_params.copy()
                    self.adam = AdamState.zeros(self.params)
                    scheduler_restart(self.state, cfg.restart_lr)
                    action = SchedulerAction.RESTART
                    logger.warning(f"⚠️ Epoch {epoch}: aborted, restarting from best weights at lr {cfg.restart_lr}")
                else:
                    stop = True

            row = TrainLogRow(epoch=epoch, train_loss=train_loss, val_loss=val_loss,
                              val_avg_class_acc=val_acc, lr=self.state.current_lr, action=action)
            self.log.append(row)
            elapsed = time.perf_counter() - started
            logger.info(
                f"Epoch {epoch}: train {train_loss:.4f} val {val_loss:.4f} acc {val_acc:.4f} "
                f"lr {self.state.current_lr:g} {action.value} "
                f"({elapsed:.1f}s, {len(self.train_idx) / max(elapsed, 1e-9):.0f} samples/s)"
            )
            if self.on_epoch:
                self.on_epoch(row)
            if stop:
                logger.warning(f"⚠️ Training aborted at epoch {epoch}: no restarts left")
                break

        logger.info(f"✅ Best val loss {self.state.best_val_loss:.6f} at epoch {self.best_meta['epoch']}")
        return Checkpoint(self.graph, self.best_params.copy(), dict(self.best_meta)), self.log


def train(
    manifest: Manifest,
    assignment: SplitAssignment,
    graph: ModelGraph,
    params: ParameterSet,
    config: TrainConfig,
    policy: AugmentationPolicy,
    checkpoint_path: Optional[Path] = None,
) -> Tuple[Checkpoint, List[TrainLogRow]]:
    return Trainer(manifest, assignment, graph, params, config, policy, checkpoint_path).fit()


def predict_probs(graph: ModelGraph, params: ParameterSet, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Infer-mode probabilities for a stacked input, evaluated in chunks."""
    chunks = [forward(graph, params, x[i:i + batch_size], mode="infer") for i in range(0, len(x), batch_size)]
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, graph.num_classes), dtype=np.float32)


# ============================================================================
# TRAIN LOG
# ============================================================================

TRAIN_LOG_COLUMNS = ["epoch", "train_loss", "val_loss", "val_avg_class_acc", "lr", "action"]


def write_train_log(path: Path, rows: Sequence[TrainLogRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TRAIN_LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            record = row.model_dump()
            record["action"] = row.action.value
            for key in ("train_loss", "val_loss", "val_avg_class_acc", "lr"):
                record[key] = repr(float(record[key]))
            writer.writerow(record)


def read_train_log(path: Path) -> List[TrainLogRow]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return [TrainLogRow(**row) for row in csv.DictReader(f)]
