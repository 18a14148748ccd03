"""Meta-training, the true fine-tuning oracle, and loss evaluation.

Fine-tuning runs mini-batch SGD or Adam with patience-based early stopping on
a validation set, returning the parameters of the best epoch. The oracle value
of a task subset S is the target validation loss after fine-tuning on the
combined data of S plus the target's train split.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .model import Network, ParamVector, Sample, stack_samples
from .taskgen import Corpus

OPTIMIZERS = ("sgd", "adam")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe. restore_best returns the best-validation-epoch
    parameters; with it off (and patience >= max_epochs) training becomes a
    fixed-epoch recipe that returns the final parameters."""

    step_size: float = 0.01
    batch_size: int = 32
    max_epochs: int = 60
    early_stop_patience: int = 3
    seed: int = 0
    optimizer: str = "adam"
    restore_best: bool = True

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")


@dataclass
class FitResult:
    params: ParamVector
    final_train_loss: float
    val_loss_curve: list[float]
    epochs_run: int
    forward_passes: int
    best_epoch: int


def eval_loss(net: Network, params: ParamVector, data: list[Sample]) -> float:
    """Mean sample loss over a nonempty sample list."""
    if not data:
        raise ValueError("empty evaluation data")
    X, y = stack_samples(data)
    return float(net.losses(params, X, y).mean())


def relative_distance(x: ParamVector, theta_star: ParamVector) -> float:
    """||x - theta*|| / ||theta*||."""
    if x.shape != theta_star.shape:
        raise ValueError("parameter vectors have different lengths")
    denom = np.linalg.norm(theta_star)
    if denom == 0:
        raise ValueError("theta* has zero norm")
    return float(np.linalg.norm(x - theta_star) / denom)


def _fit(
    net: Network,
    theta0: ParamVector,
    train: list[Sample],
    val: list[Sample],
    cfg: TrainConfig,
) -> FitResult:
    X, y = stack_samples(train)
    n = len(train)
    rng = np.random.default_rng(cfg.seed)
    params = theta0.copy()

    # Adam state (unused for sgd)
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    best_val = eval_loss(net, params, val)
    best_params = params.copy()
    best_epoch = 0
    curve: list[float] = []
    forward_passes = 0

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            g = net.loss_gradient(params, X[idx], y[idx])
            if cfg.optimizer == "sgd":
                params -= cfg.step_size * g
            else:
                step += 1
                m = beta1 * m + (1 - beta1) * g
                v = beta2 * v + (1 - beta2) * g * g
                mh = m / (1 - beta1**step)
                vh = v / (1 - beta2**step)
                params -= cfg.step_size * mh / (np.sqrt(vh) + eps)
        forward_passes += n

        val_loss = eval_loss(net, params, val)
        curve.append(val_loss)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(epoch, val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
            best_epoch = epoch
        elif epoch - best_epoch > cfg.early_stop_patience:
            break

    if not cfg.restore_best:
        best_params = params
        best_epoch = len(curve)
    train_loss = float(net.losses(best_params, X, y).mean())
    return FitResult(
        params=best_params,
        final_train_loss=train_loss,
        val_loss_curve=curve,
        epochs_run=len(curve),
        forward_passes=forward_passes,
        best_epoch=best_epoch,
    )


def meta_train(net: Network, corpus: Corpus, cfg: TrainConfig) -> FitResult:
    """Train on the union of every task's train split (sources plus target),
    early-stopping on the combined validation loss."""
    theta0 = net.init_params()
    return _fit(net, theta0, corpus.all_train_samples(), corpus.all_val_samples(), cfg)


def fine_tune_subset(
    net: Network,
    theta0: ParamVector,
    subset: frozenset[int] | set[int],
    corpus: Corpus,
    cfg: TrainConfig,
) -> FitResult:
    """Fine-tune from theta0 on D_S plus the target train split.

    Early stopping watches the validation loss of the mixture being trained
    (the subset tasks' val splits plus the target's); the target-val score of
    the result is computed by the caller.
    """
    bad = set(subset) - set(range(1, corpus.n_tasks + 1))
    if bad:
        raise ValueError(f"unknown task ids in subset: {sorted(bad)}")
    train: list[Sample] = []
    val: list[Sample] = []
    for tid in sorted(subset):
        train.extend(corpus.task(tid).train)
        val.extend(corpus.task(tid).val)
    train.extend(corpus.target.train)
    val.extend(corpus.target.val)
    return _fit(net, theta0, train, val, cfg)


def true_f(
    net: Network,
    theta0: ParamVector,
    subset: frozenset[int] | set[int],
    corpus: Corpus,
    cfg: TrainConfig,
) -> float:
    """The fine-tuning oracle: target validation loss after fine-tuning on the
    subset's data combined with the target's."""
    fit = fine_tune_subset(net, theta0, subset, corpus, cfg)
    return eval_loss(net, fit.params, corpus.target.val)


# ---------------------------------------------------------------------------
# Checkpoint file: magic, version, p, digests, then float64 little-endian
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"GSCP"
CHECKPOINT_VERSION = 1


def param_digest(params: ParamVector) -> str:
    return hashlib.sha256(np.ascontiguousarray(params, dtype="<f8").tobytes()).hexdigest()


def save_checkpoint(path, params: ParamVector, config_digest: str = "", corpus_digest: str = "") -> None:
    arr = np.ascontiguousarray(params, dtype="<f8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, arr.shape[0]))
        f.write(bytes.fromhex(config_digest or "0" * 64))
        f.write(bytes.fromhex(corpus_digest or "0" * 64))
        f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[ParamVector, str, str]:
    """Returns (params, config_digest, corpus_digest)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, p = struct.unpack("<IQ", f.read(12))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config_digest = f.read(32).hex()
        corpus_digest = f.read(32).hex()
        data = f.read(8 * p)
        if len(data) != 8 * p:
            raise ValueError(f"{path}: truncated checkpoint")
        params = np.frombuffer(data, dtype="<f8").copy()
    return params, config_digest, corpus_digest
