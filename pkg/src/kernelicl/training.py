"""End-to-end training: cross-entropy on kernel predictions over prior batches.

Each batch embeds its datasets, computes kernel weights at the kernel's
default scale, predicts, and takes one Adam step on the mean per-dataset
cross-entropy. A fixed held-out pool of prior datasets is scored every
validation interval; the returned parameters are the snapshot with the
smallest validation loss.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .backbone import ModelConfig, ModelParameters, embed_dataset, init_parameters, save_checkpoint
from .errors import ContractViolation
from .kernels import GAUSSIAN, KNN, SOFT_KINDS, default_spec, kernel_weights, predict
from .optim import AdamState, adam_step
from .priorgen import Dataset, PriorConfig, sample_prior_batch

# Validation batches draw from the same prior stream but from batch indices
# far beyond any training run, so the pools never overlap.
VALIDATION_BATCH_BASE = 2 ** 31

LOSS_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    kernel: str = GAUSSIAN
    mode: str = "symmetric"
    batches: int = 500
    validation_batches: int = 4
    validation_interval: int = 25
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.kernel not in SOFT_KINDS:
            raise ContractViolation(
                f"training kernel must be differentiable ({SOFT_KINDS}), got '{self.kernel}'")
        if self.batches < 1 or self.validation_interval < 1 or self.validation_batches < 1:
            raise ContractViolation("batches, validation_batches and validation_interval must be >= 1")


@dataclass
class TrainLogRow:
    batch: int
    train_loss: float
    validation_loss: float
    seconds: float


@dataclass
class TrainLog:
    rows: list[TrainLogRow] = field(default_factory=list)
    best_index: int = -1

    @property
    def best_row(self) -> TrainLogRow:
        return self.rows[self.best_index]

    def loss_sequence(self) -> list[tuple[float, float]]:
        return [(r.train_loss, r.validation_loss) for r in self.rows]

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("batch,train_loss,val_loss,seconds\n")
            for r in self.rows:
                fh.write(f"{r.batch},{r.train_loss!r},{r.validation_loss!r},{r.seconds!r}\n")


def dataset_loss(params: ModelParameters, dataset: Dataset, spec, mode: str) -> Tensor:
    """Mean clamped cross-entropy over the dataset's test points (taped)."""
    if dataset.m < 1:
        raise ContractViolation("training datasets need at least one test point")
    bundle = embed_dataset(params, dataset.features_train, dataset.labels_train,
                           dataset.features_test, mode)
    weights = kernel_weights(spec, bundle.queries, bundle.keys)
    probs = predict(weights, dataset.labels_train, params.config.classes)
    p_true = ad.take_per_row(probs, dataset.labels_test.astype(np.intp))
    return ad.scale(ad.reduce_mean(ad.log(ad.clip(p_true, LOSS_CLAMP, 1.0 - LOSS_CLAMP))), -1.0)


def _pool_loss(params: ModelParameters, pool: list[Dataset], spec, mode: str) -> float:
    losses = [float(dataset_loss(params, ds, spec, mode).data) for ds in pool]
    return float(np.mean(losses))


def train(config: TrainConfig, prior: PriorConfig, model_config: ModelConfig | None = None,
          sampler=None) -> tuple[ModelParameters, TrainLog]:
    """Train from random initialization; returns the best-validation snapshot.

    ``sampler(batch_index) -> list[Dataset]`` overrides the prior stream for
    the training batches (capacity and oracle tests); validation always
    draws from the prior.
    """
    model_config = model_config or ModelConfig()
    params = init_parameters(model_config, config.seed)
    plist = params.parameters()
    adam = AdamState.for_params(plist, lr=config.learning_rate, beta1=config.beta1,
                                beta2=config.beta2, eps=config.adam_eps)
    spec = default_spec(config.kernel, model_config.d_k)
    if sampler is None:
        sampler = lambda batch_index: sample_prior_batch(prior, batch_index)

    pool = [ds for k in range(config.validation_batches)
            for ds in sample_prior_batch(prior, VALIDATION_BATCH_BASE + k)]

    log = TrainLog()
    best_loss = np.inf
    best_params = params.copy()
    interval: list[float] = []
    start = time.perf_counter()

    for batch_index in range(config.batches):
        datasets = sampler(batch_index)
        try:
            with Tape() as tape:
                total = dataset_loss(params, datasets[0], spec, config.mode)
                for ds in datasets[1:]:
                    total = total + dataset_loss(params, ds, spec, config.mode)
                batch_loss = ad.scale(total, 1.0 / len(datasets))
        except ContractViolation as err:
            raise ContractViolation(
                f"non-finite loss at batch {batch_index} (seed {config.seed}): {err}") from err
        grads = backward(tape, batch_loss, plist)
        adam_step(adam, plist, grads)
        interval.append(float(batch_loss.data))

        last = batch_index == config.batches - 1
        if (batch_index + 1) % config.validation_interval == 0 or last:
            val_loss = _pool_loss(params, pool, spec, config.mode)
            log.rows.append(TrainLogRow(batch_index, float(np.mean(interval)), val_loss,
                                        time.perf_counter() - start))
            interval = []
            if val_loss < best_loss:
                best_loss = val_loss
                best_params = params.copy()
                log.best_index = len(log.rows) - 1

    if config.checkpoint_path:
        save_checkpoint(best_params, config.checkpoint_path, extra={
            "trained_kernel": config.kernel,
            "mode": config.mode,
            "best_validation_loss": best_loss,
            "best_batch": log.rows[log.best_index].batch,
        })
    return best_params, log


def embeddings_for_kernel(requested: str, trained: Mapping[str, object]):
    """Checkpoint lookup honoring the kNN reuse rule.

    kNN predictions reuse Gaussian-trained embeddings (both are
    distance-based); dot and gaussian use their own training runs.
    """
    needed = GAUSSIAN if requested == KNN else requested
    if needed not in trained:
        raise ContractViolation(
            f"kernel '{requested}' requires a checkpoint trained with the '{needed}' kernel; "
            f"available: {sorted(trained)}")
    return trained[needed]
