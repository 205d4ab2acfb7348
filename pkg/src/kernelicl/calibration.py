"""Per-dataset kernel-scale selection by k-fold cross-validation.

Embeddings are recomputed per fold with only that fold's training part as
context, so held-out points are never part of the context that scores
them. Ties in mean CV accuracy go to the sparser setting (larger gamma,
smaller k), then to grid order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import ModelParameters, SYMMETRIC, embed_dataset, standardize
from .errors import ContractViolation
from .kernels import DOT, GAUSSIAN, KINDS, KNN, KernelSpec, kernel_weights, predict
from .parallel import map_ordered


@dataclass(frozen=True)
class CalibrationGrid:
    kind: str
    candidates: tuple

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown kernel kind '{self.kind}'")
        if not self.candidates:
            raise ContractViolation("calibration grid must be nonempty")
        for c in self.candidates:
            KernelSpec(self.kind, c)


_GAUSSIAN_GRID = (0.01, 0.05, 0.1, 0.3, 0.5, 0.8, 1.0, 1.5)
_DOT_GRID = tuple(1.0 / np.sqrt(2.0 ** j) for j in range(2, 10))
_KNN_GRID = (1, 4, 5, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096, 8192)


def default_grid(kind: str) -> CalibrationGrid:
    if kind == GAUSSIAN:
        return CalibrationGrid(kind, _GAUSSIAN_GRID)
    if kind == DOT:
        return CalibrationGrid(kind, _DOT_GRID)
    if kind == KNN:
        return CalibrationGrid(kind, _KNN_GRID)
    raise ContractViolation(f"unknown kernel kind '{kind}'")


@dataclass
class CandidateScore:
    value: float
    mean_accuracy: float | None
    skipped: bool


@dataclass
class CalibrationResult:
    kind: str
    chosen: float
    scores: list[CandidateScore]
    folds: list[np.ndarray] = field(default_factory=list)
    seed: int = 0

    @property
    def fold_count(self) -> int:
        return len(self.folds)

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("candidate,mean_cv_accuracy,skipped\n")
            for s in self.scores:
                acc = "" if s.mean_accuracy is None else repr(s.mean_accuracy)
                fh.write(f"{s.value!r},{acc},{int(s.skipped)}\n")


def fold_partition(labels: np.ndarray, folds: int, seed: int) -> list[np.ndarray]:
    """Disjoint held-out index sets covering all samples, deterministic per seed.

    Stratified (round-robin within each shuffled class) when every class
    has at least ``folds`` members, plain random otherwise.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if folds < 2:
        raise ContractViolation("cross-validation needs folds >= 2")
    if n < folds:
        raise ContractViolation(f"cannot split n={n} samples into {folds} folds")
    rng = np.random.default_rng((seed, n))
    counts = np.bincount(labels)
    buckets: list[list[int]] = [[] for _ in range(folds)]
    if counts[counts > 0].min() >= folds:
        for cls in np.unique(labels):
            members = np.flatnonzero(labels == cls)
            members = members[rng.permutation(members.size)]
            for pos, idx in enumerate(members):
                buckets[pos % folds].append(int(idx))
    else:
        order = rng.permutation(n)
        for pos, idx in enumerate(order):
            buckets[pos % folds].append(int(idx))
    return [np.sort(np.array(b, dtype=np.intp)) for b in buckets]


def _fold_spaces(model: ModelParameters | None, features: np.ndarray, labels: np.ndarray,
                 train_idx: np.ndarray, held_idx: np.ndarray, mode: str):
    """(keys, queries) for one fold: model embeddings or standardized inputs."""
    if model is None:
        keys, queries = standardize(features[train_idx], features[held_idx])
        return keys, queries
    bundle = embed_dataset(model, features[train_idx], labels[train_idx],
                           features[held_idx], mode)
    return bundle.keys.data, bundle.queries.data


def calibrate(model: ModelParameters | None, features: np.ndarray, labels: np.ndarray,
              kind: str, grid: CalibrationGrid | None = None, folds: int = 5,
              seed: int = 0, mode: str = SYMMETRIC) -> CalibrationResult:
    """Select the kernel scale maximizing mean cross-validated accuracy.

    ``model=None`` calibrates an input-space baseline (identity embedding on
    standardized features). kNN candidates larger than the smallest fold
    context are recorded as skipped, not scored as zero.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    grid = grid or default_grid(kind)
    if grid.kind != kind:
        raise ContractViolation(f"grid is for kind '{grid.kind}', requested '{kind}'")
    held_sets = fold_partition(labels, folds, seed)
    n = labels.shape[0]
    min_context = min(n - h.size for h in held_sets)

    usable = [c for c in grid.candidates if not (kind == KNN and int(c) > min_context)]
    if not usable:
        raise ContractViolation(
            f"every candidate in the {kind} grid {grid.candidates} is skipped for n={n} "
            f"(smallest fold context {min_context})")

    def score_fold(held_idx: np.ndarray) -> list[float]:
        train_idx = np.setdiff1d(np.arange(n), held_idx)
        keys, queries = _fold_spaces(model, features, labels, train_idx, held_idx, mode)
        y_ctx = labels[train_idx]
        y_held = labels[held_idx]
        classes = int(labels.max()) + 1
        accs = []
        for c in usable:
            weights = kernel_weights(KernelSpec(kind, c), queries, keys)
            pred = predict(weights, y_ctx, classes).data.argmax(axis=1)
            accs.append(float(np.mean(pred == y_held)))
        return accs

    per_fold = map_ordered(score_fold, held_sets)
    means = {c: float(np.mean([fold[i] for fold in per_fold]))
             for i, c in enumerate(usable)}

    chosen = None
    chosen_acc = -1.0
    for c in grid.candidates:
        if c not in means:
            continue
        acc = means[c]
        if acc > chosen_acc:
            chosen, chosen_acc = c, acc
        elif acc == chosen_acc and chosen is not None:
            sparser = (int(c) < int(chosen)) if kind == KNN else (c > chosen)
            if sparser:
                chosen = c
    scores = [CandidateScore(float(c), means.get(c), c not in means) for c in grid.candidates]
    return CalibrationResult(kind, float(chosen), scores, held_sets, seed)
