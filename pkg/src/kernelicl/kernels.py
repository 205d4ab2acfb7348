"""Kernel weight computation, weighted-average prediction, inspectability metrics.

Every prediction is a convex combination of training labels. Soft kernels
(dot-product, Gaussian) are computed in the log domain with max
subtraction, so the unnormalized kernel values never materialize and
cannot overflow; normalization makes this exact. The kNN kernel puts 1/k
on the k nearest keys, breaking threshold ties by lowest training index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation

DOT = "dot"
GAUSSIAN = "gaussian"
KNN = "knn"
KINDS = (DOT, GAUSSIAN, KNN)
SOFT_KINDS = (DOT, GAUSSIAN)


@dataclass(frozen=True)
class KernelSpec:
    """Kernel kind plus its single scale: gamma for soft kernels, k for kNN."""

    kind: str
    scale: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown kernel kind '{self.kind}'")
        if self.kind == KNN:
            if self.scale < 1 or self.scale != int(self.scale):
                raise ContractViolation(f"kNN neighbor count must be a positive integer, got {self.scale}")
        elif not self.scale > 0:
            raise ContractViolation(f"kernel scale must be positive, got {self.scale}")

    @property
    def k(self) -> int:
        return int(self.scale)


def default_scale(kind: str, d_k: int) -> float:
    """Uncalibrated defaults: 1/sqrt(d_k) (dot), 1/(2 sqrt(d_k)) (gaussian), 5 (knn)."""
    if kind == DOT:
        return 1.0 / np.sqrt(d_k)
    if kind == GAUSSIAN:
        return 1.0 / (2.0 * np.sqrt(d_k))
    if kind == KNN:
        return 5
    raise ContractViolation(f"unknown kernel kind '{kind}'")


def default_spec(kind: str, d_k: int) -> KernelSpec:
    return KernelSpec(kind, default_scale(kind, d_k))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def kernel_dot(queries, keys, gamma: float) -> Tensor:
    """Row j = softmax_i of gamma * q_j . k_i."""
    if not gamma > 0:
        raise ContractViolation(f"dot kernel scale must be positive, got {gamma}")
    q, k = _as_tensor(queries), _as_tensor(keys)
    logits = ad.scale(q @ ad.transpose(k, (1, 0)), gamma)
    return ad.softmax(logits, axis=-1)


def kernel_gaussian(queries, keys, gamma: float) -> Tensor:
    """Row j = softmax_i of -gamma * ||q_j - k_i||^2."""
    if not gamma > 0:
        raise ContractViolation(f"gaussian kernel scale must be positive, got {gamma}")
    q, k = _as_tensor(queries), _as_tensor(keys)
    logits = ad.scale(ad.sqdist(q, k), -gamma)
    return ad.softmax(logits, axis=-1)


def kernel_knn(queries, keys, k: int) -> np.ndarray:
    """1/k on the k nearest keys per query, 0 elsewhere.

    The neighborhood threshold is the k-th smallest Euclidean distance;
    ties at the threshold are resolved toward the lowest training index so
    exactly k entries are selected. Not differentiable.
    """
    q = np.asarray(queries.data if isinstance(queries, Tensor) else queries, dtype=np.float64)
    kk = np.asarray(keys.data if isinstance(keys, Tensor) else keys, dtype=np.float64)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(kk))):
        raise ContractViolation("kNN kernel requires finite embeddings")
    n = kk.shape[0]
    if not 1 <= k <= n:
        raise ContractViolation(f"neighbor count k={k} outside [1, n={n}]")
    dist2 = ((q[:, None, :] - kk[None, :, :]) ** 2).sum(axis=-1)
    order = np.argsort(dist2, axis=1, kind="stable")
    weights = np.zeros((q.shape[0], n))
    rows = np.arange(q.shape[0])[:, None]
    weights[rows, order[:, :k]] = 1.0 / k
    return weights


def kernel_weights(spec: KernelSpec, queries, keys) -> Tensor:
    """Dispatch on kernel kind; the kNN result is a constant tensor."""
    if spec.kind == DOT:
        return kernel_dot(queries, keys, spec.scale)
    if spec.kind == GAUSSIAN:
        return kernel_gaussian(queries, keys, spec.scale)
    return Tensor(kernel_knn(queries, keys, spec.k))


@dataclass
class WeightMatrix:
    """Normalized weights of every test point over the training samples."""

    values: np.ndarray
    kind: str
    k: int | None = None

    def validate(self, tol: float = 1e-9) -> "WeightMatrix":
        w = self.values
        if w.ndim != 2:
            raise ContractViolation(f"weight matrix must be 2-D, got shape {w.shape}")
        if w.min(initial=0.0) < -tol:
            raise ContractViolation("weight matrix has negative entries")
        if np.abs(w.sum(axis=1) - 1.0).max(initial=0.0) > tol:
            raise ContractViolation("weight rows do not sum to 1")
        if self.kind == KNN:
            hits = (w == 1.0 / self.k).sum(axis=1)
            zeros = (w == 0.0).sum(axis=1)
            if not (np.all(hits == self.k) and np.all(hits + zeros == w.shape[1])):
                raise ContractViolation("kNN weight rows must have exactly k entries of 1/k")
        return self


def compute_weight_matrix(spec: KernelSpec, queries, keys) -> WeightMatrix:
    values = kernel_weights(spec, queries, keys).data
    return WeightMatrix(values, spec.kind, spec.k if spec.kind == KNN else None).validate()


def predict(weights: Tensor, labels: np.ndarray, classes: int) -> Tensor:
    """Class probabilities: probs[j][c] = sum_i w[j][i] * 1[y_i == c]."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ContractViolation(f"labels must lie in [0, {classes})")
    onehot = np.zeros((labels.shape[0], classes))
    onehot[np.arange(labels.shape[0]), labels.astype(np.intp)] = 1.0
    return _as_tensor(weights) @ Tensor(onehot)


def perplexity(weights: np.ndarray) -> np.ndarray:
    """exp of the Shannon entropy of each weight row, with 0 log 0 = 0.

    Rows whose positive entries are all equal take the exact path
    (perplexity is the support size by identity); otherwise the result is
    projected onto the mathematically guaranteed range [1, n].
    """
    w = np.asarray(weights, dtype=np.float64)
    squeeze = w.ndim == 1
    if squeeze:
        w = w[None, :]
    if w.min(initial=0.0) < 0.0:
        raise ContractViolation("perplexity input has a negative weight")
    if np.abs(w.sum(axis=1) - 1.0).max(initial=0.0) > 1e-6:
        raise ContractViolation("perplexity input rows must sum to 1")
    n = w.shape[1]
    out = np.empty(w.shape[0])
    for i, row in enumerate(w):
        positive = row[row > 0.0]
        if positive.size and np.all(positive == positive[0]):
            out[i] = float(positive.size)
        else:
            entropy = -(positive * np.log(positive)).sum()
            out[i] = min(max(float(np.exp(entropy)), 1.0), float(n))
    return out[0] if squeeze else out


def relative_perplexity(ppl: np.ndarray, n: int):
    """Per-point PPL/n and the dataset-level geometric mean.

    Equal per-point values short-circuit to that value (their geometric
    mean, exactly); otherwise the exp/log result is projected onto the
    mathematically guaranteed range [min, max].
    """
    ppl = np.atleast_1d(np.asarray(ppl, dtype=np.float64))
    if ppl.size == 0:
        raise ContractViolation("relative perplexity needs at least one test point")
    rel = ppl / n
    if np.all(rel == rel[0]):
        return rel, float(rel[0])
    mean = float(np.exp(np.log(rel).mean()))
    return rel, min(max(mean, float(rel.min())), float(rel.max()))


@dataclass
class PredictionReport:
    """The inspectable artifact: probabilities, weights and their perplexities."""

    probs: np.ndarray
    weights: WeightMatrix
    perplexity: np.ndarray
    relative_perplexity: np.ndarray
    relative_perplexity_dataset: float
    predicted: np.ndarray = field(init=False)

    def __post_init__(self):
        self.predicted = self.probs.argmax(axis=1) if self.probs.size else np.zeros(0, dtype=int)


def build_report(weights: WeightMatrix, labels: np.ndarray, classes: int) -> PredictionReport:
    weights.validate()
    probs = predict(Tensor(weights.values), labels, classes).data
    ppl = np.atleast_1d(perplexity(weights.values))
    rel, dataset_rel = relative_perplexity(ppl, weights.values.shape[1])
    return PredictionReport(probs, weights, ppl, rel, dataset_rel)


# -----------------------------------------------------------------------------
# CSV export
# -----------------------------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x))


def write_weights_csv(report: PredictionReport, path: str) -> None:
    """One row per (test, train) pair with the weight and its descending rank."""
    w = report.weights.values
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("test_index,train_index,weight,rank\n")
        for j in range(w.shape[0]):
            order = np.argsort(-w[j], kind="stable")
            ranks = np.empty(w.shape[1], dtype=int)
            ranks[order] = np.arange(1, w.shape[1] + 1)
            for i in range(w.shape[1]):
                fh.write(f"{j},{i},{_fmt(w[j, i])},{ranks[i]}\n")


def write_perplexity_csv(report: PredictionReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("test_index,perplexity,relative_perplexity\n")
        for j in range(report.perplexity.shape[0]):
            fh.write(f"{j},{_fmt(report.perplexity[j])},{_fmt(report.relative_perplexity[j])}\n")


def write_predictions_csv(report: PredictionReport, path: str) -> None:
    classes = report.probs.shape[1]
    header = ",".join(["test_index", "predicted"] + [f"p{c}" for c in range(classes)]
                      + ["perplexity", "relative_perplexity"])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for j in range(report.probs.shape[0]):
            probs = ",".join(_fmt(v) for v in report.probs[j])
            fh.write(f"{j},{report.predicted[j]},{probs},{_fmt(report.perplexity[j])},"
                     f"{_fmt(report.relative_perplexity[j])}\n")
