"""Benchmark harness: CSV ingestion, metrics, sweeps and cost benchmarks.

The harness CSV format is UTF-8, comma-separated with a header row: one
label column (default name "label"), optionally a "split" column with
values train/test, and every remaining column parsed as a finite decimal
feature. Files without a split column load as unsplit datasets (all rows
on the training side).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .backbone import ModelParameters, SYMMETRIC, embed_dataset, standardize
from .calibration import CalibrationGrid, calibrate
from .errors import ContractViolation, DataFormatError
from .flops import embedding_flops, estimate_embedding_bytes
from .kernels import KNN, KernelSpec, build_report, compute_weight_matrix, default_scale
from .parallel import map_ordered
from .priorgen import Dataset, stratified_split

SPLIT_COLUMN = "split"


# -----------------------------------------------------------------------------
# CSV ingestion and export
# -----------------------------------------------------------------------------


def load_csv(path: str, label_column: str = "label") -> Dataset:
    """Parse a harness CSV into a Dataset; unsplit files land entirely in train."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    lines = [line for line in lines if line]
    if not lines:
        raise DataFormatError(f"{path}: empty file (header row required)")
    header = lines[0].split(",")
    if label_column not in header:
        raise DataFormatError(f"{path}: label column '{label_column}' not in header {header}")
    label_pos = header.index(label_column)
    split_pos = header.index(SPLIT_COLUMN) if SPLIT_COLUMN in header else None
    feature_pos = [i for i in range(len(header)) if i != label_pos and i != split_pos]

    features, labels, in_train = [], [], []
    for row_num, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(header):
            raise DataFormatError(f"{path}: row {row_num} has {len(cells)} cells, expected {len(header)}")
        row = []
        for pos in feature_pos:
            try:
                value = float(cells[pos])
            except ValueError as err:
                raise DataFormatError(
                    f"{path}: row {row_num}, column '{header[pos]}': "
                    f"unparsable feature value '{cells[pos]}'") from err
            if not np.isfinite(value):
                raise DataFormatError(
                    f"{path}: row {row_num}, column '{header[pos]}': non-finite feature value")
            row.append(value)
        raw_label = cells[label_pos]
        try:
            label = int(raw_label)
        except ValueError as err:
            raise DataFormatError(
                f"{path}: row {row_num}, column '{label_column}': "
                f"unparsable label '{raw_label}'") from err
        if label < 0:
            raise DataFormatError(
                f"{path}: row {row_num}, column '{label_column}': negative label {label}")
        if split_pos is not None:
            flag = cells[split_pos]
            if flag not in ("train", "test"):
                raise DataFormatError(
                    f"{path}: row {row_num}, column '{SPLIT_COLUMN}': expected train/test, got '{flag}'")
            in_train.append(flag == "train")
        else:
            in_train.append(True)
        features.append(row)
        labels.append(label)

    if not features:
        raise DataFormatError(f"{path}: no data rows")
    x = np.array(features, dtype=np.float64)
    y = np.array(labels, dtype=np.intp)
    if len(np.unique(y)) < 2:
        raise DataFormatError(f"{path}: dataset has a single class ({y[0]})")
    mask = np.array(in_train, dtype=bool)
    return Dataset(x[mask], y[mask], x[~mask], y[~mask], provenance=f"csv:{path}")


def write_dataset_csv(dataset: Dataset, path: str) -> None:
    """Write a dataset in the harness format, including the split column."""
    d = dataset.d
    header = [f"f{i}" for i in range(d)] + ["label", SPLIT_COLUMN]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for x, y in zip(dataset.features_train, dataset.labels_train):
            fh.write(",".join(repr(float(v)) for v in x) + f",{int(y)},train\n")
        for x, y in zip(dataset.features_test, dataset.labels_test):
            fh.write(",".join(repr(float(v)) for v in x) + f",{int(y)},test\n")


def split(dataset: Dataset, fraction: float = 0.76, seed: int = 0) -> Dataset:
    """Deterministic stratified re-split of all rows at the given fraction."""
    if not 0.0 < fraction < 1.0:
        raise ContractViolation(f"split fraction must lie strictly in (0, 1), got {fraction}")
    x = np.concatenate([dataset.features_train, dataset.features_test], axis=0)
    y = np.concatenate([dataset.labels_train, dataset.labels_test])
    rng = np.random.default_rng((seed, y.shape[0]))
    train_idx, test_idx = stratified_split(y, fraction, rng)
    if test_idx.size == 0:
        raise ContractViolation(f"split fraction {fraction} leaves no test samples for n={y.shape[0]}")
    return Dataset(x[train_idx], y[train_idx], x[test_idx], y[test_idx],
                   provenance=dataset.provenance + f"|split({fraction},{seed})")


# -----------------------------------------------------------------------------
# Method evaluation and ranking
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodSpec:
    """What to run: a kernel in input space or on model embeddings."""

    name: str
    kernel: str
    input_space: bool = False
    mode: str = SYMMETRIC
    calibrated: bool = False
    scale: float | None = None
    grid: CalibrationGrid | None = None
    folds: int = 5
    seed: int = 0


@dataclass
class MethodResult:
    method: str
    accuracy: float
    relative_perplexity: float | None
    seconds: float


def _method_spaces(method: MethodSpec, dataset: Dataset, model: ModelParameters | None):
    if method.input_space:
        return standardize(dataset.features_train, dataset.features_test)
    if model is None:
        raise ContractViolation(f"method '{method.name}' needs a trained model")
    bundle = embed_dataset(model, dataset.features_train, dataset.labels_train,
                           dataset.features_test, method.mode)
    return bundle.keys.data, bundle.queries.data


def _resolve_scale(method: MethodSpec, dataset: Dataset, model: ModelParameters | None) -> float:
    if method.scale is not None:
        return method.scale
    if method.calibrated:
        result = calibrate(None if method.input_space else model,
                           dataset.features_train, dataset.labels_train, method.kernel,
                           grid=method.grid, folds=method.folds, seed=method.seed,
                           mode=method.mode)
        return result.chosen
    dims = dataset.d if method.input_space else model.config.d_k
    return default_scale(method.kernel, dims)


def evaluate(method: MethodSpec, dataset: Dataset,
             model: ModelParameters | None = None) -> MethodResult:
    """Accuracy, dataset relative perplexity and wall time of one method."""
    if dataset.m < 1:
        raise ContractViolation("evaluation needs at least one test sample")
    start = time.perf_counter()
    scale = _resolve_scale(method, dataset, model)
    if method.kernel == KNN:
        scale = min(int(scale), dataset.n)
    keys, queries = _method_spaces(method, dataset, model)
    weights = compute_weight_matrix(KernelSpec(method.kernel, scale), queries, keys)
    classes = max(dataset.classes, 2)
    report = build_report(weights, dataset.labels_train, classes)
    accuracy = float(np.mean(report.predicted == dataset.labels_test))
    seconds = time.perf_counter() - start
    return MethodResult(method.name, accuracy, report.relative_perplexity_dataset, seconds)


def mean_rank(accuracies: dict[str, dict[str, float]]):
    """Per-method mean rank (accuracy descending, ties averaged) and mean accuracy.

    ``accuracies[method][dataset]`` must be filled for every pair.
    """
    methods = sorted(accuracies)
    datasets = sorted({ds for per in accuracies.values() for ds in per})
    for method in methods:
        for ds in datasets:
            if ds not in accuracies[method]:
                raise ContractViolation(f"missing result for method '{method}' on dataset '{ds}'")
    ranks = {method: [] for method in methods}
    for ds in datasets:
        values = np.array([accuracies[method][ds] for method in methods])
        order = np.argsort(-values, kind="stable")
        position = np.empty(len(methods))
        position[order] = np.arange(1, len(methods) + 1)
        for value in np.unique(values):
            tied = values == value
            position[tied] = position[tied].mean()
        for i, method in enumerate(methods):
            ranks[method].append(position[i])
    return {method: (float(np.mean(ranks[method])),
                     float(np.mean([accuracies[method][ds] for ds in datasets])))
            for method in methods}


# -----------------------------------------------------------------------------
# Accuracy / sparsity trade-off sweep
# -----------------------------------------------------------------------------


@dataclass
class SweepPoint:
    target: float
    achieved: float | None
    scale: float | None
    accuracy: float | None

    @property
    def attained(self) -> bool:
        return self.achieved is not None


def tradeoff_sweep(model: ModelParameters | None, dataset: Dataset, kind: str,
                   ladder, targets, mode: str = SYMMETRIC) -> list[SweepPoint]:
    """Measure (relative perplexity, accuracy) per scale on the test set, then
    pick, per target, the scale whose perplexity is closest without exceeding it."""
    if not len(ladder) or not len(targets):
        raise ContractViolation("sweep needs a nonempty scale ladder and target list")
    if model is None:
        keys, queries = standardize(dataset.features_train, dataset.features_test)
    else:
        bundle = embed_dataset(model, dataset.features_train, dataset.labels_train,
                               dataset.features_test, mode)
        keys, queries = bundle.keys.data, bundle.queries.data
    classes = max(dataset.classes, 2)

    measured = []
    for scale in ladder:
        if kind == KNN and int(scale) > dataset.n:
            continue
        weights = compute_weight_matrix(KernelSpec(kind, scale), queries, keys)
        report = build_report(weights, dataset.labels_train, classes)
        accuracy = float(np.mean(report.predicted == dataset.labels_test))
        measured.append((float(scale), report.relative_perplexity_dataset, accuracy))

    points = []
    for target in targets:
        qualifying = [entry for entry in measured if entry[1] <= target]
        if not qualifying:
            points.append(SweepPoint(float(target), None, None, None))
            continue
        scale, achieved, accuracy = max(qualifying, key=lambda entry: entry[1])
        points.append(SweepPoint(float(target), achieved, scale, accuracy))
    return points


def write_sweep_csv(points: list[SweepPoint], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("target,achieved,scale,accuracy\n")
        for p in points:
            if p.attained:
                fh.write(f"{p.target!r},{p.achieved!r},{p.scale!r},{p.accuracy!r}\n")
            else:
                fh.write(f"{p.target!r},,,\n")


# -----------------------------------------------------------------------------
# Neighborhood compactness
# -----------------------------------------------------------------------------


def compactness(model: ModelParameters | None, dataset: Dataset, k: int,
                mode: str = SYMMETRIC) -> np.ndarray:
    """Per-feature mean absolute distance to the k nearest neighbors.

    Neighbors are found in the method's space (standardized input space
    for ``model=None``, the shared projected embedding space otherwise);
    distances are measured along each standardized input feature and
    averaged over test points, then normalized by the method's mean over
    features (so the values average to 1).
    """
    if k > dataset.n:
        raise ContractViolation(f"compactness needs k <= n, got k={k}, n={dataset.n}")
    if dataset.m < 1:
        raise ContractViolation("compactness needs at least one test point")
    train_std, test_std = standardize(dataset.features_train, dataset.features_test)
    if model is None:
        space_train, space_test = train_std, test_std
    else:
        bundle = embed_dataset(model, dataset.features_train, dataset.labels_train,
                               dataset.features_test, mode)
        space_train, space_test = bundle.keys.data, bundle.queries.data

    dist2 = ((space_test[:, None, :] - space_train[None, :, :]) ** 2).sum(axis=-1)
    neighbors = np.argsort(dist2, axis=1, kind="stable")[:, :k]
    per_feature = np.zeros(dataset.d)
    for j in range(dataset.m):
        gaps = np.abs(train_std[neighbors[j]] - test_std[j])
        per_feature += gaps.mean(axis=0)
    per_feature /= dataset.m
    total = per_feature.mean()
    return per_feature / total if total > 0 else np.zeros_like(per_feature)


def compactness_relative_difference(baseline: np.ndarray, method: np.ndarray) -> np.ndarray:
    """Percentage-point gap between normalized tables; positive = method tighter."""
    return 100.0 * (np.asarray(baseline) - np.asarray(method))


def write_compactness_csv(baseline: np.ndarray, method: np.ndarray, path: str,
                          feature_names=None) -> None:
    rel = compactness_relative_difference(baseline, method)
    names = feature_names or [f"f{i}" for i in range(len(baseline))]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("feature,baseline_norm,method_norm,rel_diff_pct\n")
        for name, b, m, r in zip(names, baseline, method, rel):
            fh.write(f"{name},{float(b)!r},{float(m)!r},{float(r)!r}\n")


# -----------------------------------------------------------------------------
# Symmetric-embedding overhead benchmark
# -----------------------------------------------------------------------------


@dataclass
class OverheadRow:
    n: int
    d: int
    flop_ratio: float
    time_ratio: float | None
    skipped: bool


def _timing_dataset(n: int, m: int, d: int, seed: int = 0) -> Dataset:
    rng = np.random.default_rng((seed, n, d))
    labels_train = np.arange(n, dtype=np.intp) % 2
    labels_test = np.arange(m, dtype=np.intp) % 2
    return Dataset(rng.standard_normal((n, d)), labels_train,
                   rng.standard_normal((m, d)), labels_test, f"bench(n={n},d={d})")


def overhead_benchmark(config, sizes, feature_counts, m: int = 50, repeats: int = 3,
                       memory_budget_bytes: int = 1 << 30,
                       model: ModelParameters | None = None) -> list[OverheadRow]:
    """FLOP and wall-time ratios (symmetric / asymmetric) per (n, d).

    FLOP ratios come from the static counter and are always reported.
    Wall-time measurement runs the real embedding and is skipped (and
    recorded as such) for instances whose estimated footprint exceeds the
    memory budget.
    """
    if list(sizes) != sorted(sizes):
        raise ContractViolation("sizes must be ascending")
    from .backbone import ASYMMETRIC, init_parameters

    rows = []
    ratios = map_ordered(
        lambda nd: embedding_flops(nd[0], m, nd[1], config, SYMMETRIC)
        / embedding_flops(nd[0], m, nd[1], config, ASYMMETRIC),
        [(n, d) for d in feature_counts for n in sizes])
    flop_by_nd = {}
    i = 0
    for d in feature_counts:
        for n in sizes:
            flop_by_nd[(n, d)] = ratios[i]
            i += 1

    bench_model = model or init_parameters(config, seed=0)
    for d in feature_counts:
        for n in sizes:
            flop_ratio = flop_by_nd[(n, d)]
            needed = estimate_embedding_bytes(n, m, d, config, SYMMETRIC)
            if needed > memory_budget_bytes:
                rows.append(OverheadRow(n, d, flop_ratio, None, True))
                continue
            ds = _timing_dataset(n, m, d)
            times = {}
            for mode in (SYMMETRIC, ASYMMETRIC):
                samples = []
                for _ in range(repeats):
                    start = time.perf_counter()
                    embed_dataset(bench_model, ds.features_train, ds.labels_train,
                                  ds.features_test, mode)
                    samples.append(time.perf_counter() - start)
                times[mode] = float(np.median(samples))
            rows.append(OverheadRow(n, d, flop_ratio, times[SYMMETRIC] / times[ASYMMETRIC], False))
    return rows


def write_overhead_csv(rows: list[OverheadRow], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("n,d,flop_ratio,time_ratio,skipped\n")
        for r in rows:
            t = "" if r.time_ratio is None else repr(r.time_ratio)
            fh.write(f"{r.n},{r.d},{r.flop_ratio!r},{t},{int(r.skipped)}\n")


def write_results_csv(results: list[MethodResult], dataset_names: list[str], path: str) -> None:
    """One row per (method, dataset) pair, in the given order."""
    if len(results) != len(dataset_names):
        raise ContractViolation("results and dataset names must align")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("method,dataset,accuracy,rel_perplexity,seconds\n")
        for result, name in zip(results, dataset_names):
            rel = "" if result.relative_perplexity is None else repr(result.relative_perplexity)
            fh.write(f"{result.method},{name},{result.accuracy!r},{rel},{result.seconds!r}\n")
