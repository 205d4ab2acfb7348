"""Synthetic data: the random-MLP training prior and noisy toy problems.

Prior datasets draw inputs from a random Gaussian mixture and label them by
thresholding a randomly initialized MLP at a random quantile, which keeps
both classes populated. Toy problems (moons / circles / linear) carry two
signal features plus i.i.d. Gaussian noise columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

MOONS = "moons"
CIRCLES = "circles"
LINEAR = "linear"
TOY_KINDS = (MOONS, CIRCLES, LINEAR)

_MIN_TOTAL = 16
_MAX_RESAMPLES = 64
_MIN_MINORITY_FRACTION = 0.1


@dataclass(frozen=True)
class PriorConfig:
    """Sampling ranges for one stream of prior datasets.

    ``active_max`` caps how many features the labeling MLP consumes per
    dataset (0 = all of them); the remaining columns are pure standard
    Gaussian noise, which teaches in-context noise suppression. The label
    threshold sits at a random quantile in [quantile_min, quantile_max].
    """

    d_min: int = 3
    d_max: int = 10
    max_total: int = 128
    train_fraction_min: float = 0.6
    train_fraction_max: float = 0.8
    datasets_per_batch: int = 8
    classes: int = 2
    seed: int = 0
    active_min: int = 1
    active_max: int = 0
    quantile_min: float = 0.2
    quantile_max: float = 0.8
    cluster_label_probability: float = 0.0

    def __post_init__(self):
        if not 1 <= self.d_min <= self.d_max:
            raise ContractViolation("feature range requires 1 <= d_min <= d_max")
        if not 0.0 < self.train_fraction_min <= self.train_fraction_max < 1.0:
            raise ContractViolation("train fraction range must satisfy 0 < f_min <= f_max < 1")
        if self.datasets_per_batch < 1:
            raise ContractViolation("datasets_per_batch must be >= 1")
        if self.max_total < _MIN_TOTAL:
            raise ContractViolation(f"max_total must be >= {_MIN_TOTAL}")
        if self.classes != 2:
            raise ContractViolation("the prior generates binary tasks")
        if self.active_max and not 1 <= self.active_min <= self.active_max:
            raise ContractViolation("active feature range requires 1 <= active_min <= active_max")
        if not 0.0 < self.quantile_min <= self.quantile_max < 1.0:
            raise ContractViolation("quantile range must satisfy 0 < q_min <= q_max < 1")
        if not 0.0 <= self.cluster_label_probability <= 1.0:
            raise ContractViolation("cluster_label_probability must lie in [0, 1]")


def paper_scale_prior(seed: int = 0) -> PriorConfig:
    """Reference-scale stream: 64 datasets per batch, 5-100 features, <=1024 samples."""
    return PriorConfig(d_min=5, d_max=100, max_total=1024, datasets_per_batch=64, seed=seed)


@dataclass
class Dataset:
    """One classification task with a train/test split."""

    features_train: np.ndarray
    labels_train: np.ndarray
    features_test: np.ndarray
    labels_test: np.ndarray
    provenance: str = ""

    @property
    def n(self) -> int:
        return self.features_train.shape[0]

    @property
    def m(self) -> int:
        return self.features_test.shape[0]

    @property
    def d(self) -> int:
        return self.features_train.shape[1]

    @property
    def classes(self) -> int:
        labels = np.concatenate([self.labels_train, self.labels_test])
        return int(labels.max()) + 1 if labels.size else 0

    def validate(self, classes: int = 2) -> "Dataset":
        if self.n < 1:
            raise ContractViolation("dataset needs at least one training sample")
        if self.features_test.shape[1] != self.d:
            raise ContractViolation("train/test feature dimensions disagree")
        if not (np.all(np.isfinite(self.features_train)) and np.all(np.isfinite(self.features_test))):
            raise ContractViolation("dataset features contain non-finite values")
        labels = np.concatenate([self.labels_train, self.labels_test])
        if labels.size and (labels.min() < 0 or labels.max() >= classes):
            raise ContractViolation(f"labels outside [0, {classes})")
        if classes == 2 and len(np.unique(self.labels_train)) < 2:
            raise ContractViolation("both classes must be present in the training split")
        return self

    def export(self, path: str) -> None:
        """Write this dataset in the harness CSV format (see the evaluation module)."""
        from .evaluation import write_dataset_csv

        write_dataset_csv(self, path)


def stratified_split(labels: np.ndarray, fraction: float, rng) -> tuple:
    """Deterministic per-class split; returns (train_idx, test_idx)."""
    labels = np.asarray(labels)
    total = labels.shape[0]
    train_mask = np.zeros(total, dtype=bool)
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(members.size)]
        take = int(round(fraction * members.size))
        take = min(max(take, 1 if members.size else 0), members.size)
        train_mask[members[:take]] = True
    return np.flatnonzero(train_mask), np.flatnonzero(~train_mask)


# -----------------------------------------------------------------------------
# Random-MLP prior
# -----------------------------------------------------------------------------


def _random_mixture_inputs(rng, total: int, d: int, components: int, spread: float):
    """Gaussian-mixture draw; returns the sample, assignments and centers."""
    assignment = rng.integers(0, components, size=total)
    centers = rng.normal(0.0, 2.0, size=(components, d))
    x = np.empty((total, d))
    for c in range(components):
        members = assignment == c
        count = int(members.sum())
        if not count:
            continue
        z = rng.standard_normal((count, d))
        basis = rng.normal(0.0, 1.0, size=(d, d)) / np.sqrt(d)
        x[members] = centers[c] + spread * (z @ basis + 0.3 * z)
    return x, assignment, centers


def _random_mlp_scores(rng, x: np.ndarray) -> np.ndarray:
    depth = int(rng.integers(1, 4))
    h = x
    fan_in = x.shape[1]
    for _ in range(depth):
        width = int(rng.integers(4, 33))
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, width))
        b = rng.normal(0.0, 0.3, size=width)
        h = h @ w + b
        h = np.tanh(h) if rng.integers(0, 2) == 0 else np.maximum(h, 0.0)
        fan_in = width
    w_out = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=fan_in)
    return h @ w_out


def _draw_prior_dataset(rng, config: PriorConfig, tag: str) -> Dataset | None:
    d = int(rng.integers(config.d_min, config.d_max + 1))
    total = int(rng.integers(_MIN_TOTAL, config.max_total + 1))
    fraction = rng.uniform(config.train_fraction_min, config.train_fraction_max)
    n = min(max(int(round(fraction * total)), 1), total - 1)

    if config.active_max:
        active = int(rng.integers(config.active_min, min(config.active_max, d) + 1))
    else:
        active = d
    active_cols = rng.permutation(d)[:active]
    cluster_mode = rng.uniform() < config.cluster_label_probability
    if cluster_mode:
        # Class regions become unions of coherent clusters, so the task is
        # locally solvable but in general not linearly separable.
        components = int(rng.integers(2, 7))
        spread = rng.uniform(0.3, 0.9)
    else:
        components = int(rng.integers(1, 5))
        spread = 1.0
    x = rng.standard_normal((total, d))
    x_active, assignment, centers = _random_mixture_inputs(rng, total, active, components, spread)
    x[:, active_cols] = x_active
    scores = _random_mlp_scores(rng, centers[assignment] if cluster_mode else x_active)
    threshold = np.quantile(scores, rng.uniform(config.quantile_min, config.quantile_max))
    labels = (scores > threshold).astype(np.intp)

    perm = rng.permutation(total)
    train_idx, test_idx = perm[:n], perm[n:]
    y_train = labels[train_idx]
    counts = np.bincount(y_train, minlength=2)
    if counts.min() < max(1, int(np.ceil(_MIN_MINORITY_FRACTION * n))):
        return None
    return Dataset(x[train_idx], y_train, x[test_idx], labels[test_idx], tag).validate()


def sample_prior_batch(config: PriorConfig, batch_index: int) -> list[Dataset]:
    """One batch of prior datasets, fully determined by (config.seed, batch_index).

    Degenerate draws (an imbalanced training split) are resampled with an
    incremented sub-seed, a bounded number of times.
    """
    datasets = []
    for i in range(config.datasets_per_batch):
        tag = f"prior[{batch_index}:{i}]"
        dataset = None
        for attempt in range(_MAX_RESAMPLES):
            rng = np.random.default_rng((config.seed, batch_index, i, attempt))
            dataset = _draw_prior_dataset(rng, config, tag)
            if dataset is not None:
                break
        if dataset is None:
            raise ContractViolation(
                f"prior sampling failed to balance classes after {_MAX_RESAMPLES} retries ({tag})")
        datasets.append(dataset)
    return datasets


# -----------------------------------------------------------------------------
# Toy problems with appended noise features
# -----------------------------------------------------------------------------


def _toy_signal(kind: str, rng, n_total: int) -> tuple[np.ndarray, np.ndarray]:
    half = n_total // 2
    counts = (n_total - half, half)
    labels = np.repeat([0, 1], counts)
    if kind == MOONS:
        theta = rng.uniform(0.0, np.pi, size=n_total)
        jitter = rng.normal(0.0, 0.1, size=(n_total, 2))
        upper = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        lower = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
        signal = np.where(labels[:, None] == 0, upper, lower) + jitter
    elif kind == CIRCLES:
        # Radius bands are kept disjoint so class is exactly radius < 0.75.
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n_total)
        wobble = np.clip(rng.normal(0.0, 0.08, size=n_total), -0.2, 0.2)
        radius = np.where(labels == 0, 1.0, 0.5) + wobble
        signal = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    elif kind == LINEAR:
        centers = np.where(labels[:, None] == 0, -2.0, 2.0) * np.array([1.0, 0.0])
        signal = centers + rng.normal(0.0, 0.55, size=(n_total, 2))
    else:
        raise ContractViolation(f"unknown toy kind '{kind}'")
    return signal, labels


def generate_toy(kind: str, n_total: int = 200, noise_features: int = 18,
                 noise_std: float = 1.0, seed: int = 0, split: float = 0.6) -> Dataset:
    """Two signal features plus Gaussian noise columns, stratified split."""
    if kind not in TOY_KINDS:
        raise ContractViolation(f"unknown toy kind '{kind}' (expected one of {TOY_KINDS})")
    if n_total < 10:
        raise ContractViolation("toy datasets need n_total >= 10")
    if noise_features < 0:
        raise ContractViolation("noise_features must be >= 0")
    if not 0.0 < split < 1.0:
        raise ContractViolation("split fraction must lie in (0, 1)")
    rng = np.random.default_rng((seed, hash_kind(kind)))
    signal, labels = _toy_signal(kind, rng, n_total)
    if noise_features:
        noise = rng.normal(0.0, noise_std, size=(n_total, noise_features))
        features = np.concatenate([signal, noise], axis=1)
    else:
        features = signal
    train_idx, test_idx = stratified_split(labels, split, rng)
    return Dataset(features[train_idx], labels[train_idx],
                   features[test_idx], labels[test_idx],
                   f"toy:{kind}(n={n_total},noise={noise_features},seed={seed})").validate()


def hash_kind(kind: str) -> int:
    """Stable small integer per toy kind, used to separate RNG streams."""
    return TOY_KINDS.index(kind)
