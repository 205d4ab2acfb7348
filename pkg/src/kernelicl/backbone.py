"""Three-stage embedding backbone with symmetric and asymmetric modes.

Stage 1 summarizes each feature column through learnable inducing vectors
that attend only to training samples; every sample then attends to those
summaries. Stage 2 runs self-attention across the feature axis of each row
and pools with a learned token. Stage 3 is an in-context transformer whose
keys and values always come from the label-conditioned context block, so
training rows never see test rows and test rows never see each other.

In asymmetric mode the context outputs double as training-sample
embeddings. In symmetric mode the training samples are re-fed as extra
label-free queries, so a training sample and an identical test sample
follow the same computation path and produce bitwise-equal embeddings.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, DataFormatError

SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"

CHECKPOINT_MAGIC = b"KICL"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters; desk-scale defaults, everything configurable."""

    width: int = 64
    heads: int = 4
    col_layers: int = 2
    row_layers: int = 2
    icl_layers: int = 2
    inducing: int = 16
    d_k: int = 64
    classes: int = 2
    ffn_mult: int = 2

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ContractViolation(f"width {self.width} not divisible by heads {self.heads}")
        if min(self.width, self.heads, self.col_layers, self.row_layers, self.icl_layers,
               self.inducing, self.d_k, self.ffn_mult) < 1 or self.classes < 2:
            raise ContractViolation("all model dimensions must be positive (classes >= 2)")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def ffn_hidden(self) -> int:
        return self.width * self.ffn_mult


@dataclass
class ModelParameters:
    """All trainable weights, keyed by stable names in creation order."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def copy(self) -> "ModelParameters":
        clone = {name: Tensor(t.data.copy(), requires_grad=True, name=name)
                 for name, t in self.tensors.items()}
        return ModelParameters(self.config, clone)


def _init_mab(store: dict, prefix: str, rng, width: int, hidden: int) -> None:
    def param(name, data):
        store[f"{prefix}.{name}"] = Tensor(data, requires_grad=True, name=f"{prefix}.{name}")

    w_std = 1.0 / np.sqrt(width)
    param("ln_attn.g", np.ones(width))
    param("ln_attn.b", np.zeros(width))
    for w in ("wq", "wk", "wv", "wo"):
        param(w, rng.normal(0.0, w_std, size=(width, width)))
    param("ln_ffn.g", np.ones(width))
    param("ln_ffn.b", np.zeros(width))
    param("ffn.w1", rng.normal(0.0, w_std, size=(width, hidden)))
    param("ffn.b1", np.zeros(hidden))
    param("ffn.w2", rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, width)))
    param("ffn.b2", np.zeros(width))


def init_parameters(config: ModelConfig, seed: int = 0) -> ModelParameters:
    rng = np.random.default_rng(seed)
    w, h = config.width, config.ffn_hidden
    store: dict[str, Tensor] = {}

    def param(name, data):
        store[name] = Tensor(data, requires_grad=True, name=name)

    param("col.lift.w", rng.normal(0.0, 1.0, size=w))
    param("col.lift.b", np.zeros(w))
    for layer in range(config.col_layers):
        param(f"col.{layer}.ind", rng.normal(0.0, 1.0, size=(config.inducing, w)))
        _init_mab(store, f"col.{layer}.ind_attn", rng, w, h)
        _init_mab(store, f"col.{layer}.tok_attn", rng, w, h)
    for layer in range(config.row_layers):
        _init_mab(store, f"row.{layer}.self", rng, w, h)
    param("row.pool.token", rng.normal(0.0, 1.0, size=(1, w)))
    _init_mab(store, "row.pool.attn", rng, w, h)
    for layer in range(config.icl_layers):
        _init_mab(store, f"icl.{layer}.attn", rng, w, h)
    param("icl.final_ln.g", np.ones(w))
    param("icl.final_ln.b", np.zeros(w))
    param("labels.g", rng.normal(0.0, 1.0, size=(config.classes, w)))
    param("proj.w", rng.normal(0.0, 1.0 / np.sqrt(w), size=(w, config.d_k)))
    param("proj.wq", rng.normal(0.0, 1.0 / np.sqrt(w), size=(w, config.d_k)))
    param("proj.wk", rng.normal(0.0, 1.0 / np.sqrt(w), size=(w, config.d_k)))
    return ModelParameters(config, store)


# -----------------------------------------------------------------------------
# Attention blocks
# -----------------------------------------------------------------------------


def _split_heads(x: Tensor, batch: int, seq: int, heads: int, head_dim: int) -> Tensor:
    x = ad.reshape(x, (batch, seq, heads, head_dim))
    x = ad.transpose(x, (0, 2, 1, 3))
    return ad.reshape(x, (batch * heads, seq, head_dim))


def _mab(p: ModelParameters, prefix: str, x: Tensor, y: Tensor) -> Tensor:
    """Pre-LN multi-head cross-attention block: queries from x, keys/values from y.

    Accepts (S, W) or (B, S, W) inputs; x and y must share the batch shape.
    """
    cfg = p.config
    squeeze = x.data.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.data.shape)
        y = ad.reshape(y, (1,) + y.data.shape)
    batch, sq, w = x.data.shape
    skv = y.data.shape[1]
    heads, hd = cfg.heads, cfg.head_dim

    ln_g, ln_b = p[f"{prefix}.ln_attn.g"], p[f"{prefix}.ln_attn.b"]
    xn = ad.layer_norm(x, ln_g, ln_b)
    yn = ad.layer_norm(y, ln_g, ln_b)
    q = _split_heads(xn @ p[f"{prefix}.wq"], batch, sq, heads, hd)
    k = _split_heads(yn @ p[f"{prefix}.wk"], batch, skv, heads, hd)
    v = _split_heads(yn @ p[f"{prefix}.wv"], batch, skv, heads, hd)

    scores = ad.scale(q @ ad.transpose(k, (0, 2, 1)), 1.0 / np.sqrt(hd))
    weights = ad.softmax(scores, axis=-1)
    ctx = weights @ v
    ctx = ad.reshape(ctx, (batch, heads, sq, hd))
    ctx = ad.transpose(ctx, (0, 2, 1, 3))
    ctx = ad.reshape(ctx, (batch, sq, w))
    h = x + ctx @ p[f"{prefix}.wo"]

    hn = ad.layer_norm(h, p[f"{prefix}.ln_ffn.g"], p[f"{prefix}.ln_ffn.b"])
    ff = ad.relu(hn @ p[f"{prefix}.ffn.w1"] + p[f"{prefix}.ffn.b1"])
    out = h + (ff @ p[f"{prefix}.ffn.w2"] + p[f"{prefix}.ffn.b2"])
    if squeeze:
        out = ad.reshape(out, out.data.shape[1:])
    return out


# -----------------------------------------------------------------------------
# Stages
# -----------------------------------------------------------------------------


def standardize(features_train: np.ndarray, features_test: np.ndarray):
    """Z-score both splits by training-column statistics; constant columns map to zero."""
    train = np.asarray(features_train, dtype=np.float64)
    test = np.asarray(features_test, dtype=np.float64)
    if train.ndim != 2 or test.ndim != 2 or train.shape[1] != test.shape[1]:
        raise ContractViolation("feature matrices must be 2-D with matching columns")
    if train.shape[0] < 1:
        raise ContractViolation("standardize needs at least one training sample")
    if not (np.all(np.isfinite(train)) and np.all(np.isfinite(test))):
        raise ContractViolation("features contain non-finite values")
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    scale = np.where(std > 0.0, 1.0 / np.where(std > 0.0, std, 1.0), 0.0)
    return (train - mean) * scale, (test - mean) * scale


def _lift_columns(p: ModelParameters, features: np.ndarray) -> Tensor:
    """(s, d) feature values -> (d, s, width) tokens via the shared scalar lift."""
    vals = Tensor(np.ascontiguousarray(features.T)[:, :, None])
    return ad.add(ad.mul(vals, p["col.lift.w"]), p["col.lift.b"])


def embed_columns(p: ModelParameters, features_train: np.ndarray, features_test: np.ndarray):
    """Per-column distribution-aware embeddings, one vector per (sample, feature).

    Inducing vectors attend only to training values of the column; both
    train and test samples then attend to the resulting summaries, so the
    map applied to a sample does not depend on which split it sits in.
    Returns (col_train (n, d, w), col_test (m, d, w)).
    """
    n, d = np.asarray(features_train).shape
    m = np.asarray(features_test).shape[0]
    if n < 1:
        raise ContractViolation("embed_columns needs at least one training sample")
    if d < 1:
        raise ContractViolation("embed_columns needs at least one feature")
    tok_train = _lift_columns(p, np.asarray(features_train, dtype=np.float64))
    tok_test = _lift_columns(p, np.asarray(features_test, dtype=np.float64)) if m else None

    for layer in range(p.config.col_layers):
        ind = ad.expand_batch(p[f"col.{layer}.ind"], d)
        summaries = _mab(p, f"col.{layer}.ind_attn", ind, tok_train)
        new_train = _mab(p, f"col.{layer}.tok_attn", tok_train, summaries)
        if tok_test is not None:
            tok_test = _mab(p, f"col.{layer}.tok_attn", tok_test, summaries)
        tok_train = new_train

    col_train = ad.transpose(tok_train, (1, 0, 2))
    if tok_test is None:
        col_test = Tensor(np.zeros((0, d, p.config.width)))
    else:
        col_test = ad.transpose(tok_test, (1, 0, 2))
    return col_train, col_test


def embed_rows(p: ModelParameters, col_train: Tensor, col_test: Tensor):
    """Feature-wise self-attention per row, then learned-token pooling.

    (n, d, w) and (m, d, w) column embeddings -> (n, w) and (m, w) row
    embeddings; every sample is processed independently of the others.
    """
    n, m = col_train.data.shape[0], col_test.data.shape[0]
    x = ad.concat_rows(col_train, col_test) if m else col_train
    for layer in range(p.config.row_layers):
        x = _mab(p, f"row.{layer}.self", x, x)
    pool = ad.expand_batch(p["row.pool.token"], n + m)
    pooled = _mab(p, "row.pool.attn", pool, x)
    pooled = ad.reshape(pooled, (n + m, p.config.width))
    return ad.slice_rows(pooled, 0, n), ad.slice_rows(pooled, n, n + m)


def encode_labels(p: ModelParameters, labels: np.ndarray) -> Tensor:
    """Label i -> learned class vector g[y_i]; shape (n, width)."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= p.config.classes):
        raise ContractViolation(
            f"labels must lie in [0, {p.config.classes}), got range "
            f"[{labels.min()}, {labels.max()}]")
    return ad.gather_rows(p["labels.g"], labels.astype(np.intp))


def _icl_transformer(p: ModelParameters, seq: Tensor, n_ctx: int) -> Tensor:
    """Transformer where keys/values come only from the first n_ctx rows."""
    for layer in range(p.config.icl_layers):
        ctx = ad.slice_rows(seq, 0, n_ctx)
        seq = _mab(p, f"icl.{layer}.attn", seq, ctx)
    return ad.layer_norm(seq, p["icl.final_ln.g"], p["icl.final_ln.b"])


def embed_icl_asymmetric(p: ModelParameters, row_train: Tensor, row_test: Tensor,
                         labels: np.ndarray):
    """Context rows (features + label encoding) and test rows share one pass.

    Test rows attend only to context rows; the returned training embeddings
    are the transformed context rows themselves, so a training sample and
    an identical test sample generally embed differently.
    """
    n = row_train.data.shape[0]
    m = row_test.data.shape[0]
    if n < 1:
        raise ContractViolation("in-context stage needs at least one training sample")
    ctx_in = row_train + encode_labels(p, labels)
    seq = ad.concat_rows(ctx_in, row_test) if m else ctx_in
    seq = _icl_transformer(p, seq, n)
    return ad.slice_rows(seq, 0, n), ad.slice_rows(seq, n, n + m)


def embed_icl_symmetric(p: ModelParameters, row_train: Tensor, row_test: Tensor,
                        labels: np.ndarray):
    """Training samples are re-fed as label-free queries next to the test rows.

    The context block still carries the label encoding, but the returned
    training embeddings are taken from the query copies, which follow the
    exact computation path of test rows.
    """
    n = row_train.data.shape[0]
    m = row_test.data.shape[0]
    if n < 1:
        raise ContractViolation("in-context stage needs at least one training sample")
    ctx_in = row_train + encode_labels(p, labels)
    queries = ad.concat_rows(row_train, row_test) if m else row_train
    seq = ad.concat_rows(ctx_in, queries)
    seq = _icl_transformer(p, seq, n)
    return ad.slice_rows(seq, n, 2 * n), ad.slice_rows(seq, 2 * n, 2 * n + m)


def project(p: ModelParameters, embeddings: Tensor, which: str = "shared",
            unit_normalize: bool = False) -> Tensor:
    """Linear map into the kernel space, optionally unit-normalized per row."""
    matrix = {"shared": "proj.w", "query": "proj.wq", "key": "proj.wk"}.get(which)
    if matrix is None:
        raise ContractViolation(f"unknown projection '{which}'")
    if embeddings.data.shape[-1] != p.config.width:
        raise ContractViolation(
            f"projection expects width {p.config.width}, got {embeddings.data.shape[-1]}")
    out = embeddings @ p[matrix]
    if unit_normalize:
        out = ad.normalize_rows(out)
    return out


@dataclass
class EmbeddingBundle:
    """Every intermediate of one embedding pass, for inspection and export."""

    mode: str
    col_train: Tensor
    col_test: Tensor
    row_train: Tensor
    row_test: Tensor
    icl_train: Tensor
    icl_test: Tensor
    keys: Tensor
    queries: Tensor


def embed_dataset(p: ModelParameters, features_train: np.ndarray, labels_train: np.ndarray,
                  features_test: np.ndarray, mode: str = SYMMETRIC,
                  unit_normalize: bool = False) -> EmbeddingBundle:
    """Standardize, run all three stages and project to keys/queries."""
    if mode not in (SYMMETRIC, ASYMMETRIC):
        raise ContractViolation(f"unknown mode '{mode}'")
    train_std, test_std = standardize(features_train, features_test)
    col_train, col_test = embed_columns(p, train_std, test_std)
    row_train, row_test = embed_rows(p, col_train, col_test)
    if mode == SYMMETRIC:
        icl_train, icl_test = embed_icl_symmetric(p, row_train, row_test, labels_train)
        keys = project(p, icl_train, "shared", unit_normalize)
        queries = project(p, icl_test, "shared", unit_normalize)
    else:
        icl_train, icl_test = embed_icl_asymmetric(p, row_train, row_test, labels_train)
        keys = project(p, icl_train, "key", unit_normalize)
        queries = project(p, icl_test, "query", unit_normalize)
    return EmbeddingBundle(mode, col_train, col_test, row_train, row_test,
                           icl_train, icl_test, keys, queries)


# -----------------------------------------------------------------------------
# Checkpoint format: magic, version, JSON metadata, named float64 records
# -----------------------------------------------------------------------------


def save_checkpoint(params: ModelParameters, path: str, extra: dict | None = None) -> None:
    meta = {"hyperparameters": asdict(params.config), "extra": extra or {}}
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        for name, tensor in params.tensors.items():
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            dims = tensor.data.shape
            fh.write(struct.pack("<I", len(dims)))
            for dim in dims:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load_checkpoint(path: str):
    """Read a checkpoint; returns (ModelParameters, extra-metadata dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack_from("<I", view, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    meta_len = struct.unpack_from("<I", view, 8)[0]
    offset = 12
    try:
        meta = json.loads(bytes(view[offset:offset + meta_len]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise DataFormatError(f"{path}: corrupt metadata block: {err}") from err
    offset += meta_len
    config = ModelConfig(**meta["hyperparameters"])
    tensors: dict[str, Tensor] = {}
    while offset < len(blob):
        if offset + 4 > len(blob):
            raise DataFormatError(f"{path}: truncated tensor record")
        name_len = struct.unpack_from("<I", view, offset)[0]
        offset += 4
        name = bytes(view[offset:offset + name_len]).decode("utf-8")
        offset += name_len
        rank = struct.unpack_from("<I", view, offset)[0]
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", view, offset) if rank else ()
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(dims)
        offset += 8 * count
        tensors[name] = Tensor(payload.astype(np.float64), requires_grad=True, name=name)
    return ModelParameters(config, tensors), meta.get("extra", {})
