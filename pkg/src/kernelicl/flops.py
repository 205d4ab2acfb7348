"""Static FLOP model of the embedding pipeline.

Counts matrix-product FLOPs only (2*M*K*N per product, including the
attention score and weighted-sum products), mirroring the backbone
structure call for call: per column layer an inducing block over training
values plus token blocks for both splits, per row layer one self-attention
block plus the pooling block, and per in-context layer one block whose
keys and values come from the n context rows. Elementwise work (lifts,
layer norms, softmax) is excluded, as is the final projection, which costs
the same in both modes.
"""

from __future__ import annotations

from .backbone import ASYMMETRIC, SYMMETRIC, ModelConfig
from .errors import ContractViolation


def mab_flops(batch: int, sq: int, skv: int, config: ModelConfig) -> int:
    """One pre-LN cross-attention block: projections, attention, FFN."""
    w, f = config.width, config.ffn_hidden
    per = 0
    per += 2 * sq * w * w            # query projection
    per += 2 * skv * w * w * 2       # key and value projections
    per += 2 * sq * w * skv          # attention scores, all heads
    per += 2 * sq * skv * w          # weighted sum, all heads
    per += 2 * sq * w * w            # output projection
    per += 2 * sq * w * f * 2        # FFN in and out
    return batch * per


def column_stage_flops(n: int, m: int, d: int, config: ModelConfig) -> int:
    total = 0
    for _ in range(config.col_layers):
        total += mab_flops(d, config.inducing, n, config)
        total += mab_flops(d, n, config.inducing, config)
        if m:
            total += mab_flops(d, m, config.inducing, config)
    return total


def row_stage_flops(n: int, m: int, d: int, config: ModelConfig) -> int:
    total = config.row_layers * mab_flops(n + m, d, d, config)
    total += mab_flops(n + m, 1, d, config)
    return total


def icl_stage_flops(n: int, m: int, config: ModelConfig, mode: str) -> int:
    rows = 2 * n + m if mode == SYMMETRIC else n + m
    return config.icl_layers * mab_flops(1, rows, n, config)


def embedding_flops(n: int, m: int, d: int, config: ModelConfig, mode: str) -> int:
    """Exact matmul FLOPs of one embedding pass in the given mode."""
    if mode not in (SYMMETRIC, ASYMMETRIC):
        raise ContractViolation(f"unknown mode '{mode}'")
    if n < 1 or d < 1 or m < 0:
        raise ContractViolation("embedding_flops requires n >= 1, d >= 1, m >= 0")
    return (column_stage_flops(n, m, d, config)
            + row_stage_flops(n, m, d, config)
            + icl_stage_flops(n, m, config, mode))


def flop_ratio(n: int, m: int, d: int, config: ModelConfig) -> float:
    """Symmetric / asymmetric embedding cost."""
    return embedding_flops(n, m, d, config, SYMMETRIC) / embedding_flops(n, m, d, config, ASYMMETRIC)


def estimate_embedding_bytes(n: int, m: int, d: int, config: ModelConfig, mode: str) -> int:
    """Generous peak-memory estimate for one forward pass (float64 buffers)."""
    w, h = config.width, config.heads
    rows = 2 * n + m if mode == SYMMETRIC else n + m
    tokens = 8 * d * (n + m) * w * 8                 # column-stage activations
    row_attn = 4 * (n + m) * h * d * d * 8           # row-stage attention maps
    icl_attn = 4 * h * rows * n * 8                  # in-context attention maps
    icl_act = 8 * rows * w * 8
    return tokens + row_attn + icl_attn + icl_act
