"""Query-residual token aggregation.

A bank of S learned query prototypes soft-assigns the N input tokens via a
scaled-dot-product softmax over the *token* axis, aggregates weighted
residuals against each prototype, intra-normalizes per query, and projects
the flattened result to a fixed-size L2-normalized descriptor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DegenerateInputError, DimensionError


@dataclass(frozen=True)
class VlaqConfig:
    num_queries: int = 64
    proj_dim: int = 128
    out_dim: int = 512

    def validate(self) -> None:
        if min(self.num_queries, self.proj_dim, self.out_dim) < 1:
            raise ConfigurationError(
                f"vlaq dims must be positive, got S={self.num_queries} "
                f"D={self.proj_dim} out={self.out_dim}"
            )


def init_prototypes(config: VlaqConfig, rng: np.random.Generator,
                    dtype: np.dtype = ad.DEFAULT_DTYPE) -> np.ndarray:
    """Draw the initial S x D query bank, entries N(0, 1/sqrt(D))."""
    config.validate()
    scale = 1.0 / math.sqrt(config.proj_dim)
    return rng.normal(0.0, scale, size=(config.num_queries, config.proj_dim)).astype(dtype)


def assignment_weights(tokens: ad.Tensor, prototypes: ad.Tensor) -> ad.Tensor:
    """Soft-assignment matrix alpha (N x S); every column sums to one.

    Logits are token-prototype dot products scaled by 1/sqrt(D); the softmax
    runs over the token axis, so each query distributes one unit of attention
    across the tokens rather than each token across the queries.
    """
    n_dim = tokens.value.shape[1]
    s_dim = prototypes.value.shape[1]
    if n_dim != s_dim:
        raise DimensionError(
            f"token dim {n_dim} does not match prototype dim {s_dim}"
        )
    logits = ad.scale(ad.matmul(tokens, ad.transpose(prototypes)), 1.0 / math.sqrt(n_dim))
    return ad.softmax_columns(logits)


def residual_aggregate(tokens: ad.Tensor, prototypes: ad.Tensor,
                       alpha: ad.Tensor) -> ad.Tensor:
    """Aggregate v_s = sum_n alpha[n, s] * (x_n - c_s), one row per query."""
    n = tokens.value.shape[0]
    weighted = ad.matmul(ad.transpose(alpha), tokens)
    ones = ad.as_tensor(np.ones((1, n), dtype=tokens.value.dtype))
    col_mass = ad.transpose(ad.matmul(ones, alpha))
    return ad.sub(weighted, ad.mul(prototypes, col_mass))


def vlaq_descriptor(tokens: ad.Tensor, prototypes: ad.Tensor,
                    proj_w: ad.Tensor) -> ad.Tensor:
    """Full aggregation: tokens (N x D) -> unit descriptor (1 x out_dim).

    Steps: soft assignment, residual aggregation, per-query intra-norm,
    row-major flatten to 1 x (S*D), bias-free projection, global L2 norm.
    Raises DegenerateInputError if the projected descriptor is all zeros.
    """
    s, d = prototypes.value.shape
    if proj_w.value.shape[0] != s * d:
        raise DimensionError(
            f"projection expects {s * d} inputs, got {proj_w.value.shape[0]}"
        )
    alpha = assignment_weights(tokens, prototypes)
    residuals = residual_aggregate(tokens, prototypes, alpha)
    intra = ad.l2_normalize_rows(residuals)
    flat = ad.reshape(intra, (1, s * d))
    return ad.l2_normalize(ad.matmul(flat, proj_w))


def brute_force_vlaq(tokens: np.ndarray, prototypes: np.ndarray,
                     proj_w: np.ndarray) -> np.ndarray:
    """Reference aggregation with explicit loops and naive exp; for testing.

    Mirrors vlaq_descriptor including the degenerate-row conventions, but
    shares none of its code path.
    """
    n, d = tokens.shape
    s = prototypes.shape[0]
    logits = [[0.0] * s for _ in range(n)]
    for i in range(n):
        for q in range(s):
            acc = 0.0
            for j in range(d):
                acc += float(tokens[i, j]) * float(prototypes[q, j])
            logits[i][q] = acc / math.sqrt(d)

    alpha = [[0.0] * s for _ in range(n)]
    for q in range(s):
        peak = max(logits[i][q] for i in range(n))
        denom = 0.0
        for i in range(n):
            denom += math.exp(logits[i][q] - peak)
        for i in range(n):
            alpha[i][q] = math.exp(logits[i][q] - peak) / denom

    residuals = [[0.0] * d for _ in range(s)]
    for q in range(s):
        for j in range(d):
            acc = 0.0
            for i in range(n):
                acc += alpha[i][q] * (float(tokens[i, j]) - float(prototypes[q, j]))
            residuals[q][j] = acc

    for q in range(s):
        norm = math.sqrt(sum(residuals[q][j] ** 2 for j in range(d)))
        if norm <= 1e-12:
            for j in range(d):
                residuals[q][j] = 0.0
        else:
            for j in range(d):
                residuals[q][j] /= norm

    flat = [residuals[q][j] for q in range(s) for j in range(d)]
    out_dim = proj_w.shape[1]
    out = [0.0] * out_dim
    for k in range(out_dim):
        acc = 0.0
        for m in range(s * d):
            acc += flat[m] * float(proj_w[m, k])
        out[k] = acc

    norm = math.sqrt(sum(v * v for v in out))
    if norm <= 1e-12:
        raise DegenerateInputError("descriptor norm vanished in reference aggregation")
    return np.array([[v / norm for v in out]], dtype=np.float64)
