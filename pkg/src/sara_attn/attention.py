"""Exact softmax attention and kernel attention (quadratic and linear paths).

The quadratic path materialises the M x N matrix of feature dot products and
is the oracle for the linear path, which only ever builds

    Psi   = sum_j V_j phi(k_j)^T     (d_v x m)
    Gamma = sum_j phi(k_j)           (m,)

and returns ``Psi phi(q_i) / Gamma . phi(q_i)`` for every query.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feature_maps import FeatureMapSpec, apply_feature_map, feature_flops
from .numerics import DimensionMismatch, as_matrix, as_vector

EPS_DENOM = 1e-12


class DegenerateRow(ArithmeticError):
    def __init__(self, row: int, value: float):
        super().__init__(f"query row {row} has normalizer {value:.3e} <= {EPS_DENOM:g}")
        self.row = row
        self.value = value


class NotADistribution(ValueError):
    pass


@dataclass(frozen=True)
class FlopTally:
    quadratic_flops: int = 0
    linear_flops: int = 0

    @property
    def total(self) -> int:
        return self.quadratic_flops + self.linear_flops


@dataclass(frozen=True, eq=False)
class AttentionOutput:
    """Attention result.

    ``denominators`` holds the per-query normalizer. For the softmax engine
    it is the max-shifted sum ``sum_l exp(q.k_l - max_l q.k_l)``, which is
    always in [1, N].
    """

    values: np.ndarray
    denominators: np.ndarray
    scores: np.ndarray | None = None
    flops: FlopTally | None = None


@dataclass(frozen=True, eq=False)
class AttentionLayerParams:
    """Frozen teacher projections: queries are ``X @ W_Q``, keys ``X @ W_K``.

    ``W_V`` is optional; when given, values default to ``X @ W_V``.
    """

    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray | None = None

    def __post_init__(self):
        wq = as_matrix(self.W_Q, "W_Q")
        wk = as_matrix(self.W_K, "W_K")
        if wq.shape != wk.shape:
            raise DimensionMismatch(f"W_Q {wq.shape} and W_K {wk.shape} differ")
        object.__setattr__(self, "W_Q", wq)
        object.__setattr__(self, "W_K", wk)
        if self.W_V is not None:
            wv = as_matrix(self.W_V, "W_V")
            if wv.shape[0] != wq.shape[0]:
                raise DimensionMismatch("W_V must take the same input dimension as W_Q")
            object.__setattr__(self, "W_V", wv)

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]

    @property
    def d_qk(self) -> int:
        return self.W_Q.shape[1]


def _check_shapes(Q, K, V):
    if Q.shape[1] != K.shape[1]:
        raise DimensionMismatch(f"query dim {Q.shape[1]} != key dim {K.shape[1]}")
    if K.shape[0] != V.shape[0]:
        raise DimensionMismatch(f"{K.shape[0]} keys but {V.shape[0]} value rows")
    if K.shape[0] < 1:
        raise DimensionMismatch("need at least one key")


def exact_softmax_attention(Q, K, V, profile: bool = False) -> AttentionOutput:
    Q, K, V = as_matrix(Q, "Q"), as_matrix(K, "K"), as_matrix(V, "V")
    _check_shapes(Q, K, V)
    logits = Q @ K.T
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    den = weights.sum(axis=1)
    scores = weights / den[:, None]
    values = scores @ V
    flops = None
    if profile:
        M, N, d = Q.shape[0], K.shape[0], Q.shape[1]
        flops = FlopTally(quadratic_flops=2 * M * N * d + 4 * M * N + 2 * M * N * V.shape[1])
    return AttentionOutput(values, den, scores, flops)


def _features(phi_q: FeatureMapSpec, phi_k: FeatureMapSpec, Xq, Xk, V):
    Xq, Xk, V = as_matrix(Xq, "Xq"), as_matrix(Xk, "Xk"), as_matrix(V, "V")
    if phi_q.output_dim != phi_k.output_dim:
        raise DimensionMismatch(
            f"query map has m={phi_q.output_dim}, key map has m={phi_k.output_dim}"
        )
    if Xk.shape[0] != V.shape[0]:
        raise DimensionMismatch(f"{Xk.shape[0]} keys but {V.shape[0]} value rows")
    if Xk.shape[0] < 1:
        raise DimensionMismatch("need at least one key")
    return apply_feature_map(phi_q, Xq), apply_feature_map(phi_k, Xk), V


def _guard(den: np.ndarray, stabilizer: float) -> np.ndarray:
    if stabilizer:
        den = den + stabilizer
    bad = np.flatnonzero(~(den > EPS_DENOM))
    if bad.size:
        raise DegenerateRow(int(bad[0]), float(den[bad[0]]))
    return den


def kernel_attention_quadratic(
    phi_q: FeatureMapSpec, phi_k: FeatureMapSpec, Xq, Xk, V, stabilizer: float = 0.0, profile: bool = False
) -> AttentionOutput:
    """Kernel attention through the full M x N Gram matrix of features."""
    Fq, Fk, V = _features(phi_q, phi_k, Xq, Xk, V)
    gram = Fq @ Fk.T
    den = _guard(gram.sum(axis=1), stabilizer)
    scores = gram / den[:, None]
    values = scores @ V
    flops = None
    if profile:
        M, N, m, dv = Fq.shape[0], Fk.shape[0], Fq.shape[1], V.shape[1]
        flops = FlopTally(
            quadratic_flops=feature_flops(phi_q, M)
            + feature_flops(phi_k, N)
            + 2 * M * N * m
            + 2 * M * N
            + 2 * M * N * dv
        )
    return AttentionOutput(values, den, scores, flops)


def kernel_attention_linear(
    phi_q: FeatureMapSpec,
    phi_k: FeatureMapSpec,
    Xq,
    Xk,
    V,
    stabilizer: float = 0.0,
    profile: bool = False,
    debug_scores: bool = False,
) -> AttentionOutput:
    """Kernel attention in O(M + N): no M x N intermediate is formed.

    With ``debug_scores`` the score matrix is additionally rebuilt through
    the quadratic path, which costs O(MN) and is meant for inspection only.
    """
    Fq, Fk, V = _features(phi_q, phi_k, Xq, Xk, V)
    psi = V.T @ Fk
    gamma = Fk.sum(axis=0)
    den = _guard(Fq @ gamma, stabilizer)
    values = (Fq @ psi.T) / den[:, None]
    scores = None
    if debug_scores:
        scores = (Fq @ Fk.T) / den[:, None]
    flops = None
    if profile:
        M, N, m, dv = Fq.shape[0], Fk.shape[0], Fq.shape[1], V.shape[1]
        flops = FlopTally(
            linear_flops=feature_flops(phi_q, M)
            + feature_flops(phi_k, N)
            + 2 * N * m * dv
            + N * m
            + 2 * M * m * dv
            + 2 * M * m
            + M * dv
        )
    return AttentionOutput(values, den, scores, flops)


def check_distribution(row, tol: float = 1e-8) -> np.ndarray:
    row = as_vector(row, "scores")
    if row.size == 0 or np.any(row < 0) or abs(row.sum() - 1.0) > tol:
        raise NotADistribution(f"scores must be nonnegative and sum to 1 (sum={row.sum() if row.size else 0})")
    return row


def entropy(row) -> float:
    row = np.asarray(row, dtype=np.float64)
    nz = row[row > 0]
    return float(-np.sum(nz * np.log(nz)))


def top_k_indices(row, k: int) -> list[int]:
    """Indices of the k largest entries; ties go to the lower index."""
    order = np.argsort(-np.asarray(row), kind="stable")
    return [int(i) for i in order[:k]]


def score_stats(scores_row, k: int = 3) -> dict:
    row = check_distribution(scores_row)
    return {
        "entropy": entropy(row),
        "max_score": float(row.max()),
        "top_k_indices": top_k_indices(row, k),
    }
