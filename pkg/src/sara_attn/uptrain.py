"""Up-training: distil a frozen softmax-attention teacher into a SARA student.

The student replaces ``softmax(Q K^T) V`` with linear attention over the
feature maps ``v * f(G_Q x)`` and ``v * f(G_K y)`` applied to raw token
embeddings. Only ``(v, G_Q, G_K)`` are trained; the teacher projections stay
untouched. Gradients are derived by hand (reverse mode through the linear
attention accumulators) and checked against finite differences in the test
suite.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .attention import (
    AttentionLayerParams,
    AttentionOutput,
    DegenerateRow,
    NotADistribution,
    exact_softmax_attention,
    kernel_attention_linear,
)
from .feature_maps import ACTIVATIONS, FeatureMapSpec, SaraParams, canonical_function, sara_from_theorem
from .numerics import DimensionMismatch, SeededRng, as_matrix, gaussian_matrix, normalize_rows_to_radius

log = logging.getLogger(__name__)

LOSSES = ("output_mse", "row_kl")
INITS = ("gaussian_scaled", "theorem_construction", "teacher_projections")
DIVERGENCE_LIMIT = 1e6


class DivergenceDetected(RuntimeError):
    pass


@dataclass(frozen=True)
class DistillationConfig:
    f: str = "relu"
    m: int = 8
    init: str = "gaussian_scaled"
    sigma_init: float | None = None  # defaults to 1/sqrt(d)
    A: float = -1.0
    loss: str = "output_mse"
    learning_rate: float = 1e-2
    momentum: float = 0.9
    steps: int = 500
    batch: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "f", canonical_function(self.f))
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch < 1 or self.m < 1:
            raise ValueError("batch and m must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.init == "theorem_construction" and (self.f != "exp" or not self.A < 0):
            raise ValueError("theorem_construction needs f='exp' and A < 0")


@dataclass(frozen=True, eq=False)
class Batch:
    """One token set. ``Xq`` defaults to ``X`` (self-attention)."""

    X: np.ndarray
    V: np.ndarray
    Xq: np.ndarray | None = None

    @property
    def queries(self) -> np.ndarray:
        return self.X if self.Xq is None else self.Xq


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    final_params: SaraParams | None = None


class SyntheticTokens:
    """Unit-normalised Gaussian token sets with values ``X @ W_V``.

    By default the same ``batch`` token sets are served every step (full
    batch descent on a fixed training set). ``resample=True`` draws fresh
    token sets each step instead.
    """

    def __init__(self, rng: SeededRng, n_tokens: int, d: int, batch: int, W_V=None, resample: bool = False):
        self.rng = rng
        self.n_tokens, self.d, self.batch = n_tokens, d, batch
        self.W_V = np.eye(d) if W_V is None else as_matrix(W_V, "W_V")
        self.resample = resample

    def _draw(self, label: str) -> list[Batch]:
        sub = self.rng.child(label)
        out = []
        for b in range(self.batch):
            X = normalize_rows_to_radius(gaussian_matrix(sub.child(f"X{b}"), self.n_tokens, self.d), 1.0)
            out.append(Batch(X, X @ self.W_V))
        return out

    def __iter__(self) -> Iterator[list[Batch]]:
        fixed = None if self.resample else self._draw("fixed")
        step = 0
        while True:
            yield fixed if fixed is not None else self._draw(f"step{step}")
            step += 1


def random_teacher(rng: SeededRng, d: int, d_qk: int | None = None, scale: float = 1.0) -> AttentionLayerParams:
    """Teacher with Gaussian projections scaled by ``scale / sqrt(d)``."""
    d_qk = d if d_qk is None else d_qk
    W_Q = scale * gaussian_matrix(rng.child("W_Q"), d, d_qk) / math.sqrt(d)
    W_K = scale * gaussian_matrix(rng.child("W_K"), d, d_qk) / math.sqrt(d)
    return AttentionLayerParams(W_Q, W_K)


def teacher_forward(layer: AttentionLayerParams, X, V, Xq=None) -> AttentionOutput:
    X = as_matrix(X, "X")
    Xq = X if Xq is None else as_matrix(Xq, "Xq")
    return exact_softmax_attention(Xq @ layer.W_Q, X @ layer.W_K, V)


def student_specs(params: SaraParams, f: str) -> tuple[FeatureMapSpec, FeatureMapSpec]:
    return FeatureMapSpec.sara(f, "query", params), FeatureMapSpec.sara(f, "key", params)


def student_forward(params: SaraParams, f: str, X, V, Xq=None, scores: bool = False) -> AttentionOutput:
    phi_q, phi_k = student_specs(params, f)
    X = as_matrix(X, "X")
    Xq = X if Xq is None else Xq
    return kernel_attention_linear(phi_q, phi_k, Xq, X, V, debug_scores=scores)


def _row_kl(P: np.ndarray, S: np.ndarray) -> float:
    """Mean over rows of KL(P_i || S_i) with 0 log 0 = 0."""
    mask = P > 0
    with np.errstate(divide="ignore"):
        terms = np.where(mask, P * (np.log(np.where(mask, P, 1.0)) - np.log(np.where(mask, S, 1.0))), 0.0)
    return float(terms.sum(axis=1).mean())


def distill_loss(kind: str, student_out: AttentionOutput, teacher_out: AttentionOutput) -> float:
    if kind == "output_mse":
        if student_out.values.shape != teacher_out.values.shape:
            raise DimensionMismatch(f"{student_out.values.shape} vs {teacher_out.values.shape}")
        return float(np.mean((student_out.values - teacher_out.values) ** 2))
    if kind == "row_kl":
        S, P = student_out.scores, teacher_out.scores
        if S is None or P is None:
            raise NotADistribution("row_kl needs score matrices on both sides")
        if S.shape != P.shape:
            raise DimensionMismatch(f"{S.shape} vs {P.shape}")
        for mat in (S, P):
            if np.any(mat < 0) or np.max(np.abs(mat.sum(axis=1) - 1.0)) > 1e-8:
                raise NotADistribution("score rows must be nonnegative and sum to 1")
        return _row_kl(P, S)
    raise ValueError(f"unknown loss {kind!r}")


def loss_and_grad(params: SaraParams, f: str, batch: Batch, teacher_out: AttentionOutput, loss_kind: str):
    """Loss of one token set and its gradient as a flat (v, G_Q, G_K) vector."""
    act, act_grad = ACTIVATIONS[canonical_function(f)]
    Xk, Xq, V = batch.X, batch.queries, batch.V
    v = params.v
    Hq, Hk = Xq @ params.G_Q.T, Xk @ params.G_K.T
    Aq, Ak = act(Hq), act(Hk)
    Fq, Fk = Aq * v, Ak * v

    if loss_kind == "output_mse":
        psi = V.T @ Fk
        gamma = Fk.sum(axis=0)
        den = Fq @ gamma
        if np.any(den <= 1e-12):
            raise DegenerateRow(int(np.argmin(den)), float(den.min()))
        out = (Fq @ psi.T) / den[:, None]
        resid = out - teacher_out.values
        loss = float(np.mean(resid**2))
        g_out = 2.0 * resid / resid.size
        g_num = g_out / den[:, None]
        g_den = -np.sum(g_out * out, axis=1) / den
        g_Fq = g_num @ psi + np.outer(g_den, gamma)
        g_psi = g_num.T @ Fq
        g_gamma = Fq.T @ g_den
        g_Fk = V @ g_psi + g_gamma[None, :]
    elif loss_kind == "row_kl":
        S = Fq @ Fk.T
        R = S.sum(axis=1)
        if np.any(R <= 1e-12):
            raise DegenerateRow(int(np.argmin(R)), float(R.min()))
        P = teacher_out.scores
        mask = P > 0
        if np.any(mask & (S <= 0)):
            raise DivergenceDetected("student gives zero score where the teacher does not; row KL is infinite")
        loss = _row_kl(P, S / R[:, None])
        ratio = np.where(mask, P / np.where(mask, S, 1.0), 0.0)
        g_S = (1.0 / R[:, None] - ratio) / S.shape[0]
        g_Fq = g_S @ Fk
        g_Fk = g_S.T @ Fq
    else:
        raise ValueError(f"unknown loss {loss_kind!r}")

    g_v = np.sum(g_Fq * Aq, axis=0) + np.sum(g_Fk * Ak, axis=0)
    g_GQ = (g_Fq * v * act_grad(Hq)).T @ Xq
    g_GK = (g_Fk * v * act_grad(Hk)).T @ Xk
    return loss, np.concatenate([g_v, g_GQ.ravel(), g_GK.ravel()])


def grad_params(params: SaraParams, f: str, X, V, teacher_out: AttentionOutput, loss_kind: str, Xq=None) -> SaraParams:
    """Exact gradient of ``distill_loss`` w.r.t. (v, G_Q, G_K)."""
    batch = Batch(as_matrix(X, "X"), as_matrix(V, "V"), None if Xq is None else as_matrix(Xq, "Xq"))
    _, flat = loss_and_grad(params, f, batch, teacher_out, loss_kind)
    return SaraParams.from_flat(flat, params.m, params.d)


def init_params(config: DistillationConfig, layer: AttentionLayerParams, d: int) -> SaraParams:
    rng = SeededRng(config.seed).child("init")
    m = config.m
    if config.init == "gaussian_scaled":
        sigma = config.sigma_init if config.sigma_init is not None else 1.0 / math.sqrt(d)
        G_Q = sigma * gaussian_matrix(rng.child("G_Q"), m, d)
        G_K = sigma * gaussian_matrix(rng.child("G_K"), m, d)
        return SaraParams(np.ones(m), G_Q, G_K)
    if config.init == "teacher_projections":
        if m != layer.d_qk:
            raise DimensionMismatch(f"teacher_projections init needs m == d_QK == {layer.d_qk}")
        return SaraParams(np.ones(m), layer.W_Q.T, layer.W_K.T)
    G = gaussian_matrix(rng.child("G"), m, layer.d_qk)
    return sara_from_theorem(G, layer.W_Q, layer.W_K, config.A)


def batch_loss_and_grad(params, config, layer, batches):
    total, grad = 0.0, np.zeros(params.flat().shape)
    for b in batches:
        teacher = teacher_forward(layer, b.X, b.V, b.Xq)
        loss, g = loss_and_grad(params, config.f, b, teacher, config.loss)
        total += loss
        grad += g
    n = len(batches)
    return total / n, grad / n


def uptrain(config: DistillationConfig, layer: AttentionLayerParams, data, init: SaraParams | None = None) -> TrainHistory:
    """Gradient descent with momentum on (v, G_Q, G_K).

    ``data`` is an iterable yielding, per step, a list of ``Batch`` token
    sets. ``history.loss[k]`` is the loss of the parameters before the k-th
    update, so ``loss[0]`` is the loss at initialisation.
    """
    d = layer.d
    params = init if init is not None else init_params(config, layer, d)
    m = params.m
    theta = params.flat()
    velocity = np.zeros_like(theta)
    history = TrainHistory()
    batches_iter = iter(data)
    for step in range(config.steps):
        batches = next(batches_iter)
        params = SaraParams.from_flat(theta, m, d)
        loss, grad = batch_loss_and_grad(params, config, layer, batches)
        if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise DivergenceDetected(f"loss {loss!r} at step {step}")
        history.loss.append(loss)
        history.grad_norm.append(float(np.linalg.norm(grad)))
        velocity = config.momentum * velocity + grad
        theta = theta - config.learning_rate * velocity
        if step % 100 == 0:
            log.debug("step %d loss %.6g", step, loss)
    history.final_params = SaraParams.from_flat(theta, m, d)
    return history
