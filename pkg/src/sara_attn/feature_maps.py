"""Feature maps phi: R^d -> R^m used by kernel (linear) attention.

Five kinds are supported:

* ``identity``      phi(z) = z
* ``elementwise``   phi(z) = f(z) coordinate-wise
* ``randomized``    phi(z) = f(G z) with a fixed projection G (m x d)
* ``positive_rf``   phi(z) = m^{-1/2} exp(-|z|^2 / 2) exp(G z)
* ``sara``          phi(z) = v * f(G_side z), learnable v, G_Q, G_K acting on
                    raw token embeddings

``f`` is one of ``relu``, ``exp`` or ``square`` (x -> x^2; sometimes written
"sqrt" in the literature, but the map used is the square).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import DimensionMismatch, as_matrix, as_vector, read_mat1, write_mat1

KINDS = ("identity", "elementwise", "randomized", "positive_rf", "sara")
SIDES = ("query", "key")


class FeatureOverflow(FloatingPointError):
    """A feature map produced a non-finite entry (typically exp overflow)."""


class NonNegativeA(ValueError):
    pass


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x):
    # subgradient 0 at the kink
    return (x > 0).astype(np.float64)


def square(x):
    return x * x


def square_grad(x):
    return 2.0 * x


ACTIVATIONS = {
    "relu": (relu, relu_grad),
    "exp": (np.exp, np.exp),
    "square": (square, square_grad),
}
FUNCTION_ALIASES = {"sqrt": "square", "ReLU": "relu", "Exp": "exp", "Square": "square"}


def canonical_function(f: str) -> str:
    f = FUNCTION_ALIASES.get(f, f)
    if f not in ACTIVATIONS:
        raise ValueError(f"unknown feature function {f!r}; expected one of {sorted(ACTIVATIONS)}")
    return f


@dataclass(frozen=True, eq=False)
class SaraParams:
    """Trainable triple (v, G_Q, G_K); G_Q, G_K have shape (m, d)."""

    v: np.ndarray
    G_Q: np.ndarray
    G_K: np.ndarray

    def __post_init__(self):
        v = as_vector(self.v, "v")
        gq = as_matrix(self.G_Q, "G_Q")
        gk = as_matrix(self.G_K, "G_K")
        if gq.shape != gk.shape:
            raise DimensionMismatch(f"G_Q {gq.shape} and G_K {gk.shape} differ")
        if v.shape[0] != gq.shape[0]:
            raise DimensionMismatch(f"v has length {v.shape[0]}, G_Q has {gq.shape[0]} rows")
        for name, arr in (("v", v), ("G_Q", gq), ("G_K", gk)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def m(self) -> int:
        return self.G_Q.shape[0]

    @property
    def d(self) -> int:
        return self.G_Q.shape[1]

    def projection(self, side: str) -> np.ndarray:
        return self.G_Q if side == "query" else self.G_K

    def flat(self) -> np.ndarray:
        return np.concatenate([self.v, self.G_Q.ravel(), self.G_K.ravel()])

    @classmethod
    def from_flat(cls, flat, m: int, d: int) -> "SaraParams":
        flat = np.asarray(flat, dtype=np.float64)
        return cls(flat[:m], flat[m : m + m * d].reshape(m, d), flat[m + m * d :].reshape(m, d))


@dataclass(frozen=True, eq=False)
class FeatureMapSpec:
    kind: str
    input_dim: int
    output_dim: int
    f: str | None = None
    projection: np.ndarray | None = None
    side: str | None = None
    params: SaraParams | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature map kind {self.kind!r}")
        if self.f is not None:
            object.__setattr__(self, "f", canonical_function(self.f))
        if self.kind in ("elementwise", "randomized", "sara") and self.f is None:
            raise ValueError(f"{self.kind} feature map needs a function f")
        if self.kind in ("identity", "elementwise") and self.output_dim != self.input_dim:
            raise DimensionMismatch("elementwise maps preserve dimension")
        if self.kind in ("randomized", "positive_rf"):
            G = as_matrix(self.projection, "projection")
            if G.shape != (self.output_dim, self.input_dim):
                raise DimensionMismatch(
                    f"projection has shape {G.shape}, expected {(self.output_dim, self.input_dim)}"
                )
            G = G.copy()
            G.setflags(write=False)
            object.__setattr__(self, "projection", G)
        if self.kind == "sara":
            if self.side not in SIDES:
                raise ValueError(f"sara side must be one of {SIDES}")
            if self.params is None or (self.params.m, self.params.d) != (self.output_dim, self.input_dim):
                raise DimensionMismatch("sara params do not match declared dimensions")

    @classmethod
    def identity(cls, d: int) -> "FeatureMapSpec":
        return cls("identity", d, d)

    @classmethod
    def elementwise(cls, f: str, d: int) -> "FeatureMapSpec":
        return cls("elementwise", d, d, f=f)

    @classmethod
    def randomized(cls, f: str, G) -> "FeatureMapSpec":
        G = as_matrix(G, "projection")
        return cls("randomized", G.shape[1], G.shape[0], f=f, projection=G)

    @classmethod
    def positive_rf(cls, G) -> "FeatureMapSpec":
        G = as_matrix(G, "projection")
        return cls("positive_rf", G.shape[1], G.shape[0], projection=G)

    @classmethod
    def sara(cls, f: str, side: str, params: SaraParams) -> "FeatureMapSpec":
        return cls("sara", params.d, params.m, f=f, side=side, params=params)

    def describe(self) -> str:
        if self.kind in ("identity", "positive_rf"):
            return f"{self.kind}(m={self.output_dim})"
        return f"{self.kind}[{self.f}](m={self.output_dim})"


def pre_activation(spec: FeatureMapSpec, Z: np.ndarray) -> np.ndarray:
    """The linear part of the map (before f): Z, Z G^T or Z G_side^T."""
    if spec.kind in ("identity", "elementwise"):
        return Z
    if spec.kind == "sara":
        return Z @ spec.params.projection(spec.side).T
    return Z @ spec.projection.T


def apply_feature_map(spec: FeatureMapSpec, Z) -> np.ndarray:
    """Evaluate ``spec`` on every row of ``Z`` (n x d), returning n x m."""
    Z = as_matrix(Z, "Z")
    if Z.shape[1] != spec.input_dim:
        raise DimensionMismatch(f"input has dim {Z.shape[1]}, feature map expects {spec.input_dim}")
    H = pre_activation(spec, Z)
    with np.errstate(over="ignore", invalid="ignore"):
        if spec.kind == "identity":
            out = H.copy()
        elif spec.kind == "positive_rf":
            sq = 0.5 * np.einsum("ij,ij->i", Z, Z)
            out = np.exp(H - sq[:, None]) / np.sqrt(spec.output_dim)
        else:
            out = ACTIVATIONS[spec.f][0](H)
            if spec.kind == "sara":
                out = out * spec.params.v
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(out))[0]
        raise FeatureOverflow(f"{spec.describe()} produced a non-finite value at row {bad[0]}, column {bad[1]}")
    return out


def feature_flops(spec: FeatureMapSpec, n: int) -> int:
    """Arithmetic operations spent by ``apply_feature_map`` on n rows."""
    m, d = spec.output_dim, spec.input_dim
    if spec.kind == "identity":
        return 0
    if spec.kind == "elementwise":
        return n * m
    proj = 2 * n * m * d
    if spec.kind == "positive_rf":
        return proj + 2 * n * d + 3 * n * m
    if spec.kind == "sara":
        return proj + 2 * n * m
    return proj + n * m


def sara_from_theorem(G, W_Q, W_K, A: float) -> SaraParams:
    """Explicit SARA parameters that make exp features unbiased for softmax.

    ``G`` is m x d_QK Gaussian, ``W_Q``/``W_K`` are d x d_QK so queries are
    ``X @ W_Q``. With ``s = 1 - 4A`` this returns ``G_Q = sqrt(s) G W_Q^T``,
    ``G_K = sqrt(s) G W_K^T`` (m x d, acting on raw embeddings) and
    ``v_i = s^(d_QK/4) exp(A |g_i|^2)``. For queries/keys of norm r,
    ``phi_Q(x) . phi_K(y) / (m e^{r^2})`` is then an unbiased estimate of
    ``exp(q . k)``. A = 0 would reduce to plain ``exp(G q)`` features with
    v = 1 and is rejected, as the construction requires A < 0.
    """
    if not A < 0:
        raise NonNegativeA(f"A must be negative, got {A}")
    G = as_matrix(G, "G")
    W_Q = as_matrix(W_Q, "W_Q")
    W_K = as_matrix(W_K, "W_K")
    if W_Q.shape != W_K.shape:
        raise DimensionMismatch(f"W_Q {W_Q.shape} and W_K {W_K.shape} differ")
    d_qk = G.shape[1]
    if W_Q.shape[1] != d_qk:
        raise DimensionMismatch(f"G has {d_qk} columns but W_Q projects to {W_Q.shape[1]}")
    s = 1.0 - 4.0 * A
    scale = np.sqrt(s)
    v = s ** (d_qk / 4.0) * np.exp(A * np.sum(G * G, axis=1))
    return SaraParams(v, scale * G @ W_Q.T, scale * G @ W_K.T)


def save_sara_params(directory, params: SaraParams, f: str, A: float | None = None) -> None:
    """Write v.mat1, G_Q.mat1, G_K.mat1 and a sara.json sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_mat1(directory / "v.mat1", params.v[None, :])
    write_mat1(directory / "G_Q.mat1", params.G_Q)
    write_mat1(directory / "G_K.mat1", params.G_K)
    sidecar = {"m": params.m, "d": params.d, "f": canonical_function(f), "A_if_constructed": A}
    (directory / "sara.json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_sara_params(directory) -> tuple[SaraParams, dict]:
    directory = Path(directory)
    meta = json.loads((directory / "sara.json").read_text())
    v = read_mat1(directory / "v.mat1")
    params = SaraParams(v.ravel(), read_mat1(directory / "G_Q.mat1"), read_mat1(directory / "G_K.mat1"))
    if (params.m, params.d) != (meta["m"], meta["d"]):
        raise DimensionMismatch("sidecar dimensions disagree with stored matrices")
    return params, meta
