"""Monte Carlo and closed-form checks of the softmax-kernel estimators.

The estimator under study is

    K_hat(x, y) = exp(G x) . exp(G y) / (m exp(r^2)),   G ~ N(0, 1)^{m x d}

for x, y of common norm r. It is unbiased for exp(x . y), its variance has a
closed form, and Chebyshev's inequality turns that variance into a tail
bound. The SARA construction built by ``sara_from_theorem`` inherits the
same normalisation and yields an explicit linear-attention approximation of
a softmax layer with ``theorem_m`` random features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionLayerParams, exact_softmax_attention, kernel_attention_linear
from .feature_maps import FeatureMapSpec, apply_feature_map, sara_from_theorem
from .numerics import DimensionMismatch, SeededRng, as_matrix, as_vector, gaussian_matrix

NORM_TOL = 1e-9
CHUNK = 4096


class NormMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorReport:
    target: float
    mc_mean: float
    mc_stderr: float
    trials: int
    m: int

    def within(self, n_stderr: float = 4.0) -> bool:
        """|mean - target| <= n_stderr * stderr, plus a rounding allowance.

        The allowance (64 ulps of the target) only matters in zero-variance
        cases such as x = -y, where the sample stderr collapses to ~1e-19.
        """
        slack = 64 * np.finfo(float).eps * abs(self.target)
        return bool(abs(self.mc_mean - self.target) <= n_stderr * self.mc_stderr + slack)


@dataclass(frozen=True)
class TheoremSetting:
    tau: float
    rho: float
    delta: float
    M: int
    N: int
    r: float
    A: float

    def __post_init__(self):
        if not 0 < self.tau <= self.rho:
            raise ValueError(f"need 0 < tau <= rho, got tau={self.tau}, rho={self.rho}")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.A < 0:
            raise ValueError("A must be negative")
        if self.M < 1 or self.N < 1 or not self.r > 0:
            raise ValueError("M, N must be >= 1 and r > 0")


@dataclass
class TheoremReport:
    errors_per_seed: list[float]
    m_used: int
    delta: float
    tau: float
    rho: float
    kernel_rel_errors: list[float] = field(default_factory=list)

    @property
    def fraction_within_delta(self) -> float:
        return float(np.mean([e <= self.delta for e in self.errors_per_seed]))

    @property
    def median_error(self) -> float:
        return float(np.median(self.errors_per_seed))


def softmax_kernel(x, y) -> float:
    x, y = as_vector(x, "x"), as_vector(y, "y")
    if x.shape != y.shape:
        raise DimensionMismatch(f"{x.shape} vs {y.shape}")
    return float(np.exp(x @ y))


def _common_radius(x, y) -> float:
    x, y = as_vector(x, "x"), as_vector(y, "y")
    if x.shape != y.shape:
        raise DimensionMismatch(f"{x.shape} vs {y.shape}")
    rx, ry = np.linalg.norm(x), np.linalg.norm(y)
    if abs(rx - ry) > NORM_TOL * max(rx, ry, 1.0):
        raise NormMismatch(f"|x|={rx!r} but |y|={ry!r}")
    return float(rx)


def estimator_draws(x, y, m: int, trials: int, rng: SeededRng) -> np.ndarray:
    """One normalised estimate per trial, each with a fresh Gaussian G."""
    r = _common_radius(x, y)
    x, y = np.asarray(x, float), np.asarray(y, float)
    out = np.empty(trials)
    norm = m * math.exp(r * r)
    for start in range(0, trials, CHUNK):
        n = min(CHUNK, trials - start)
        G = rng.standard_normal((n, m, x.shape[0]))
        # exp(G x) and exp(G y) are the randomized exp features of x and y
        fx = np.exp(G @ x)
        fy = np.exp(G @ y)
        out[start : start + n] = np.einsum("tm,tm->t", fx, fy) / norm
    return out


def mc_unbiasedness(x, y, m: int, trials: int, rng: SeededRng) -> EstimatorReport:
    if m < 1 or trials < 1:
        raise ValueError("m and trials must be positive")
    draws = estimator_draws(x, y, m, trials, rng)
    stderr = float(draws.std(ddof=1) / math.sqrt(trials)) if trials > 1 else math.inf
    return EstimatorReport(softmax_kernel(x, y), float(draws.mean()), stderr, trials, m)


def variance_closed_form(x, y, m: int) -> float:
    x, y = as_vector(x, "x"), as_vector(y, "y")
    if x.shape != y.shape:
        raise DimensionMismatch(f"{x.shape} vs {y.shape}")
    z2 = float(np.sum((x + y) ** 2))
    return math.exp(-(x @ x + y @ y)) * (math.exp(2 * z2) - math.exp(z2)) / m


def chebyshev_radius(m: int, r: float, theta: float, t: float) -> float:
    if m < 1 or not t > 0:
        raise ValueError("need m >= 1 and t > 0")
    c = math.cos(theta)
    inner = max(0.0, 1.0 - math.exp(-2.0 * r * r * (1.0 + c)))
    return t / math.sqrt(m) * math.exp(r * r * (2.0 * c + 1.0)) * math.sqrt(inner)


def angle(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    c = float(x @ y / (np.linalg.norm(x) * np.linalg.norm(y)))
    return math.acos(min(1.0, max(-1.0, c)))


def chebyshev_tail_check(x, y, m: int, t: float, trials: int, rng: SeededRng) -> dict:
    """Empirical P(|K_hat - K| > g) against the 1/t^2 bound.

    The binomial standard error is evaluated at the bound itself so the
    slack is defined even when no exceedance is observed.
    """
    r = _common_radius(x, y)
    g = chebyshev_radius(m, r, angle(x, y), t)
    draws = estimator_draws(x, y, m, trials, rng)
    tail = float(np.mean(np.abs(draws - softmax_kernel(x, y)) > g))
    bound = 1.0 / (t * t)
    stderr = math.sqrt(bound * (1.0 - bound) / trials)
    return {
        "empirical_tail": tail,
        "bound": bound,
        "radius": g,
        "stderr": stderr,
        "passed": bool(tail <= bound + 3.0 * stderr),
    }


def theorem_m(setting: TheoremSetting) -> int:
    s = setting
    bracket = (
        2.0 * s.rho**2 / (s.delta**2 * s.tau**2) * math.log(2 * s.M * s.N) * math.exp(-(s.r**2) / s.A)
    )
    return math.ceil(bracket) + 1


def sup_norm_error(A_exact, A_approx) -> float:
    A_exact, A_approx = as_matrix(A_exact, "A_exact"), as_matrix(A_approx, "A_approx")
    if A_exact.shape != A_approx.shape:
        raise DimensionMismatch(f"{A_exact.shape} vs {A_approx.shape}")
    return float(np.max(np.abs(A_exact - A_approx)))


def measured_setting(layer: AttentionLayerParams, Xq, Xk, delta: float, A: float) -> TheoremSetting:
    """TheoremSetting with tau, rho, M, N and r taken from the actual inputs."""
    Q, K = as_matrix(Xq) @ layer.W_Q, as_matrix(Xk) @ layer.W_K
    norms = np.concatenate([np.linalg.norm(Q, axis=1), np.linalg.norm(K, axis=1)])
    r = float(norms[0])
    if np.max(np.abs(norms - r)) > NORM_TOL * max(r, 1.0):
        raise NormMismatch("queries and keys must all share one norm")
    kernel = np.exp(Q @ K.T)
    return TheoremSetting(float(kernel.min()), float(kernel.max()), delta, Q.shape[0], K.shape[0], r, A)


def theorem_end_to_end(setting: TheoremSetting, layer: AttentionLayerParams, Xq, Xk, seeds) -> TheoremReport:
    """Build the explicit SARA construction per seed and measure its error.

    tau, rho, M, N and r of ``setting`` are replaced by values measured from
    the data; only delta and A are taken from it. The normalised attention
    matrix is produced by the linear engine with identity values, so its
    rows are exactly the linear path's score rows.
    """
    setting = measured_setting(layer, Xq, Xk, setting.delta, setting.A)
    m = theorem_m(setting)
    Xq, Xk = as_matrix(Xq), as_matrix(Xk)
    Q, K = Xq @ layer.W_Q, Xk @ layer.W_K
    exact = exact_softmax_attention(Q, K, np.eye(K.shape[0])).scores
    kernel = np.exp(Q @ K.T)
    errors, rel = [], []
    for seed in seeds:
        G = gaussian_matrix(SeededRng(seed).child("theorem-G"), m, layer.d_qk)
        params = sara_from_theorem(G, layer.W_Q, layer.W_K, setting.A)
        phi_q = FeatureMapSpec.sara("exp", "query", params)
        phi_k = FeatureMapSpec.sara("exp", "key", params)
        approx = kernel_attention_linear(phi_q, phi_k, Xq, Xk, np.eye(Xk.shape[0])).values
        errors.append(sup_norm_error(exact, approx))
        k_hat = apply_feature_map(phi_q, Xq) @ apply_feature_map(phi_k, Xk).T / (m * math.exp(setting.r**2))
        rel.append(float(np.max(np.abs(k_hat - kernel) / kernel)))
    return TheoremReport(errors, m, setting.delta, setting.tau, setting.rho, rel)


def theorem_inputs(rng: SeededRng, M: int, N: int, d: int, d_qk: int, r: float):
    """Random teacher projections and raw tokens whose queries/keys have norm r.

    Each raw token is rescaled so that its projection has norm exactly r.
    """
    W_Q = gaussian_matrix(rng.child("W_Q"), d, d_qk) / math.sqrt(d)
    W_K = gaussian_matrix(rng.child("W_K"), d, d_qk) / math.sqrt(d)
    Xq = gaussian_matrix(rng.child("Xq"), M, d)
    Xk = gaussian_matrix(rng.child("Xk"), N, d)
    Xq = Xq * (r / np.linalg.norm(Xq @ W_Q, axis=1))[:, None]
    Xk = Xk * (r / np.linalg.norm(Xk @ W_K, axis=1))[:, None]
    return AttentionLayerParams(W_Q, W_K), Xq, Xk


def pair_at_angle(r: float, theta: float, d: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.zeros(d)
    y = np.zeros(d)
    x[0] = r
    if abs(theta - math.pi) < 1e-15:
        return x, -x
    y[0] = r * math.cos(theta)
    y[1] = r * math.sin(theta)
    return x, y
