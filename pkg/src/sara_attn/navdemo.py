"""Zero-shot attention control on synthetic scenes.

A scene has N unit-norm patch embeddings (keys), M unit-norm target
embeddings (queries) and one base action per patch. For target i the agent's
action is the score-weighted mean of base actions, with scores
``K(q_i, k_j) / sum_l K(q_i, k_l)``. Queries and keys are the embeddings
scaled to norm ``radius``, so the exact kernel is ``exp(radius^2 cos)``.
Patch embeddings are drawn around a few cluster directions and every target
sits near one cluster, giving the sharply peaked softmax rows that flat
linear-attention maps fail to reproduce.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionLayerParams,
    check_distribution,
    entropy,
    exact_softmax_attention,
    kernel_attention_linear,
    kernel_attention_quadratic,
    top_k_indices,
)
from .feature_maps import FeatureMapSpec
from .numerics import SeededRng, as_matrix, gaussian_matrix, normalize_rows_to_radius
from .uptrain import Batch, DistillationConfig, uptrain

EXACT = "exact"


@dataclass(frozen=True, eq=False)
class Scene:
    patch_keys: np.ndarray
    targets: np.ndarray
    base_actions: np.ndarray
    radius: float = 1.0

    def __post_init__(self):
        keys = as_matrix(self.patch_keys, "patch_keys")
        targets = as_matrix(self.targets, "targets")
        actions = as_matrix(self.base_actions, "base_actions")
        for name, mat in (("patch_keys", keys), ("targets", targets)):
            if mat.shape[0] < 1 or not np.allclose(np.linalg.norm(mat, axis=1), 1.0, atol=1e-12):
                raise ValueError(f"{name} rows must be unit norm")
        if keys.shape[1] != targets.shape[1]:
            raise ValueError("keys and targets must share a dimension")
        if actions.shape[0] != keys.shape[0]:
            raise ValueError("need one base action per patch")
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    @property
    def queries(self) -> np.ndarray:
        return self.radius * self.targets

    @property
    def keys(self) -> np.ndarray:
        return self.radius * self.patch_keys

    @property
    def layer(self) -> AttentionLayerParams:
        """The scene as a softmax layer on raw embeddings (W_Q = W_K = radius I)."""
        d = self.patch_keys.shape[1]
        return AttentionLayerParams(self.radius * np.eye(d), self.radius * np.eye(d))


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """A feature-map pair. SARA maps act on raw embeddings, others on q/k."""

    phi_q: FeatureMapSpec
    phi_k: FeatureMapSpec

    @classmethod
    def symmetric(cls, phi: FeatureMapSpec) -> "KernelSpec":
        return cls(phi, phi)

    @property
    def on_raw(self) -> bool:
        return self.phi_q.kind == "sara"

    def inputs(self, scene: Scene) -> tuple[np.ndarray, np.ndarray]:
        if self.on_raw:
            return scene.targets, scene.patch_keys
        return scene.queries, scene.keys


@dataclass
class AgreementReport:
    tv_distance: np.ndarray
    argmax_agree: np.ndarray
    entropy_gap: np.ndarray

    @property
    def mean_tv(self) -> float:
        return float(np.mean(self.tv_distance))

    @property
    def argmax_rate(self) -> float:
        return float(np.mean(self.argmax_agree))

    @property
    def mean_entropy_gap(self) -> float:
        return float(np.mean(self.entropy_gap))


def synthetic_scene(
    rng: SeededRng,
    n_patches: int = 64,
    n_targets: int = 4,
    d: int = 64,
    d_action: int = 2,
    n_clusters: int = 4,
    noise: float = 1.0,
    target_noise: float = 0.1,
    radius: float = 3.0,
) -> Scene:
    centers = normalize_rows_to_radius(gaussian_matrix(rng.child("centers"), n_clusters, d), 1.0)
    assign = rng.child("assign").generator.integers(0, n_clusters, size=n_patches)
    scale = 1.0 / np.sqrt(d)
    # per-patch spread so each cluster has a few clearly closest patches
    spread = noise * rng.child("spread").generator.uniform(0.25, 1.0, size=(n_patches, 1))
    keys = centers[assign] + spread * scale * gaussian_matrix(rng.child("key-noise"), n_patches, d)
    which = np.arange(n_targets) % n_clusters
    targets = centers[which] + target_noise * scale * gaussian_matrix(rng.child("target-noise"), n_targets, d)
    actions = gaussian_matrix(rng.child("actions"), n_patches, d_action)
    return Scene(normalize_rows_to_radius(keys, 1.0), normalize_rows_to_radius(targets, 1.0), actions, radius)


def score_rows(scene: Scene, kernel) -> np.ndarray:
    """All M x N score rows under ``kernel`` (``EXACT`` or a KernelSpec)."""
    if kernel == EXACT:
        return exact_softmax_attention(scene.queries, scene.keys, scene.base_actions).scores
    Xq, Xk = kernel.inputs(scene)
    return kernel_attention_quadratic(kernel.phi_q, kernel.phi_k, Xq, Xk, scene.base_actions).scores


def action_distribution(scene: Scene, target_index: int, kernel=EXACT) -> np.ndarray:
    if not 0 <= target_index < scene.targets.shape[0]:
        raise IndexError(f"target {target_index} out of range")
    if kernel == EXACT:
        q = scene.queries[target_index : target_index + 1]
        return exact_softmax_attention(q, scene.keys, scene.base_actions).scores[0]
    Xq, Xk = kernel.inputs(scene)
    out = kernel_attention_quadratic(kernel.phi_q, kernel.phi_k, Xq[target_index : target_index + 1], Xk, scene.base_actions)
    return out.scores[0]


def expected_action(scene: Scene, target_index: int, kernel=EXACT) -> np.ndarray:
    """Score-weighted base action; kernel specs go through the linear engine."""
    if kernel == EXACT:
        return action_distribution(scene, target_index) @ scene.base_actions
    Xq, Xk = kernel.inputs(scene)
    out = kernel_attention_linear(kernel.phi_q, kernel.phi_k, Xq[target_index : target_index + 1], Xk, scene.base_actions)
    return out.values[0]


def topk_truncated_sample(scores, k: int, rng: SeededRng) -> int:
    """Sample among the k top-scoring indices, proportionally to their scores."""
    scores = check_distribution(scores)
    if k < 1:
        raise ValueError("k must be >= 1")
    top = top_k_indices(scores, k)
    w = scores[top]
    if w.sum() <= 0:
        return top[0]
    cdf = np.cumsum(w / w.sum())
    u = rng.uniform()
    return top[min(int(np.searchsorted(cdf, u, side="right")), len(top) - 1)]


def agreement(reference: np.ndarray, approx: np.ndarray) -> AgreementReport:
    tv = 0.5 * np.abs(reference - approx).sum(axis=1)
    agree = np.argmax(reference, axis=1) == np.argmax(approx, axis=1)
    gap = np.array([entropy(a) - entropy(r) for r, a in zip(reference, approx)])
    return AgreementReport(np.clip(tv, 0.0, 1.0), agree, gap)


def compare_kernels(scene: Scene, kernel_specs: dict) -> dict[str, AgreementReport]:
    """Agreement of each named kernel's score rows with exact softmax."""
    reference = score_rows(scene, EXACT)
    return {name: agreement(reference, score_rows(scene, spec)) for name, spec in kernel_specs.items()}


def distill_scene(scene: Scene, config: DistillationConfig) -> KernelSpec:
    """Fit SARA maps to the scene's softmax layer and return them as a KernelSpec."""
    batch = [Batch(scene.patch_keys, scene.base_actions, scene.targets)]
    history = uptrain(config, scene.layer, iter(lambda: batch, None))
    p = history.final_params
    return KernelSpec(FeatureMapSpec.sara(config.f, "query", p), FeatureMapSpec.sara(config.f, "key", p))
