import math

import numpy as np
import pytest

from sara_attn.attention import NotADistribution
from sara_attn.feature_maps import FeatureMapSpec
from sara_attn.navdemo import (
    EXACT,
    KernelSpec,
    Scene,
    action_distribution,
    agreement,
    compare_kernels,
    expected_action,
    score_rows,
    synthetic_scene,
    topk_truncated_sample,
)
from sara_attn.numerics import SeededRng


def aligned_scene():
    keys = np.eye(5)
    target = np.array([[1.0, 0, 0, 0, 0]])
    actions = np.arange(10.0).reshape(5, 2)
    return Scene(keys, target, actions, radius=1.0)


def test_aligned_key_score():
    scores = action_distribution(aligned_scene(), 0)
    expected = math.e / (math.e + 4)
    assert scores[0] == pytest.approx(expected, rel=1e-15)
    assert expected == pytest.approx(0.4046, abs=1e-4)
    np.testing.assert_allclose(scores[1:], 1 / (math.e + 4), rtol=1e-15)


def test_orthogonal_target_is_uniform():
    keys = np.eye(4)[:3]
    scene = Scene(keys, np.array([[0.0, 0.0, 0.0, 1.0]]), np.ones((3, 1)), radius=2.0)
    np.testing.assert_allclose(action_distribution(scene, 0), 1 / 3, rtol=1e-15)


def test_single_patch():
    scene = Scene(np.array([[0.6, 0.8]]), np.array([[1.0, 0.0]]), np.array([[2.0, -1.0]]))
    assert action_distribution(scene, 0).tolist() == [1.0]
    assert expected_action(scene, 0).tolist() == [2.0, -1.0]


def test_expected_action_brute_force():
    keys = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [-0.8, 0.6]])
    target = np.array([[0.8, -0.6]])
    actions = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 2.0], [3.0, 3.0]])
    scene = Scene(keys, target, actions, radius=1.5)
    w = [math.exp(1.5 * 1.5 * (target[0] @ k)) for k in keys]
    expected = sum(wi * a for wi, a in zip(w, actions)) / sum(w)
    np.testing.assert_allclose(expected_action(scene, 0), expected, rtol=1e-14)


def test_expected_action_limits():
    scene = aligned_scene()
    big = Scene(scene.patch_keys, scene.targets, scene.base_actions, radius=40.0)
    np.testing.assert_allclose(expected_action(big, 0), scene.base_actions[0], rtol=1e-12)
    flat = KernelSpec.symmetric(FeatureMapSpec.randomized("relu", np.zeros((1, 5)) + 1.0))
    np.testing.assert_allclose(expected_action(scene, 0, flat), scene.base_actions.mean(axis=0), rtol=1e-14)


def test_target_index_range():
    with pytest.raises(IndexError):
        action_distribution(aligned_scene(), 1)


def test_scene_validation():
    with pytest.raises(ValueError):
        Scene(np.array([[2.0, 0.0]]), np.array([[1.0, 0.0]]), np.ones((1, 1)))
    with pytest.raises(ValueError):
        Scene(np.eye(2), np.array([[1.0, 0.0]]), np.ones((3, 1)))


def test_topk_one_is_argmax():
    rng = SeededRng(0)
    assert {topk_truncated_sample([0.1, 0.6, 0.3], 1, rng) for _ in range(200)} == {1}


def test_topk_full_uniform_frequencies():
    n, draws = 5, 100_000
    rng = SeededRng(1)
    counts = np.bincount([topk_truncated_sample(np.full(n, 1 / n), n, rng) for _ in range(draws)], minlength=n)
    freq = counts / draws
    stderr = math.sqrt(0.2 * 0.8 / draws)
    assert np.all(np.abs(freq - 0.2) <= 3 * stderr)


def test_topk_excludes_tail():
    rng = SeededRng(2)
    draws = 100_000
    counts = np.bincount([topk_truncated_sample([0.5, 0.3, 0.1, 0.1], 3, rng) for _ in range(draws)], minlength=4)
    assert counts[3] == 0
    # renormalised over the kept mass 0.9
    for i, p in enumerate((5 / 9, 3 / 9, 1 / 9)):
        assert abs(counts[i] / draws - p) <= 3 * math.sqrt(p * (1 - p) / draws)


def test_topk_rejects_bad_rows():
    with pytest.raises(NotADistribution):
        topk_truncated_sample([0.5, 0.6], 1, SeededRng(0))
    with pytest.raises(ValueError):
        topk_truncated_sample([0.5, 0.5], 0, SeededRng(0))


def test_agreement_with_itself():
    scene = synthetic_scene(SeededRng(3), n_patches=16, n_targets=3, d=8)
    ref = score_rows(scene, EXACT)
    rep = agreement(ref, ref)
    assert rep.mean_tv == 0.0 and rep.argmax_rate == 1.0 and rep.mean_entropy_gap == 0.0


def test_synthetic_scene_shapes_and_determinism():
    a = synthetic_scene(SeededRng(4), n_patches=20, n_targets=5, d=6, d_action=3)
    b = synthetic_scene(SeededRng(4), n_patches=20, n_targets=5, d=6, d_action=3)
    assert a.patch_keys.shape == (20, 6) and a.targets.shape == (5, 6) and a.base_actions.shape == (20, 3)
    assert a.patch_keys.tobytes() == b.patch_keys.tobytes()
    np.testing.assert_allclose(np.linalg.norm(a.patch_keys, axis=1), 1.0, rtol=1e-14)


def test_relu_scores_are_flatter_than_softmax():
    scene = synthetic_scene(SeededRng(5))
    relu = KernelSpec.symmetric(FeatureMapSpec.elementwise("relu", scene.patch_keys.shape[1]))
    rep = compare_kernels(scene, {"relu": relu, EXACT: EXACT})
    assert rep[EXACT].mean_tv == 0.0
    assert rep["relu"].mean_entropy_gap > 0
