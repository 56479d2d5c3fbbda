import math

import numpy as np
import pytest

from sara_attn.feature_maps import (
    DimensionMismatch,
    FeatureMapSpec,
    FeatureOverflow,
    NonNegativeA,
    SaraParams,
    apply_feature_map,
    canonical_function,
    feature_flops,
    load_sara_params,
    sara_from_theorem,
    save_sara_params,
)
from sara_attn.numerics import SeededRng, gaussian_matrix


def test_relu_elementwise():
    out = apply_feature_map(FeatureMapSpec.elementwise("relu", 3), [[-1.0, 2.0, 0.0]])
    assert out.tolist() == [[0.0, 2.0, 0.0]]


def test_positive_rf_at_origin():
    m = 5
    out = apply_feature_map(FeatureMapSpec.positive_rf(np.eye(m)), np.zeros((1, m)))
    np.testing.assert_allclose(out, np.full((1, m), 1 / math.sqrt(m)), rtol=1e-15)


def test_sara_exp_identity_projection():
    params = SaraParams(np.ones(2), np.eye(2), np.eye(2))
    out = apply_feature_map(FeatureMapSpec.sara("exp", "query", params), [[0.1, -0.2]])
    np.testing.assert_allclose(out, [[math.exp(0.1), math.exp(-0.2)]], rtol=1e-15)


def test_sqrt_alias_is_square():
    assert canonical_function("sqrt") == "square"
    spec = FeatureMapSpec.randomized("sqrt", np.array([[1.0, 1.0]]))
    assert apply_feature_map(spec, [[1.5, 0.5]]).tolist() == [[4.0]]


def test_sara_sides_use_their_own_projection():
    params = SaraParams(np.array([2.0]), np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    z = [[0.3, 0.7]]
    q = apply_feature_map(FeatureMapSpec.sara("relu", "query", params), z)
    k = apply_feature_map(FeatureMapSpec.sara("relu", "key", params), z)
    np.testing.assert_allclose(q, [[0.6]])
    np.testing.assert_allclose(k, [[1.4]])


def test_dimension_checks():
    with pytest.raises(DimensionMismatch):
        apply_feature_map(FeatureMapSpec.identity(3), np.ones((2, 4)))
    with pytest.raises(DimensionMismatch):
        SaraParams(np.ones(3), np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        FeatureMapSpec("bogus", 2, 2)
    with pytest.raises(ValueError):
        canonical_function("tanh")


def test_exp_overflow_is_reported():
    spec = FeatureMapSpec.elementwise("exp", 2)
    with pytest.raises(FeatureOverflow):
        apply_feature_map(spec, [[1000.0, 0.0]])


def test_params_are_read_only():
    G = np.ones((2, 3))
    params = SaraParams(np.ones(2), G, G)
    G[0, 0] = 5.0
    assert params.G_Q[0, 0] == 1.0
    with pytest.raises(ValueError):
        params.v[0] = 3.0


def test_flat_round_trip():
    rng = SeededRng(2)
    params = SaraParams(rng.standard_normal(4), rng.standard_normal((4, 3)), rng.standard_normal((4, 3)))
    back = SaraParams.from_flat(params.flat(), 4, 3)
    for name in ("v", "G_Q", "G_K"):
        assert getattr(back, name).tobytes() == getattr(params, name).tobytes()


def test_flops_are_exact_counts():
    G = np.ones((4, 3))
    assert feature_flops(FeatureMapSpec.identity(3), 10) == 0
    assert feature_flops(FeatureMapSpec.elementwise("relu", 3), 10) == 30
    assert feature_flops(FeatureMapSpec.randomized("relu", G), 10) == 2 * 10 * 4 * 3 + 40


def test_theorem_v_for_unit_row():
    # A = -1, so s = 5 and v_i = 5^(d_qk/4) e^{-|g_i|^2}
    d_qk = 2
    G = np.array([[1.0, 0.0]])
    params = sara_from_theorem(G, np.eye(d_qk), np.eye(d_qk), -1.0)
    assert params.v[0] == pytest.approx(5 ** (d_qk / 4) * math.exp(-1.0), rel=1e-15)


def test_theorem_construction_matches_hand_rolled():
    rng = SeededRng(11)
    m, d, d_qk, A = 4, 3, 2, -0.5
    G = gaussian_matrix(rng.child("G"), m, d_qk)
    W_Q = gaussian_matrix(rng.child("WQ"), d, d_qk)
    W_K = gaussian_matrix(rng.child("WK"), d, d_qk)
    params = sara_from_theorem(G, W_Q, W_K, A)
    s = 1 - 4 * A
    for i in range(m):
        g = G[i]
        v_i = s ** (d_qk / 4) * math.exp(A * sum(x * x for x in g))
        assert params.v[i] == pytest.approx(v_i, rel=1e-14)
        for j in range(d):
            gq = math.sqrt(s) * sum(g[c] * W_Q[j, c] for c in range(d_qk))
            gk = math.sqrt(s) * sum(g[c] * W_K[j, c] for c in range(d_qk))
            assert params.G_Q[i, j] == pytest.approx(gq, rel=1e-12, abs=1e-14)
            assert params.G_K[i, j] == pytest.approx(gk, rel=1e-12, abs=1e-14)


def test_theorem_requires_negative_a():
    with pytest.raises(NonNegativeA):
        sara_from_theorem(np.ones((2, 2)), np.eye(2), np.eye(2), 0.0)


def test_theorem_construction_is_unbiased():
    # E over G of phi_Q(x).phi_K(y) / (m e^{r^2}) should be exp(q.k)
    rng = SeededRng(5)
    d, d_qk, r = 3, 2, 0.7
    W_Q = gaussian_matrix(rng.child("WQ"), d, d_qk)
    W_K = gaussian_matrix(rng.child("WK"), d, d_qk)
    x = rng.child("x").standard_normal((1, d))
    y = rng.child("y").standard_normal((1, d))
    x *= r / np.linalg.norm(x @ W_Q)
    y *= r / np.linalg.norm(y @ W_K)
    target = math.exp(((x @ W_Q) @ (y @ W_K).T).item())
    m, trials = 4, 20000
    draws = np.empty(trials)
    gs = rng.child("G").standard_normal((trials, m, d_qk))
    for t in range(trials):
        p = sara_from_theorem(gs[t], W_Q, W_K, -1.0)
        fq = apply_feature_map(FeatureMapSpec.sara("exp", "query", p), x)
        fk = apply_feature_map(FeatureMapSpec.sara("exp", "key", p), y)
        draws[t] = (fq @ fk.T).item() / (m * math.exp(r * r))
    stderr = draws.std(ddof=1) / math.sqrt(trials)
    assert abs(draws.mean() - target) <= 4 * stderr


def test_save_load_params(tmp_path):
    rng = SeededRng(9)
    params = SaraParams(rng.standard_normal(3), rng.standard_normal((3, 2)), rng.standard_normal((3, 2)))
    save_sara_params(tmp_path / "p", params, "sqrt", A=-1.0)
    back, meta = load_sara_params(tmp_path / "p")
    assert meta == {"m": 3, "d": 2, "f": "square", "A_if_constructed": -1.0}
    assert back.flat().tobytes() == params.flat().tobytes()
