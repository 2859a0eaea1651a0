import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatedit.attention import (
    DEFAULT_PERSONA_LAMBDA,
    AttentionShapeError,
    attention_weights,
    multihead,
    persona_blend_attention,
    reference_concat_attention,
    sdp_attention,
    softmax,
)


def explicit_attention(Q, K, V):
    """Loop-based exp/normalize oracle."""
    out = np.zeros((len(Q), V.shape[1]))
    for i, q in enumerate(Q):
        logits = [float(q @ k) / np.sqrt(len(q)) for k in K]
        m = max(logits)
        w = [np.exp(l - m) for l in logits]
        total = sum(w)
        for wj, v in zip(w, V):
            out[i] += wj / total * v
    return out


def rand(rng, *shape):
    return rng.normal(size=shape)


def test_single_key():
    np.testing.assert_array_equal(sdp_attention([[1.0]], [[1.0]], [[7.0]]), [[7.0]])


def test_identical_keys_average_values():
    rng = np.random.default_rng(0)
    K = np.tile(rand(rng, 1, 3), (2, 1))
    V = np.array([[1.0, 2.0], [3.0, -4.0]])
    out = sdp_attention(rand(rng, 5, 3), K, V)
    np.testing.assert_allclose(out, np.tile([2.0, -1.0], (5, 1)), atol=1e-15)


def test_matches_explicit_oracle():
    rng = np.random.default_rng(1)
    Q, K, V = rand(rng, 4, 8), rand(rng, 4, 8), rand(rng, 4, 8)
    np.testing.assert_allclose(sdp_attention(Q, K, V), explicit_attention(Q, K, V), atol=1e-6)


def test_stable_for_large_logits():
    Q = np.array([[1000.0, 0.0]])
    K = np.array([[1000.0, 0.0], [999.0, 0.0]])
    out = sdp_attention(Q, K, [[1.0], [0.0]])
    assert np.isfinite(out).all() and out[0, 0] == pytest.approx(1.0)


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 7), st.integers(1, 5))
@settings(max_examples=40, deadline=None)
def test_row_stochastic(seed, n_q, n_k, d):
    rng = np.random.default_rng(seed)
    W = attention_weights(rand(rng, n_q, d) * 5, rand(rng, n_k, d) * 5)
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-6)
    assert W.min() >= 0


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_duplication_identity(seed):
    rng = np.random.default_rng(seed)
    Q, K, V = rand(rng, 5, 4), rand(rng, 6, 4), rand(rng, 6, 3)
    plain = sdp_attention(Q, K, V)
    np.testing.assert_allclose(sdp_attention(Q, np.vstack([K, K]), np.vstack([V, V])),
                               plain, atol=1e-6)
    np.testing.assert_allclose(reference_concat_attention(Q, K, V, K, V), plain, atol=1e-6)


def test_empty_reference():
    rng = np.random.default_rng(2)
    Q, K, V = rand(rng, 3, 4), rand(rng, 5, 4), rand(rng, 5, 2)
    out = reference_concat_attention(Q, K, V, np.zeros((0, 4)), np.zeros((0, 2)))
    np.testing.assert_array_equal(out, sdp_attention(Q, K, V))


def test_reference_concat_matches_one_shot_oracle():
    rng = np.random.default_rng(3)
    Q, K, V = rand(rng, 3, 4), rand(rng, 5, 4), rand(rng, 5, 2)
    Kr, Vr = rand(rng, 7, 4), rand(rng, 7, 2)
    expected = explicit_attention(Q, np.concatenate([K, Kr]), np.concatenate([V, Vr]))
    np.testing.assert_allclose(reference_concat_attention(Q, K, V, Kr, Vr), expected, atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_invariant_to_joint_row_permutation(seed):
    rng = np.random.default_rng(seed)
    Q, K, V = rand(rng, 3, 4), rand(rng, 6, 4), rand(rng, 6, 2)
    Kr, Vr = rand(rng, 4, 4), rand(rng, 4, 2)
    p, pr = rng.permutation(6), rng.permutation(4)
    np.testing.assert_allclose(sdp_attention(Q, K[p], V[p]), sdp_attention(Q, K, V), atol=1e-12)
    np.testing.assert_allclose(reference_concat_attention(Q, K[p], V[p], Kr[pr], Vr[pr]),
                               reference_concat_attention(Q, K, V, Kr, Vr), atol=1e-12)
    bank = [(Kr, Vr), (K, V)]
    np.testing.assert_allclose(
        persona_blend_attention(Q, K[p], V[p], [(Kr[pr], Vr[pr]), (K[p], V[p])], 0.3),
        persona_blend_attention(Q, K, V, bank, 0.3), atol=1e-12)


def test_persona_default_lambda():
    assert DEFAULT_PERSONA_LAMBDA == 0.55


def test_persona_lambda_one_ignores_bank():
    rng = np.random.default_rng(4)
    Q, K, V = rand(rng, 3, 4), rand(rng, 5, 4), rand(rng, 5, 2)

    class Exploding:
        def __iter__(self):
            raise AssertionError("bank must not be read at lambda = 1")

    np.testing.assert_array_equal(persona_blend_attention(Q, K, V, Exploding(), 1.0),
                                  sdp_attention(Q, K, V))
    np.testing.assert_array_equal(persona_blend_attention(Q, K, V, [], 1.0),
                                  sdp_attention(Q, K, V))


def test_persona_self_bank_at_lambda_zero():
    rng = np.random.default_rng(5)
    Q, K, V = rand(rng, 3, 4), rand(rng, 5, 4), rand(rng, 5, 2)
    np.testing.assert_array_equal(persona_blend_attention(Q, K, V, [(K, V)], 0.0),
                                  sdp_attention(Q, K, V))


def test_persona_term_by_term():
    rng = np.random.default_rng(6)
    Q, K, V = rand(rng, 4, 8), rand(rng, 6, 8), rand(rng, 6, 3)
    bank = [(rand(rng, 6, 8), rand(rng, 6, 3)) for _ in range(4)]
    A0 = explicit_attention(Q, K, V)
    refs = [explicit_attention(Q, Ki, Vi) for Ki, Vi in bank]
    expected = 0.55 * A0 + 0.45 * (refs[0] + refs[1] + refs[2] + refs[3]) / 4
    np.testing.assert_allclose(persona_blend_attention(Q, K, V, bank, 0.55), expected, atol=1e-6)


@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
@settings(max_examples=40, deadline=None)
def test_persona_affine_in_lambda(seed, lam):
    rng = np.random.default_rng(seed)
    Q, K, V = rand(rng, 3, 4), rand(rng, 5, 4), rand(rng, 5, 2)
    bank = [(rand(rng, 5, 4), rand(rng, 5, 2)) for _ in range(3)]
    one = persona_blend_attention(Q, K, V, bank, 1.0)
    zero = persona_blend_attention(Q, K, V, bank, 0.0)
    np.testing.assert_allclose(persona_blend_attention(Q, K, V, bank, lam),
                               lam * one + (1 - lam) * zero, atol=1e-6)


def test_errors():
    rng = np.random.default_rng(7)
    Q, K, V = rand(rng, 3, 4), rand(rng, 5, 4), rand(rng, 5, 2)
    with pytest.raises(AttentionShapeError):
        sdp_attention(Q, rand(rng, 5, 3), V)
    with pytest.raises(AttentionShapeError):
        sdp_attention(Q, K, rand(rng, 4, 2))
    with pytest.raises(AttentionShapeError):
        reference_concat_attention(Q, K, V, rand(rng, 2, 4), rand(rng, 3, 2))
    with pytest.raises(ValueError):
        persona_blend_attention(Q, K, V, [], 0.5)
    with pytest.raises(ValueError):
        persona_blend_attention(Q, K, V, [(K, V)], 1.5)


def test_multihead_is_per_slice():
    rng = np.random.default_rng(8)
    Q, K, V = rand(rng, 3, 8), rand(rng, 5, 8), rand(rng, 5, 8)
    out = multihead(sdp_attention, Q, K, V, 2)
    np.testing.assert_allclose(out[:, :4], sdp_attention(Q[:, :4], K[:, :4], V[:, :4]))
    np.testing.assert_allclose(out[:, 4:], sdp_attention(Q[:, 4:], K[:, 4:], V[:, 4:]))
    np.testing.assert_array_equal(multihead(sdp_attention, Q, K, V, 1), sdp_attention(Q, K, V))
