"""Scaled dot-product attention and the two feature-sharing variants.

All functions take 2D (tokens, channels) arrays. Reference concatenation lets
a view attend to a reference view's keys/values in addition to its own;
persona blending mixes a view's own attention output with the mean of its
attention against a bank of recorded (K, V) pairs.
"""
import numpy as np

DEFAULT_PERSONA_LAMBDA = 0.55


class AttentionShapeError(ValueError):
    pass


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _check(Q, K, V):
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise AttentionShapeError("Q, K, V must be 2D (tokens, channels)")
    if Q.shape[1] != K.shape[1]:
        raise AttentionShapeError(f"Q has {Q.shape[1]} channels, K has {K.shape[1]}")
    if K.shape[0] != V.shape[0]:
        raise AttentionShapeError(f"K has {K.shape[0]} rows, V has {V.shape[0]}")
    if Q.shape[1] == 0:
        raise AttentionShapeError("attention needs at least one channel")


def attention_weights(Q, K):
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    return softmax(Q @ K.T / np.sqrt(Q.shape[1]))


def sdp_attention(Q, K, V):
    """softmax(Q K^T / sqrt(d_k)) V."""
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    _check(Q, K, V)
    return attention_weights(Q, K) @ V


def reference_concat_attention(Q, K, V, K_ref, V_ref):
    """Attend over the row-concatenation of own and reference keys/values."""
    K, V = np.asarray(K, dtype=np.float64), np.asarray(V, dtype=np.float64)
    K_ref = np.asarray(K_ref, dtype=np.float64).reshape(-1, K.shape[1])
    V_ref = np.asarray(V_ref, dtype=np.float64).reshape(-1, V.shape[1])
    if len(K_ref) != len(V_ref):
        raise AttentionShapeError("reference K and V row counts differ")
    if len(K_ref) == 0:
        return sdp_attention(Q, K, V)
    return sdp_attention(Q, np.vstack([K, K_ref]), np.vstack([V, V_ref]))


def persona_blend_attention(Q, K, V, bank, lam=DEFAULT_PERSONA_LAMBDA):
    """lam * ATT(Q, K, V) + (1 - lam) * mean_i ATT(Q, K_i, V_i) over ``bank``.

    ``bank`` is a sequence of (K_i, V_i) pairs. At ``lam == 1`` the bank is
    not touched and the plain attention output is returned unchanged.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    own = sdp_attention(Q, K, V)
    if lam == 1.0:
        return own
    bank = list(bank)
    if not bank:
        raise ValueError("persona blending with lambda < 1 needs a nonempty bank")
    ref = sum(sdp_attention(Q, Ki, Vi) for Ki, Vi in bank) / len(bank)
    if lam == 0.0:
        return ref
    return lam * own + (1.0 - lam) * ref


def multihead(fn, Q, K, V, heads, *extra):
    """Apply a single-head attention function independently per channel slice.

    ``extra`` arrays (e.g. reference K/V) are sliced along channels the same
    way. Used only when more than one head is wanted.
    """
    if heads == 1:
        return fn(Q, K, V, *extra)
    qs = np.array_split(np.asarray(Q), heads, axis=1)
    ks = np.array_split(np.asarray(K), heads, axis=1)
    vs = np.array_split(np.asarray(V), heads, axis=1)
    xs = [np.array_split(np.asarray(e), heads, axis=1) for e in extra]
    outs = [fn(qs[h], ks[h], vs[h], *(x[h] for x in xs)) for h in range(heads)]
    return np.hstack(outs)
