"""Image losses with analytic gradients.

``perceptual_distance`` is a cheap stand-in for a learned perceptual metric.
Definition, for (H, W, C) images ``a`` and ``b``:

* three scales: the image average-pooled by 1, 2 and 4 (cropped to a
  multiple of the pool size);
* per scale, a statistics term: split into non-overlapping 8x8 patches
  (patch side shrinks to the image side when smaller; remainders cropped),
  take per-patch, per-channel mean and population variance, and average the
  squared differences of both over patches and channels;
* per scale, a gradient term: mean absolute difference of horizontal
  forward differences plus the same for vertical ones;
* distance = mean over scales of (statistics term + gradient term).
"""
import numpy as np

PATCH = 8
SCALES = (1, 2, 4)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mae_loss(a, b):
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


def mae_grad(a, b):
    """d mae_loss / d a."""
    a, b = _check_pair(a, b)
    return np.sign(a - b) / a.size


def _pool(x, k):
    H, W = (x.shape[0] // k) * k, (x.shape[1] // k) * k
    x = x[:H, :W]
    return x.reshape(H // k, k, W // k, k, -1).mean(axis=(1, 3))


def _unpool(g, k, shape):
    out = np.zeros(shape)
    up = np.repeat(np.repeat(g, k, axis=0), k, axis=1) / (k * k)
    out[:up.shape[0], :up.shape[1]] = up
    return out


def _patches(x):
    ph, pw = min(PATCH, x.shape[0]), min(PATCH, x.shape[1])
    H, W = (x.shape[0] // ph) * ph, (x.shape[1] // pw) * pw
    p = x[:H, :W].reshape(H // ph, ph, W // pw, pw, -1)
    return p, ph, pw


def _scale_term(a, b, want_grad):
    pa, ph, pw = _patches(a)
    pb, _, _ = _patches(b)
    n = ph * pw
    mu_a, mu_b = pa.mean(axis=(1, 3)), pb.mean(axis=(1, 3))
    var_a = (pa * pa).mean(axis=(1, 3)) - mu_a ** 2
    var_b = (pb * pb).mean(axis=(1, 3)) - mu_b ** 2
    dmu, dvar = mu_a - mu_b, var_a - var_b
    stat = np.mean(dmu ** 2) + np.mean(dvar ** 2)

    gxa, gxb = np.diff(a, axis=1), np.diff(b, axis=1)
    gya, gyb = np.diff(a, axis=0), np.diff(b, axis=0)
    ex, ey = gxa - gxb, gya - gyb
    grad_term = (np.mean(np.abs(ex)) if ex.size else 0.0) + (np.mean(np.abs(ey)) if ey.size else 0.0)
    value = stat + grad_term
    if not want_grad:
        return value, None

    m = dmu.size
    g_mu = 2.0 * dmu / m
    g_var = 2.0 * dvar / m
    mu_a_full = mu_a[:, None, :, None, :]
    gp = (g_mu[:, None, :, None, :] / n
          + g_var[:, None, :, None, :] * 2.0 * (pa - mu_a_full) / n)
    g = np.zeros_like(a)
    g[:gp.shape[0] * ph, :gp.shape[2] * pw] = gp.reshape(gp.shape[0] * ph, gp.shape[2] * pw, -1)
    if ex.size:
        sx = np.sign(ex) / ex.size
        g[:, 1:] += sx
        g[:, :-1] -= sx
    if ey.size:
        sy = np.sign(ey) / ey.size
        g[1:] += sy
        g[:-1] -= sy
    return value, g


def _as_hwc(x):
    return x[..., None] if x.ndim == 2 else x


def perceptual_distance(a, b):
    a, b = _check_pair(a, b)
    a, b = _as_hwc(a), _as_hwc(b)
    total = 0.0
    for k in SCALES:
        total += _scale_term(_pool(a, k), _pool(b, k), False)[0]
    return float(total / len(SCALES))


def perceptual_distance_grad(a, b):
    """Returns (distance, d distance / d a)."""
    a, b = _check_pair(a, b)
    shape = a.shape
    a, b = _as_hwc(a), _as_hwc(b)
    total = 0.0
    grad = np.zeros_like(a)
    for k in SCALES:
        v, g = _scale_term(_pool(a, k), _pool(b, k), True)
        total += v
        grad += _unpool(g, k, a.shape)
    return float(total / len(SCALES)), (grad / len(SCALES)).reshape(shape)


def edit_loss(render, target, lambda_mae=10.0, lambda_perceptual=15.0):
    """Weighted MAE + perceptual loss; returns (total, mae, perceptual, d total / d render)."""
    mae = mae_loss(render, target)
    perc, g_perc = perceptual_distance_grad(render, target)
    total = lambda_mae * mae + lambda_perceptual * perc
    grad = lambda_mae * mae_grad(render, target) + lambda_perceptual * g_perc
    return total, mae, perc, grad
