"""Real spherical harmonics up to degree 3, with analytic direction derivatives.

Basis ordering and sign convention follow the usual splatting layout, so SH
blocks exported by other splatting tools evaluate to the same colors.
"""
import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_DEGREE = 3


def num_coeffs(degree):
    return (degree + 1) ** 2


def sh_basis(dirs, degree, with_grad=False):
    """Evaluate the real SH basis at unit directions.

    Args:
        dirs: (..., 3) unit vectors.
        degree: 0..3.
        with_grad: also return d(basis)/d(dir) with shape (..., K, 3).

    Returns:
        basis of shape (..., K), and optionally its Jacobian.
    """
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"SH degree must be in [0, {MAX_DEGREE}], got {degree}")
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    one = np.ones_like(x)
    zero = np.zeros_like(x)

    vals = [SH_C0 * one]
    grads = [(zero, zero, zero)]
    if degree >= 1:
        vals += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
        grads += [
            (zero, -SH_C1 * one, zero),
            (zero, zero, SH_C1 * one),
            (-SH_C1 * one, zero, zero),
        ]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        c = SH_C2
        vals += [
            c[0] * x * y,
            c[1] * y * z,
            c[2] * (2 * zz - xx - yy),
            c[3] * x * z,
            c[4] * (xx - yy),
        ]
        grads += [
            (c[0] * y, c[0] * x, zero),
            (zero, c[1] * z, c[1] * y),
            (-2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z),
            (c[3] * z, zero, c[3] * x),
            (2 * c[4] * x, -2 * c[4] * y, zero),
        ]
    if degree >= 3:
        c = SH_C3
        vals += [
            c[0] * y * (3 * xx - yy),
            c[1] * x * y * z,
            c[2] * y * (4 * zz - xx - yy),
            c[3] * z * (2 * zz - 3 * xx - 3 * yy),
            c[4] * x * (4 * zz - xx - yy),
            c[5] * z * (xx - yy),
            c[6] * x * (xx - 3 * yy),
        ]
        grads += [
            (c[0] * 6 * x * y, c[0] * (3 * xx - 3 * yy), zero),
            (c[1] * y * z, c[1] * x * z, c[1] * x * y),
            (-2 * c[2] * x * y, c[2] * (4 * zz - xx - 3 * yy), 8 * c[2] * y * z),
            (-6 * c[3] * x * z, -6 * c[3] * y * z, c[3] * (6 * zz - 3 * xx - 3 * yy)),
            (c[4] * (4 * zz - 3 * xx - yy), -2 * c[4] * x * y, 8 * c[4] * x * z),
            (2 * c[5] * x * z, -2 * c[5] * y * z, c[5] * (xx - yy)),
            (c[6] * (3 * xx - 3 * yy), -6 * c[6] * x * y, zero),
        ]

    basis = np.stack(vals, axis=-1)
    if not with_grad:
        return basis
    jac = np.stack([np.stack(g, axis=-1) for g in grads], axis=-2)
    return basis, jac


def sh_to_rgb(sh, view_dir):
    """Color of an SH block seen along ``view_dir``.

    ``sh`` has shape (..., 3, K); the degree is inferred from K. The result is
    ``SH(dir) + 0.5`` clamped to [0, 1].
    """
    sh = np.asarray(sh, dtype=np.float64)
    k = sh.shape[-1]
    degree = int(round(np.sqrt(k))) - 1
    if num_coeffs(degree) != k:
        raise ValueError(f"{k} coefficients is not a square SH block")
    basis = sh_basis(view_dir, degree)
    raw = np.einsum("...ck,...k->...c", sh, basis) + 0.5
    return np.clip(raw, 0.0, 1.0)


def rgb_to_sh_dc(rgb):
    """DC coefficient that reproduces ``rgb`` when all higher bands are zero."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0
