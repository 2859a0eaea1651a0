import numpy as np
import pytest

from splatedit.sh import SH_C0, num_coeffs, rgb_to_sh_dc, sh_basis, sh_to_rgb


def sphere_quadrature(n=16):
    """Gauss-Legendre in cos(theta) times a uniform phi grid: exact for
    polynomials of the degrees involved here."""
    u, wu = np.polynomial.legendre.leggauss(n)
    phi = np.linspace(0, 2 * np.pi, 2 * n, endpoint=False)
    U, P = np.meshgrid(u, phi, indexing="ij")
    s = np.sqrt(1 - U ** 2)
    dirs = np.stack([s * np.cos(P), s * np.sin(P), U], axis=-1).reshape(-1, 3)
    w = (wu[:, None] * np.full(len(phi), 2 * np.pi / len(phi))[None, :]).reshape(-1)
    return dirs, w


def test_basis_is_orthonormal_on_the_sphere():
    dirs, w = sphere_quadrature()
    Y = sh_basis(dirs, 3)
    gram = (Y * w[:, None]).T @ Y
    np.testing.assert_allclose(gram, np.eye(16), atol=1e-12)


def test_zero_coefficients_give_mid_gray():
    np.testing.assert_array_equal(sh_to_rgb(np.zeros((3, 16)), [0, 0, 1]), [0.5, 0.5, 0.5])


@pytest.mark.parametrize("a", [-3.0, -1.0, 0.0, 0.7, 2.5])
def test_degree_zero(a):
    expected = np.clip(0.28209479 * a + 0.5, 0, 1)
    np.testing.assert_allclose(sh_to_rgb(np.full((3, 1), a), [0.6, 0.0, 0.8]),
                               [expected] * 3, atol=1e-8)
    assert SH_C0 == 0.28209479177387814


def test_degree_one_opposite_directions():
    rng = np.random.default_rng(0)
    sh = rng.normal(0, 0.2, (3, 4))
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    # direct basis: Y00 = C0, Y1 = C1 * (-y, z, -x)
    c1 = np.sqrt(3 / (4 * np.pi))
    lin = c1 * np.array([-d[1], d[2], -d[0]])
    dc = sh[:, 0] * 0.5 / np.sqrt(np.pi)
    odd = sh[:, 1:] @ lin
    np.testing.assert_allclose(sh_to_rgb(sh, d), np.clip(dc + odd + 0.5, 0, 1), atol=1e-12)
    np.testing.assert_allclose(sh_to_rgb(sh, -d), np.clip(dc - odd + 0.5, 0, 1), atol=1e-12)


def test_parity_of_each_band():
    rng = np.random.default_rng(1)
    d = rng.normal(size=(20, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    a, b = sh_basis(d, 3), sh_basis(-d, 3)
    for l in range(4):
        sl = slice(l * l, (l + 1) ** 2)
        np.testing.assert_allclose(b[:, sl], (-1) ** l * a[:, sl], atol=1e-14)


def test_basis_jacobian_matches_finite_differences():
    rng = np.random.default_rng(2)
    d = rng.normal(size=(5, 3))
    _, jac = sh_basis(d, 3, with_grad=True)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (sh_basis(d + e, 3) - sh_basis(d - e, 3)) / (2 * h)
        np.testing.assert_allclose(jac[..., k], fd, atol=1e-8)


def test_dc_inverse():
    rgb = np.array([0.1, 0.5, 0.9])
    sh = np.zeros((3, num_coeffs(2)))
    sh[:, 0] = rgb_to_sh_dc(rgb)
    np.testing.assert_allclose(sh_to_rgb(sh, [1, 0, 0]), rgb, atol=1e-14)


def test_invalid_degree():
    with pytest.raises(ValueError):
        sh_basis([0, 0, 1], 4)
    with pytest.raises(ValueError):
        sh_to_rgb(np.zeros((3, 5)), [0, 0, 1])
