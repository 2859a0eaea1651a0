"""Synthetic Gaussian scenes and camera rigs for tests, demos and benchmarks."""
import numpy as np

from .rasterizer import DEFAULT_SETTINGS, render_features
from .scene import Camera, GaussianScene, logit
from .sh import num_coeffs, rgb_to_sh_dc

BODY_RGB = np.array([0.6, 0.6, 0.6])
GARMENT_RGB = np.array([0.85, 0.15, 0.15])


def random_scene(n, seed=0, sh_degree=1, extent=1.0, scale_range=(0.05, 0.25),
                 opacity_range=(0.2, 0.9)):
    """``n`` random Gaussians in a cube of half-side ``extent`` around the origin."""
    rng = np.random.default_rng(seed)
    k = num_coeffs(sh_degree)
    sh = rng.normal(0.0, 0.4, (n, 3, k))
    sh[:, :, 0] = rgb_to_sh_dc(rng.uniform(0.05, 0.95, (n, 3)))
    return GaussianScene(
        rng.uniform(-extent, extent, (n, 3)),
        rng.normal(size=(n, 4)),
        np.log(rng.uniform(*scale_range, (n, 3))),
        logit(rng.uniform(*opacity_range, n)),
        sh, sh_degree=sh_degree)


def orbit_cameras(n, radius=3.5, elevation=0.2, width=64, height=64,
                  fov_y=np.deg2rad(50), center=(0.0, 0.0, 0.0), phase=0.0):
    """``n`` cameras evenly spaced on a horizontal circle, looking at ``center``.

    ``elevation`` is in radians; ``phase`` rotates the whole ring.
    """
    if n <= 0 or radius <= 0:
        raise ValueError("orbit needs a positive frame count and radius")
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for i in range(n):
        theta = phase + 2 * np.pi * i / n
        eye = center + radius * np.array([
            np.cos(elevation) * np.sin(theta),
            np.sin(elevation),
            -np.cos(elevation) * np.cos(theta),
        ])
        cams.append(Camera.look_at(eye, center, width, height, fov_y))
    return cams


def _cylinder_surface(rng, n, radius, y0, y1, cx=0.0, cz=0.0):
    theta = rng.uniform(0, 2 * np.pi, n)
    y = rng.uniform(y0, y1, n)
    return np.stack([cx + radius * np.cos(theta), y, cz + radius * np.sin(theta)], axis=1)


def _sphere_surface(rng, n, radius, center):
    v = rng.normal(size=(n, 3))
    return np.asarray(center) + radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def _cluster(points, scale, rgb, opacity):
    n = len(points)
    sh = np.zeros((n, 3, 1))
    sh[:, :, 0] = rgb_to_sh_dc(rgb)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianScene(points, quats, np.full((n, 3), np.log(scale)),
                         np.full(n, logit(opacity)), sh, sh_degree=0)


def mannequin_scene(seed=0, density=1.0, garment_rgb=GARMENT_RGB, body_rgb=BODY_RGB):
    """Two-cluster figure: a gray body and a colored garment shell forming the torso.

    Returns ``(scene, is_garment)``; world y is up, the figure spans about
    y in [-1, 1] and is centred on the origin.
    """
    rng = np.random.default_rng(seed)
    d = lambda n: max(1, int(round(n * density)))
    body_pts = np.concatenate([
        _sphere_surface(rng, d(60), 0.18, (0.0, 0.85, 0.0)),
        _cylinder_surface(rng, d(15), 0.08, 0.62, 0.68),
        _cylinder_surface(rng, d(30), 0.3, -0.5, -0.4),
        _cylinder_surface(rng, d(50), 0.08, -1.0, -0.5, cx=0.12),
        _cylinder_surface(rng, d(50), 0.08, -1.0, -0.5, cx=-0.12),
        _cylinder_surface(rng, d(30), 0.06, -0.05, 0.45, cx=0.52),
        _cylinder_surface(rng, d(30), 0.06, -0.05, 0.45, cx=-0.52),
    ])
    garment_pts = _cylinder_surface(rng, d(260), 0.3, -0.18, 0.48)
    body = _cluster(body_pts, 0.06, body_rgb, 0.9)
    garment = _cluster(garment_pts, 0.06, garment_rgb, 0.9)
    scene = body.concat(garment)
    is_garment = np.concatenate([np.zeros(len(body), bool), np.ones(len(garment), bool)])
    return scene, is_garment


def membership_masks(scene, member, cameras, threshold=0.5, settings=DEFAULT_SETTINGS):
    """Binary masks of pixels whose composited membership weight exceeds ``threshold``."""
    feat = np.asarray(member, dtype=np.float64)[:, None]
    return [(render_features(scene, cam, feat, settings)[..., 0] > threshold).astype(np.float64)
            for cam in cameras]
