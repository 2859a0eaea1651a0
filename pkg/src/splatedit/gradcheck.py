"""Central finite-difference check of the rasterizer's analytic gradients."""
from dataclasses import dataclass

import numpy as np

from .rasterizer import RenderSettings, render_backward, render_forward
from .scene import Camera
from .synthetic import random_scene


@dataclass
class GradCheckResult:
    seed: int
    max_rel_error: float
    checked: int
    worst: tuple


def check_scene(scene, cam, settings, weights, h=1e-5, floor=1e-6):
    """Compare ``render_backward`` with central differences of sum(weights * render).

    Only entries where either gradient exceeds ``floor`` in magnitude are
    compared. Returns (max relative error, entries compared, worst entry).
    """
    def loss(s):
        return float(np.sum(render_forward(s, cam, settings).rgb * weights))

    analytic = render_backward(scene, cam, weights, settings)
    probe = scene.copy()
    worst, worst_at, checked = 0.0, None, 0
    for name, arr in probe.params().items():
        for ix in np.ndindex(arr.shape):
            old = arr[ix]
            arr[ix] = old + h
            up = loss(probe)
            arr[ix] = old - h
            down = loss(probe)
            arr[ix] = old
            fd = (up - down) / (2 * h)
            an = analytic[name][ix]
            mag = max(abs(fd), abs(an))
            if mag <= floor:
                continue
            checked += 1
            rel = abs(fd - an) / mag
            if rel > worst:
                worst, worst_at = rel, (name, ix, fd, float(an))
    return worst, checked, worst_at


def rasterizer_gradcheck(seed, n_gaussians=8, size=32, sh_degree=1, h=1e-5):
    """Finite-difference check on one random scene and camera."""
    rng = np.random.default_rng(seed)
    scene = random_scene(n_gaussians, seed=seed, sh_degree=sh_degree,
                         scale_range=(0.08, 0.3), opacity_range=(0.3, 0.85))
    scene.means[:, 2] *= 0.5
    eye = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), -4.0])
    cam = Camera.look_at(eye, [0.0, 0.0, 0.0], size, size, fov_y=0.6)
    settings = RenderSettings(background=tuple(rng.uniform(0, 1, 3)))
    weights = rng.normal(size=(size, size, 3))
    worst, checked, at = check_scene(scene, cam, settings, weights, h=h)
    return GradCheckResult(seed, worst, checked, at)
