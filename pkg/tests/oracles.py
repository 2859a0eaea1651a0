"""Slow, direct reference implementations used as test oracles."""
import numpy as np

from splatedit.scene import quat_to_rotmat, sigmoid
from splatedit.sh import sh_to_rgb


def brute_force_render(scene, cam, settings):
    """Per-pixel compositor: project every Gaussian, sort by depth, blend.

    Independent of the tiled path: no tiles, no footprints, no shared
    projection code. A Gaussian is skipped for a pixel where its alpha-weighted
    density is below the footprint tail threshold, matching the renderer's
    documented support.
    """
    H, W = cam.height, cam.width
    bg = np.asarray(settings.background, dtype=np.float64)
    splats = []
    for i in range(len(scene)):
        t = cam.R @ scene.means[i] + cam.t
        if t[2] <= settings.near:
            continue
        Rq = quat_to_rotmat(scene.quats[i] / np.linalg.norm(scene.quats[i]))
        S = np.diag(np.exp(scene.log_scales[i]))
        cov3 = Rq @ S @ S @ Rq.T
        x, y, z = t
        J = np.array([[cam.fx / z, 0, -cam.fx * x / z ** 2],
                      [0, cam.fy / z, -cam.fy * y / z ** 2]])
        cov2 = J @ cam.R @ cov3 @ cam.R.T @ J.T + settings.dilation * np.eye(2)
        mu = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        d = scene.means[i] - cam.center
        rgb = sh_to_rgb(scene.sh[i], d / np.linalg.norm(d))
        splats.append((np.float32(z), i, mu, np.linalg.inv(cov2),
                       sigmoid(scene.opacity_logits[i]), rgb))
    splats.sort(key=lambda s: (s[0], s[1]))
    out = np.empty((H, W, 3))
    for r in range(H):
        for c in range(W):
            T, col = 1.0, np.zeros(3)
            p = np.array([c, r], dtype=np.float64)
            for _, _, mu, conic, alpha, rgb in splats:
                if T < settings.min_transmittance:
                    break
                dd = p - mu
                a = alpha * np.exp(-0.5 * dd @ conic @ dd)
                if a < settings.tail_eps:
                    continue
                sig = min(a, settings.max_alpha)
                col += T * sig * rgb
                T *= 1.0 - sig
            out[r, c] = col + T * bg
    return out


def brute_force_render_fast(scene, cam, settings):
    """Same compositor as :func:`brute_force_render`, vectorized over pixels."""
    H, W = cam.height, cam.width
    bg = np.asarray(settings.background, dtype=np.float64)
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    splats = []
    for i in range(len(scene)):
        t = cam.R @ scene.means[i] + cam.t
        if t[2] <= settings.near:
            continue
        Rq = quat_to_rotmat(scene.quats[i] / np.linalg.norm(scene.quats[i]))
        S = np.diag(np.exp(scene.log_scales[i]))
        x, y, z = t
        J = np.array([[cam.fx / z, 0, -cam.fx * x / z ** 2],
                      [0, cam.fy / z, -cam.fy * y / z ** 2]])
        cov2 = J @ cam.R @ Rq @ S @ S @ Rq.T @ cam.R.T @ J.T + settings.dilation * np.eye(2)
        mu = (cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy)
        d = scene.means[i] - cam.center
        splats.append((np.float32(z), i, mu, np.linalg.inv(cov2),
                       sigmoid(scene.opacity_logits[i]),
                       sh_to_rgb(scene.sh[i], d / np.linalg.norm(d))))
    splats.sort(key=lambda s: (s[0], s[1]))
    T = np.ones((H, W))
    col = np.zeros((H, W, 3))
    for _, _, mu, conic, alpha, rgb in splats:
        dx, dy = xs - mu[0], ys - mu[1]
        a = alpha * np.exp(-0.5 * (conic[0, 0] * dx * dx + 2 * conic[0, 1] * dx * dy
                                   + conic[1, 1] * dy * dy))
        sig = np.where((a >= settings.tail_eps) & (T >= settings.min_transmittance),
                       np.minimum(a, settings.max_alpha), 0.0)
        col += (T * sig)[..., None] * rgb
        T = T * (1.0 - sig)
    return col + T[..., None] * bg
