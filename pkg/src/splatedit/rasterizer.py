"""Tile-based differentiable rasterization of Gaussian scenes.

Pipeline: project every Gaussian to a 2D splat (EWA affine approximation),
emit one sort key per (splat, overlapped tile), sort, then alpha-composite
each tile front to back. The backward pass recomputes the per-tile forward
state and propagates image gradients to every stored scene parameter.

Footprint rule: a splat's pixel rectangle is the bounding box of the ellipse
on which ``alpha * G`` drops to ``tail_eps``. Outside the rectangle the splat
contributes less than ``tail_eps`` per pixel, so the tiled result matches an
untiled compositor to roughly ``tail_eps`` times the overlap count.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .scene import GaussianScene, covariance_from_params, quat_to_rotmat, sigmoid
from .sh import sh_basis


@dataclass
class RenderSettings:
    background: tuple = (0.0, 0.0, 0.0)
    tile_size: int = 16
    near: float = 0.01
    dilation: float = 0.3
    max_alpha: float = 0.99
    min_transmittance: float = 1e-4
    tail_eps: float = 1e-8
    workers: int = 1


DEFAULT_SETTINGS = RenderSettings()


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    rgb: np.ndarray
    alpha: float
    source_index: int
    rect: tuple = None  # inclusive pixel bounds (x0, x1, y0, y1)


@dataclass
class RenderedImage:
    rgb: np.ndarray
    alpha: np.ndarray
    contributors: np.ndarray


class Projection:
    """Projected, unculled splats of one scene/camera pair (struct of arrays).

    ``index`` maps each splat back to its scene row. The remaining arrays
    cache what the backward pass needs.
    """

    def __init__(self, **arrays):
        self.__dict__.update(arrays)

    def __len__(self):
        return len(self.index)

    def splat(self, i):
        return Splat2D(self.mean2d[i].copy(), self.cov2d[i].copy(),
                       float(self.depth[i]), self.rgb[i].copy(),
                       float(self.alpha[i]), int(self.index[i]),
                       tuple(int(v) for v in self.rect[i]))


def _footprint_scale(alpha, tail_eps):
    """Mahalanobis radius at which alpha * G equals tail_eps (NaN if never)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(2.0 * np.log(alpha / tail_eps))


def project_gaussians(scene, cam, settings=DEFAULT_SETTINGS):
    """Project every Gaussian of ``scene`` into ``cam``; culled ones are dropped."""
    R, tc = cam.R, cam.t
    t = scene.means @ R.T + tc
    z = t[:, 2]
    keep = z > settings.near
    idx = np.nonzero(keep)[0]
    t = t[idx]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]

    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / (z * z)
    M = J @ R
    cov3d = covariance_from_params(scene.quats[idx], scene.log_scales[idx])
    cov2d = M @ cov3d @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += settings.dilation
    cov2d[:, 1, 1] += settings.dilation

    alpha = sigmoid(scene.opacity_logits[idx])
    k = _footprint_scale(np.minimum(alpha, settings.max_alpha), settings.tail_eps)
    hx = k * np.sqrt(cov2d[:, 0, 0])
    hy = k * np.sqrt(cov2d[:, 1, 1])
    with np.errstate(invalid="ignore"):
        x0 = np.ceil(mean2d[:, 0] - hx)
        x1 = np.floor(mean2d[:, 0] + hx)
        y0 = np.ceil(mean2d[:, 1] - hy)
        y1 = np.floor(mean2d[:, 1] + hy)
    x0 = np.maximum(x0, 0)
    y0 = np.maximum(y0, 0)
    x1 = np.minimum(x1, cam.width - 1)
    y1 = np.minimum(y1, cam.height - 1)
    visible = np.isfinite(k) & (x0 <= x1) & (y0 <= y1)

    sel = np.nonzero(visible)[0]
    idx = idx[sel]
    det = cov2d[sel, 0, 0] * cov2d[sel, 1, 1] - cov2d[sel, 0, 1] ** 2
    c2 = cov2d[sel]
    conic = np.stack([c2[:, 1, 1] / det, -c2[:, 0, 1] / det, c2[:, 0, 0] / det], axis=1)

    dirs = scene.means[idx] - cam.center
    dist = np.linalg.norm(dirs, axis=1)
    dirs = dirs / dist[:, None]
    basis, dbasis = sh_basis(dirs, scene.sh_degree, with_grad=True)
    raw_rgb = np.einsum("nck,nk->nc", scene.sh[idx], basis) + 0.5

    rect = np.stack([x0[sel], x1[sel], y0[sel], y1[sel]], axis=1).astype(np.int64)
    return Projection(
        index=idx, mean2d=mean2d[sel], cov2d=c2, conic=conic,
        depth=t[sel, 2], alpha=alpha[sel], rgb=np.clip(raw_rgb, 0.0, 1.0),
        rect=rect, t_cam=t[sel], J=J[sel], M=M[sel], cov3d=cov3d[sel],
        dirs=dirs, dist=dist, basis=basis, dbasis=dbasis, raw_rgb=raw_rgb,
    )


def project_splat(g, cam, settings=DEFAULT_SETTINGS):
    """Project a single Gaussian; returns a Splat2D or None when culled."""
    proj = project_gaussians(GaussianScene.from_gaussians([g]), cam, settings)
    return proj.splat(0) if len(proj) else None


def _depth_bits(depth):
    # positive float32 bit patterns sort like the floats themselves
    return np.asarray(depth, dtype=np.float32).view(np.uint32).astype(np.uint64)


def build_tile_keys(splats, width, height, tile=16):
    """Duplicate splats per overlapped tile and sort by (tile, depth, index).

    ``splats`` is a :class:`Projection` or a sequence of :class:`Splat2D`.
    Returns ``(keys, payload)``: sorted uint64 keys ``tile_id << 32 | depth``
    and the splat position each key refers to.
    """
    if not isinstance(splats, Projection):
        splats = list(splats)
        rect = np.array([s.rect for s in splats], dtype=np.int64).reshape(-1, 4)
        depth = np.array([s.depth for s in splats], dtype=np.float64)
        source = np.array([s.source_index for s in splats], dtype=np.int64)
    else:
        rect, depth, source = splats.rect, splats.depth, splats.index
    tiles_x = (width + tile - 1) // tile
    tx0, tx1 = rect[:, 0] // tile, rect[:, 1] // tile
    ty0, ty1 = rect[:, 2] // tile, rect[:, 3] // tile
    nx = tx1 - tx0 + 1
    counts = nx * (ty1 - ty0 + 1)
    owner = np.repeat(np.arange(len(rect)), counts)
    starts = np.cumsum(counts) - counts
    local = np.arange(counts.sum()) - np.repeat(starts, counts)
    tx = tx0[owner] + local % nx[owner]
    ty = ty0[owner] + local // nx[owner]
    tile_id = (ty * tiles_x + tx).astype(np.uint64)
    keys = (tile_id << np.uint64(32)) | _depth_bits(depth)[owner]
    order = np.lexsort((source[owner], keys))
    return keys[order], owner[order]


def _tile_ranges(keys, n_tiles):
    tile_of_key = (keys >> np.uint64(32)).astype(np.int64)
    bounds = np.searchsorted(tile_of_key, np.arange(n_tiles + 1))
    return bounds


def _tile_pixels(tile_id, tiles_x, tile, width, height):
    ty, tx = divmod(tile_id, tiles_x)
    xs = np.arange(tx * tile, min((tx + 1) * tile, width))
    ys = np.arange(ty * tile, min((ty + 1) * tile, height))
    px, py = np.meshgrid(xs, ys)
    return px.ravel(), py.ravel(), ys, xs


def _tile_state(proj, sel, px, py, colors, bg, settings):
    """Front-to-back compositing of splats ``sel`` over pixels (px, py)."""
    mean = proj.mean2d[sel]
    dx = px[None, :] - mean[:, 0:1]
    dy = py[None, :] - mean[:, 1:2]
    conic = proj.conic[sel]
    power = -0.5 * (conic[:, 0:1] * dx * dx + conic[:, 2:3] * dy * dy) - conic[:, 1:2] * dx * dy
    G = np.exp(power)
    raw = proj.alpha[sel][:, None] * G
    sig = np.minimum(raw, settings.max_alpha)
    t_incl = np.cumprod(1.0 - sig, axis=0)
    t_before = np.empty_like(t_incl)
    t_before[0] = 1.0
    t_before[1:] = t_incl[:-1]
    # termination is a prefix rule, so one pass gives exact transmittances
    active = t_before >= settings.min_transmittance
    sig = np.where(active, sig, 0.0)
    w = sig * t_before
    n_active = active.sum(axis=0)
    t_final = np.where(n_active > 0, t_incl[np.maximum(n_active - 1, 0), np.arange(len(px))], 1.0)
    color = w.T @ colors[sel] + t_final[:, None] * bg[None, :]
    return dict(dx=dx, dy=dy, G=G, raw=raw, sig=sig, active=active,
                t_before=t_before, w=w, t_final=t_final, color=color)


def _rasterize(proj, colors, bg, width, height, settings, weight_maps=None):
    """Shared tiled compositor. ``colors`` is (M, C) per splat, ``bg`` (C,).

    With ``weight_maps`` of shape (K, H, W) also returns an (M, K) array of
    blend weights summed against each map.
    """
    tile = settings.tile_size
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n_ch = colors.shape[1]
    out = np.empty((height, width, n_ch))
    out[:] = bg
    alpha = np.zeros((height, width))
    contrib = np.zeros((height, width), dtype=np.int64)
    acc = None
    if weight_maps is not None:
        weight_maps = np.asarray(weight_maps, dtype=np.float64)
        acc = np.zeros((len(proj), len(weight_maps)))
    if len(proj) == 0:
        return out, alpha, contrib, acc

    keys, payload = build_tile_keys(proj, width, height, tile)
    bounds = _tile_ranges(keys, tiles_x * tiles_y)

    def work(tile_id):
        lo, hi = bounds[tile_id], bounds[tile_id + 1]
        if lo == hi:
            return None
        sel = payload[lo:hi]
        px, py, ys, xs = _tile_pixels(tile_id, tiles_x, tile, width, height)
        st = _tile_state(proj, sel, px, py, colors, bg, settings)
        tile_acc = None
        if weight_maps is not None:
            maps = weight_maps[:, ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1].reshape(len(weight_maps), -1)
            tile_acc = st["w"] @ maps.T
        return sel, ys, xs, st["color"], st["t_final"], st["active"].sum(0), tile_acc

    results = _map_tiles(work, tiles_x * tiles_y, settings.workers)
    for res in results:
        if res is None:
            continue
        sel, ys, xs, color, t_final, n_active, tile_acc = res
        shape = (len(ys), len(xs))
        out[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = color.reshape(shape + (n_ch,))
        alpha[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = (1.0 - t_final).reshape(shape)
        contrib[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = n_active.reshape(shape)
        if tile_acc is not None:
            acc[sel] += tile_acc
    return out, alpha, contrib, acc


def _map_tiles(fn, n, workers):
    # results come back in tile order, so merged sums never depend on scheduling
    if workers <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, range(n)))


def render_forward(scene, cam, settings=DEFAULT_SETTINGS):
    """Render ``scene`` from ``cam`` into a :class:`RenderedImage`."""
    proj = project_gaussians(scene, cam, settings)
    bg = np.asarray(settings.background, dtype=np.float64)
    rgb, alpha, contrib, _ = _rasterize(proj, proj.rgb, bg, cam.width, cam.height, settings)
    return RenderedImage(rgb, alpha, contrib)


def render_features(scene, cam, features, settings=DEFAULT_SETTINGS):
    """Composite arbitrary per-Gaussian features (N, C) with zero background."""
    proj = project_gaussians(scene, cam, settings)
    features = np.asarray(features, dtype=np.float64).reshape(len(scene), -1)
    bg = np.zeros(features.shape[1])
    img, _, _, _ = _rasterize(proj, features[proj.index], bg, cam.width, cam.height, settings)
    return img


def blend_weight_sums(scene, cam, weight_maps, settings=DEFAULT_SETTINGS):
    """Per-Gaussian blend weight (sigma * transmittance) summed against maps.

    Returns an (N, K) array; culled Gaussians get zeros.
    """
    proj = project_gaussians(scene, cam, settings)
    bg = np.asarray(settings.background, dtype=np.float64)
    _, _, _, acc = _rasterize(proj, proj.rgb, bg, cam.width, cam.height,
                              settings, weight_maps=weight_maps)
    full = np.zeros((len(scene), len(weight_maps)))
    full[proj.index] = acc
    return full


def _quat_backward(q, gR):
    """Gradient of R(q / |q|) with respect to the raw quaternion q."""
    n = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / n
    w, x, y, z = qn.T
    g = gR
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0]
              - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    gqn = np.stack([gw, gx, gy, gz], axis=1)
    return (gqn - qn * np.sum(qn * gqn, axis=1, keepdims=True)) / n


def render_backward(scene, cam, grad_rgb, settings=DEFAULT_SETTINGS, stats=None):
    """Gradients of a scalar loss L given dL/d(rendered rgb) of shape (H, W, 3).

    Returns a dict keyed like ``GaussianScene.params()``; culled Gaussians
    receive exact zeros. If ``stats`` is a dict it receives
    "mean2d_grad_norm" (N,), the screen-space position gradient norm used by
    densification, and "visible" (N,) bool.
    """
    grads = {k: np.zeros_like(v) for k, v in scene.params().items()}
    proj = project_gaussians(scene, cam, settings)
    n = len(proj)
    if n == 0:
        if stats is not None:
            stats["mean2d_grad_norm"] = np.zeros(len(scene))
            stats["visible"] = np.zeros(len(scene), dtype=bool)
        return grads
    grad_rgb = np.asarray(grad_rgb, dtype=np.float64)
    bg = np.asarray(settings.background, dtype=np.float64)
    W, H, tile = cam.width, cam.height, settings.tile_size
    tiles_x = (W + tile - 1) // tile
    tiles_y = (H + tile - 1) // tile
    keys, payload = build_tile_keys(proj, W, H, tile)
    bounds = _tile_ranges(keys, tiles_x * tiles_y)
    colors = proj.rgb

    def work(tile_id):
        lo, hi = bounds[tile_id], bounds[tile_id + 1]
        if lo == hi:
            return None
        sel = payload[lo:hi]
        px, py, ys, xs = _tile_pixels(tile_id, tiles_x, tile, W, H)
        g = grad_rgb[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1].reshape(-1, 3)
        if not g.any():
            return None
        st = _tile_state(proj, sel, px, py, colors, bg, settings)
        sig, w, raw = st["sig"], st["w"], st["raw"]
        g_color = w @ g
        cg = colors[sel] @ g.T
        # S_k: everything composited behind splat k, background included
        s_dot_g = np.sum(st["color"] * g, axis=1)[None, :] - np.cumsum(w * cg, axis=0)
        one_minus = 1.0 - sig
        safe = np.where(one_minus > 1e-12, one_minus, 1.0)
        g_sig = st["t_before"] * cg - s_dot_g / safe
        g_sig = np.where(st["active"] & (raw < settings.max_alpha), g_sig, 0.0)
        g_alpha = np.sum(g_sig * st["G"], axis=1)
        gp = g_sig * raw
        dx, dy = st["dx"], st["dy"]
        a = proj.conic[sel, 0][:, None]
        b = proj.conic[sel, 1][:, None]
        c = proj.conic[sel, 2][:, None]
        g_mean = np.stack([np.sum(gp * (a * dx + b * dy), axis=1),
                           np.sum(gp * (b * dx + c * dy), axis=1)], axis=1)
        g_conic = np.stack([-0.5 * np.sum(gp * dx * dx, axis=1),
                            -0.5 * np.sum(gp * dx * dy, axis=1),
                            -0.5 * np.sum(gp * dy * dy, axis=1)], axis=1)
        return sel, g_color, g_alpha, g_mean, g_conic

    g_color = np.zeros((n, 3))
    g_alpha = np.zeros(n)
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))  # entries of d(power)-weighted d d^T: (xx, xy, yy)
    for res in _map_tiles(work, tiles_x * tiles_y, settings.workers):
        if res is None:
            continue
        sel, gc, ga, gm, gk = res
        g_color[sel] += gc
        g_alpha[sel] += ga
        g_mean[sel] += gm
        g_conic[sel] += gk

    if stats is not None:
        norm = np.zeros(len(scene))
        norm[proj.index] = np.linalg.norm(g_mean, axis=1)
        vis = np.zeros(len(scene), dtype=bool)
        vis[proj.index] = True
        stats["mean2d_grad_norm"] = norm
        stats["visible"] = vis

    # conic = cov^-1  ->  dL/dcov = -conic Gc conic
    Gc = np.empty((n, 2, 2))
    Gc[:, 0, 0] = g_conic[:, 0]
    Gc[:, 0, 1] = Gc[:, 1, 0] = g_conic[:, 1]
    Gc[:, 1, 1] = g_conic[:, 2]
    conic = np.empty((n, 2, 2))
    conic[:, 0, 0] = proj.conic[:, 0]
    conic[:, 0, 1] = conic[:, 1, 0] = proj.conic[:, 1]
    conic[:, 1, 1] = proj.conic[:, 2]
    g_cov2d = -conic @ Gc @ conic

    # cov2d = M Sigma M^T, M = J R, mean2d = pi(t)
    M, S, J = proj.M, proj.cov3d, proj.J
    g_sigma = np.swapaxes(M, 1, 2) @ g_cov2d @ M
    g_M = 2.0 * g_cov2d @ M @ S
    g_J = g_M @ cam.R.T
    x, y, z = proj.t_cam.T
    g_t = np.einsum("nij,ni->nj", J, g_mean)
    g_t[:, 0] += g_J[:, 0, 2] * (-cam.fx / z ** 2)
    g_t[:, 1] += g_J[:, 1, 2] * (-cam.fy / z ** 2)
    g_t[:, 2] += (g_J[:, 0, 0] * (-cam.fx / z ** 2) + g_J[:, 0, 2] * (2 * cam.fx * x / z ** 3)
                  + g_J[:, 1, 1] * (-cam.fy / z ** 2) + g_J[:, 1, 2] * (2 * cam.fy * y / z ** 3))
    g_means = g_t @ cam.R

    # color = clip(SH(dir) + 0.5); dir = normalize(mean - center)
    idx = proj.index
    g_raw = g_color * ((proj.raw_rgb > 0.0) & (proj.raw_rgb < 1.0))
    grads["sh"][idx] = g_raw[:, :, None] * proj.basis[:, None, :]
    g_dir = np.einsum("nc,nck,nkd->nd", g_raw, scene.sh[idx], proj.dbasis)
    d = proj.dirs
    g_means += (g_dir - d * np.sum(d * g_dir, axis=1, keepdims=True)) / proj.dist[:, None]
    grads["means"][idx] = g_means

    # Sigma = (Rq S)(Rq S)^T
    q = scene.quats[idx]
    s = np.exp(scene.log_scales[idx])
    Rq = quat_to_rotmat(q)
    g_sigma = 0.5 * (g_sigma + np.swapaxes(g_sigma, 1, 2))
    g_Mq = 2.0 * g_sigma @ (Rq * s[:, None, :])
    grads["log_scales"][idx] = np.sum(g_Mq * Rq, axis=1) * s
    grads["quats"][idx] = _quat_backward(q, g_Mq * s[:, None, :])

    a = proj.alpha
    grads["opacity_logits"][idx] = g_alpha * a * (1.0 - a)
    return grads
