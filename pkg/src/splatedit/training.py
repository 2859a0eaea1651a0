"""Scene fitting and garment editing loops.

``fit_scene`` is plain splatting optimization from posed images. ``run_edit``
optimizes only the editable Gaussians toward images produced by an injected
editor, regenerating those targets every ``refresh_interval`` iterations.
"""
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .diffusion import KVBank, multiview_reference_edit, persona_denoise
from .losses import mae_grad, mae_loss, perceptual_distance, perceptual_distance_grad
from .optim import Adam
from .rasterizer import RenderSettings, render_backward, render_forward
from .scene import GaussianScene, logit, quat_to_rotmat
from .sh import num_coeffs, rgb_to_sh_dc

DEFAULT_LR = {
    "means": 1.6e-4,
    "sh": 2.5e-3,
    "opacity_logits": 5e-2,
    "log_scales": 5e-3,
    "quats": 1e-3,
}
POSITION_LR_FINAL_RATIO = 0.01


class NonFiniteLossError(FloatingPointError):
    """Raised when the training loss stops being finite."""


class EditorError(RuntimeError):
    """An editor failed or returned an unusable image for one view."""

    def __init__(self, view, message):
        super().__init__(f"editor failed on view {view}: {message}")
        self.view = view


@dataclass
class EditConfig:
    lam: float = 0.55
    lambda1: float = 10.0
    lambda2: float = 15.0
    n_views: int = 4
    refresh_interval: int = 2500
    edit_iters: int = 4000
    lora_iters: int = 1000
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    background: tuple = (0.0, 0.0, 0.0)
    tile_size: int = 16
    view_order: str = "round-robin"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        for name in ("lambda1", "lambda2", "n_views", "refresh_interval", "lora_iters",
                     "tile_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.edit_iters < 0:
            raise ValueError("edit_iters must be non-negative")
        if any(v < 0 for v in self.lr.values()):
            raise ValueError("learning rates must be non-negative")
        if self.view_order not in ("round-robin", "random"):
            raise ValueError(f"unknown view order {self.view_order!r}")

    def settings(self):
        return RenderSettings(background=tuple(self.background), tile_size=self.tile_size)


def refresh_count(edit_iters, refresh_interval):
    """Number of target refreshes after initialization in an edit run."""
    if refresh_interval <= 0:
        raise ValueError("refresh_interval must be positive")
    return max(edit_iters - 1, 0) // refresh_interval


def position_lr(base, iteration, total, extent, final_ratio=POSITION_LR_FINAL_RATIO):
    """Log-linear decay from ``base * extent`` to ``base * final_ratio * extent``."""
    frac = min(iteration / max(total, 1), 1.0)
    return base * extent * final_ratio ** frac


def scene_extent(cameras):
    """Radius of the camera rig around its mean center (at least 1e-6)."""
    centers = np.array([c.center for c in cameras])
    return max(float(np.max(np.linalg.norm(centers - centers.mean(0), axis=1))) * 1.1, 1e-6)


class TrainingLog:
    """Newline-delimited JSON records, kept in memory and optionally streamed to a file."""

    def __init__(self, path=None):
        self.records = []
        self._fh = open(path, "w") if path is not None else None

    def write(self, **record):
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def events(self, kind):
        return [r for r in self.records if r.get("event") == kind]

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class GradientPatchDistance:
    """Default perceptual distance: patch statistics plus image-gradient L1 at three scales."""

    def distance(self, a, b):
        return perceptual_distance(a, b)

    def value_and_grad(self, a, b):
        return perceptual_distance_grad(a, b)


class IdentityEditor:
    """Returns the render unchanged; the edit becomes a fixed point."""

    def edit(self, image, conditioning, mask):
        return np.array(image, dtype=np.float64)


class OracleRecolorEditor:
    """Paints the masked region a flat target color (a deterministic test double)."""

    def __init__(self, target_rgb=(0.1, 0.2, 0.9), strength=1.0):
        self.target_rgb = np.asarray(target_rgb, dtype=np.float64)
        self.strength = float(strength)

    def edit(self, image, conditioning, mask):
        target = self.target_rgb if conditioning is None else np.asarray(conditioning, float)
        m = self.strength * np.asarray(mask, dtype=np.float64)[..., None]
        return (1.0 - m) * image + m * target


def _resize(img, height, width):
    chans = [np.asarray(Image.fromarray(img[..., c].astype(np.float32), mode="F")
                        .resize((width, height), Image.BILINEAR)) for c in range(img.shape[-1])]
    return np.stack(chans, axis=-1).astype(np.float64)


class ToyDiffusionEditor:
    """Garment editing with the toy denoiser and persona-blended attention.

    ``prepare`` edits ``n_views`` evenly spaced renders jointly with
    reference attention and records their keys/values; ``edit`` then
    denoises any single view with attention blended toward that bank.
    Images are resized to the denoiser's resolution and back, and only the
    masked region of the full-resolution render is replaced.
    """

    def __init__(self, denoiser, schedule, label=0, lam=0.55, n_views=4, steps=25,
                 strength=1.0, seed=0):
        self.denoiser = denoiser
        self.schedule = schedule
        self.label = label
        self.lam = lam
        self.n_views = n_views
        self.steps = steps
        self.strength = strength
        self.seed = seed
        self.bank = None

    def _small(self, image, mask):
        cfg = self.denoiser.config
        img = _resize(np.asarray(image, dtype=np.float64), cfg.height, cfg.width)
        m = _resize(np.asarray(mask, dtype=np.float64)[..., None], cfg.height, cfg.width)[..., 0]
        return np.clip(img, 0.0, 1.0), (m > 0.5).astype(np.float64)

    def prepare(self, images, masks):
        idx = np.linspace(0, len(images), self.n_views, endpoint=False).astype(int)
        small = [self._small(images[i], masks[i]) for i in idx]
        _, self.bank = multiview_reference_edit(
            np.stack([s[0] for s in small]), self.label, self.denoiser, self.schedule,
            masks=np.stack([s[1] for s in small]), seed=self.seed, steps=self.steps,
            record=True, strength=self.strength)

    def edit(self, image, conditioning, mask):
        label = self.label if conditioning is None else int(conditioning)
        small, m = self._small(image, mask)
        bank = self.bank if self.bank is not None else KVBank()
        lam = self.lam if self.bank is not None else 1.0
        out = persona_denoise(small, bank, lam, self.denoiser, self.schedule, label,
                              mask=m, seed=self.seed, steps=self.steps,
                              strength=self.strength)
        H, W = image.shape[:2]
        up = np.clip(_resize(out, H, W), 0.0, 1.0)
        full = np.asarray(mask, dtype=np.float64)[..., None]
        return (1.0 - full) * image + full * up


def _nonfinite(it, view, terms, scene):
    stats = {k: [float(np.nanmin(v)), float(np.nanmax(v)), int(np.sum(~np.isfinite(v)))]
             for k, v in scene.params().items()}
    return NonFiniteLossError(
        f"non-finite loss at iteration {it} (view {view}): {terms}; "
        f"per-parameter [min, max, non-finite count]: {stats}")


def _view_schedule(n_views, iters, order, seed):
    if order == "random":
        return np.random.default_rng(seed).integers(0, n_views, iters)
    return np.arange(iters) % n_views


def _check_target(view, target, shape):
    target = np.asarray(target, dtype=np.float64)
    if target.shape != shape:
        raise EditorError(view, f"returned shape {target.shape}, expected {shape}")
    if not np.all(np.isfinite(target)):
        raise EditorError(view, "returned non-finite values")
    if target.min() < 0.0 or target.max() > 1.0:
        raise EditorError(view, "returned values outside [0, 1]")
    return target


def _edit_targets(editor, scene, cameras, masks, conditioning, settings):
    renders = [render_forward(scene, cam, settings).rgb for cam in cameras]
    targets = []
    for v, (img, mask) in enumerate(zip(renders, masks)):
        try:
            out = editor.edit(img, conditioning, mask)
        except Exception as exc:
            raise EditorError(v, f"{type(exc).__name__}: {exc}") from exc
        targets.append(_check_target(v, out, img.shape))
    return renders, targets


def run_edit(scene, cameras, masks, editor, cfg=None, conditioning=None, log=None,
             perceptual=None):
    """Optimize the editable Gaussians of ``scene`` toward edited renders.

    Returns a new scene; rows of non-editable Gaussians are bit-identical to
    the input. ``log`` (a :class:`TrainingLog`) receives "init", "refresh"
    and per-iteration "iter" records.
    """
    cfg = cfg or EditConfig()
    perceptual = perceptual or GradientPatchDistance()
    log = log if log is not None else TrainingLog()
    if len(cameras) == 0 or len(cameras) != len(masks):
        raise ValueError(f"need one mask per camera, got {len(cameras)} cameras "
                         f"and {len(masks)} masks")
    if not np.any(scene.editable):
        raise ValueError("scene has no editable Gaussians; label it first")
    settings = cfg.settings()
    scene = scene.copy()
    rows = np.flatnonzero(scene.editable)
    params = scene.params()
    lr = dict(cfg.lr)
    base_pos_lr = lr.get("means", 0.0)
    extent = scene_extent(cameras)
    opt = Adam(params, lr=lr)

    t0 = time.perf_counter()
    if hasattr(editor, "prepare"):
        editor.prepare([render_forward(scene, c, settings).rgb for c in cameras], masks)
    _, targets = _edit_targets(editor, scene, cameras, masks, conditioning, settings)
    log.write(event="init", iteration=0, views=len(cameras), editable=int(len(rows)),
              time=time.perf_counter() - t0)

    order = _view_schedule(len(cameras), cfg.edit_iters, cfg.view_order, cfg.seed)
    for it in range(cfg.edit_iters):
        if it > 0 and it % cfg.refresh_interval == 0:
            _, targets = _edit_targets(editor, scene, cameras, masks, conditioning, settings)
            log.write(event="refresh", iteration=it, time=time.perf_counter() - t0)
        v = int(order[it])
        rgb = render_forward(scene, cameras[v], settings).rgb
        mae = mae_loss(rgb, targets[v])
        perc, g_perc = perceptual.value_and_grad(rgb, targets[v])
        loss = cfg.lambda1 * mae + cfg.lambda2 * perc
        if not np.isfinite(loss):
            raise _nonfinite(it, v, dict(loss=loss, mae=mae, perceptual=perc), scene)
        grad = cfg.lambda1 * mae_grad(rgb, targets[v]) + cfg.lambda2 * g_perc
        grads = render_backward(scene, cameras[v], grad, settings)
        opt.lr["means"] = position_lr(base_pos_lr, it, cfg.edit_iters, extent)
        opt.step(grads, rows=rows)
        if opt.lr.get("quats", 0.0) > 0.0:
            q = scene.quats[rows]
            scene.quats[rows] = q / np.linalg.norm(q, axis=1, keepdims=True)
        log.write(event="iter", iteration=it, view=v, loss=float(loss), mae=float(mae),
                  perceptual=float(perc), time=time.perf_counter() - t0)
    return scene


def _frustum_points(cameras, images, count, depth_range, rng):
    cam_idx = rng.integers(0, len(cameras), count)
    pts = np.empty((count, 3))
    rgb = np.empty((count, 3))
    for i, ci in enumerate(cam_idx):
        cam = cameras[ci]
        u = rng.uniform(-0.5, cam.width - 0.5)
        v = rng.uniform(-0.5, cam.height - 0.5)
        z = rng.uniform(*depth_range)
        p_cam = np.array([(u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z])
        pts[i] = cam.R.T @ (p_cam - cam.t)
        px = images[ci][int(np.clip(round(v), 0, cam.height - 1)),
                        int(np.clip(round(u), 0, cam.width - 1))]
        rgb[i] = px
    return pts, rgb


def _nearest_distance(points, k=3):
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    k = min(k, len(points) - 1)
    if k <= 0:
        return np.ones(len(points))
    nearest = np.sort(d2, axis=1)[:, :k]
    return np.sqrt(np.mean(nearest, axis=1))


def default_depth_range(cameras):
    """Depths spanning the rig's central region: distance to center +- half of it."""
    centers = np.array([c.center for c in cameras])
    mid = centers.mean(0)
    dist = float(np.mean(np.linalg.norm(centers - mid, axis=1)))
    if dist < 1e-9:
        return (0.5, 5.0)
    return (0.5 * dist, 1.5 * dist)


def init_scene(images, cameras, count=500, seed=0, sh_degree=0, depth_range=None,
               opacity=0.1):
    """Random Gaussians inside the union of camera frusta, colored from the images."""
    if len(cameras) == 0:
        raise ValueError("no views to initialize from")
    rng = np.random.default_rng(seed)
    depth_range = depth_range or default_depth_range(cameras)
    pts, rgb = _frustum_points(cameras, images, count, depth_range, rng)
    scale = np.clip(_nearest_distance(pts), 1e-4, None)
    sh = np.zeros((count, 3, num_coeffs(sh_degree)))
    sh[:, :, 0] = rgb_to_sh_dc(rgb)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (count, 1))
    return GaussianScene(pts, quats, np.repeat(np.log(scale)[:, None], 3, axis=1),
                         np.full(count, logit(opacity)), sh, sh_degree=sh_degree)


@dataclass
class FitConfig:
    iters: int = 2000
    n_init: int = 500
    sh_degree: int = 0
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    densify: bool = True
    densify_interval: int = 500
    densify_until: int = None
    grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    max_gaussians: int = 4000
    background: tuple = (0.0, 0.0, 0.0)
    tile_size: int = 16
    depth_range: tuple = None
    seed: int = 0

    def settings(self):
        return RenderSettings(background=tuple(self.background), tile_size=self.tile_size)


def _densify(scene, grad_avg, extent, cfg, rng):
    """Clone small high-gradient Gaussians, split large ones, prune transparent ones.

    Returns (new scene, source row of every new row, mask of new rows that
    are surviving originals rather than copies).
    """
    n = len(scene)
    hot = grad_avg >= cfg.grad_threshold
    room = max(cfg.max_gaussians - n, 0)
    if hot.sum() > room:
        cut = np.sort(grad_avg[hot])[::-1][room - 1] if room > 0 else np.inf
        hot &= grad_avg >= cut
    big = scene.scales.max(axis=1) > cfg.percent_dense * extent
    clone = np.flatnonzero(hot & ~big)
    split = np.flatnonzero(hot & big)

    parts, origin = [scene], [np.arange(n)]
    if len(clone):
        parts.append(scene.subset(clone))
        origin.append(clone)
    if len(split):
        child = scene.subset(np.repeat(split, 2))
        R = quat_to_rotmat(child.quats)
        local = rng.standard_normal((len(child), 3)) * child.scales
        child.means = child.means + np.einsum("nij,nj->ni", R, local)
        child.log_scales = child.log_scales - np.log(1.6)
        parts.append(child)
        origin.append(np.repeat(split, 2))
    out = parts[0]
    for p in parts[1:]:
        out = out.concat(p)
    origin = np.concatenate(origin)
    keep = np.ones(len(out), dtype=bool)
    keep[split] = False
    keep &= out.opacities >= cfg.prune_opacity
    keep_idx = np.flatnonzero(keep)
    return out.subset(keep_idx), origin[keep_idx], keep_idx < n


def fit_scene(images, cameras, iters=None, cfg=None, log=None, init=None):
    """Fit Gaussians to posed images with an L1 photometric loss.

    ``init`` overrides the random frustum initialization. Densification and
    pruning run every ``cfg.densify_interval`` iterations up to
    ``cfg.densify_until`` (default: half of the run).
    """
    cfg = cfg or FitConfig()
    if iters is not None:
        cfg = replace(cfg, iters=iters)
    if len(cameras) == 0 or len(images) != len(cameras):
        raise ValueError(f"need one image per camera, got {len(images)} images "
                         f"for {len(cameras)} cameras")
    log = log if log is not None else TrainingLog()
    settings = cfg.settings()
    images = [np.asarray(im, dtype=np.float64) for im in images]
    scene = init.copy() if init is not None else init_scene(
        images, cameras, cfg.n_init, cfg.seed, cfg.sh_degree, cfg.depth_range)
    if cfg.iters == 0:
        return scene
    rng = np.random.default_rng(cfg.seed + 1)
    extent = scene_extent(cameras)
    lr = dict(cfg.lr)
    opt = Adam(scene.params(), lr=lr)
    until = cfg.densify_until if cfg.densify_until is not None else cfg.iters // 2
    grad_sum = np.zeros(len(scene))
    seen = np.zeros(len(scene))
    order = np.random.default_rng(cfg.seed).permutation
    views = []
    t0 = time.perf_counter()
    for it in range(cfg.iters):
        if not views:
            views = list(order(len(cameras)))
        v = int(views.pop())
        rgb = render_forward(scene, cameras[v], settings).rgb
        loss = mae_loss(rgb, images[v])
        if not np.isfinite(loss):
            raise _nonfinite(it, v, dict(loss=loss), scene)
        stats = {}
        grads = render_backward(scene, cameras[v], mae_grad(rgb, images[v]), settings, stats)
        grad_sum += stats["mean2d_grad_norm"]
        seen += stats["visible"]
        opt.lr["means"] = position_lr(lr["means"], it, cfg.iters, extent)
        opt.step(grads)
        scene.normalize_rotations()
        log.write(event="iter", iteration=it, view=v, loss=float(loss), n=len(scene),
                  time=time.perf_counter() - t0)
        step = it + 1
        if cfg.densify and step % cfg.densify_interval == 0 and step <= until:
            avg = grad_sum / np.maximum(seen, 1)
            scene, origin, survived = _densify(scene, avg, extent, cfg, rng)
            # surviving original rows lead the new arrays and keep their moments
            opt.rebind(scene.params(), keep=origin[survived])
            grad_sum = np.zeros(len(scene))
            seen = np.zeros(len(scene))
            log.write(event="densify", iteration=step, n=len(scene),
                      time=time.perf_counter() - t0)
    return scene


def psnr(a, b, peak=1.0):
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(peak * peak / mse)
