"""Lift 2D garment masks to a per-Gaussian editable flag."""
import numpy as np

from .rasterizer import DEFAULT_SETTINGS, blend_weight_sums, render_features

MIN_CONTRIBUTION = 1e-6


def view_fractions(scene, cameras, masks, settings=DEFAULT_SETTINGS):
    """Per view, the fraction of each Gaussian's blend weight inside the mask.

    Returns ``(fractions, totals)`` of shape (V, N); fractions are NaN where
    the Gaussian's total weight in that view is below ``MIN_CONTRIBUTION``.
    """
    if len(cameras) != len(masks):
        raise ValueError(f"{len(cameras)} cameras but {len(masks)} masks")
    fracs, totals = [], []
    for cam, mask in zip(cameras, masks):
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (cam.height, cam.width):
            raise ValueError(f"mask {mask.shape} does not match camera "
                             f"{(cam.height, cam.width)}")
        sums = blend_weight_sums(scene, cam, np.stack([mask, np.ones_like(mask)]), settings)
        inside, total = sums[:, 0], sums[:, 1]
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = np.where(total >= MIN_CONTRIBUTION, inside / total, np.nan)
        fracs.append(frac)
        totals.append(total)
    return np.array(fracs).reshape(len(cameras), len(scene)), np.array(totals)


def label_editable(scene, cameras, masks, tau=0.6, min_views=2, settings=DEFAULT_SETTINGS):
    """Copy of ``scene`` whose editable flag marks Gaussians with more than
    ``tau`` of their blend weight inside the mask in at least ``min_views`` views."""
    if len(masks) < min_views:
        raise ValueError(f"need at least {min_views} masked views, got {len(masks)}")
    fracs, _ = view_fractions(scene, cameras, masks, settings)
    with np.errstate(invalid="ignore"):
        votes = np.sum(fracs > tau, axis=0)
    out = scene.copy()
    out.editable = votes >= min_views
    return out


def render_editable_silhouette(scene, cam, settings=DEFAULT_SETTINGS):
    """Accumulated blend weight of editable Gaussians only, in [0, 1]."""
    img = render_features(scene, cam, scene.editable.astype(np.float64)[:, None], settings)
    return img[..., 0]
