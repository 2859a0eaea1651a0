"""Procedural "mannequin" images for the toy denoiser.

Each image is a gray figure (head, torso, legs) on a dark background with the
torso covered by a colored garment. A scalar ``view`` in [-1, 1] mimics a
viewpoint change by shifting the figure and narrowing the torso. Every
garment label owns two color modes, so the conditional image distribution
is bimodal.
"""
import json
import os

import numpy as np

from .io import read_mask, read_png, write_mask, write_png

BACKGROUND = np.array([0.1, 0.1, 0.12])
BODY = np.array([0.55, 0.55, 0.55])
SOURCE_GARMENT = np.array([0.9, 0.9, 0.9])

GARMENT_MODES = {
    0: (np.array([0.85, 0.15, 0.15]), np.array([0.15, 0.25, 0.85])),
    1: (np.array([0.15, 0.7, 0.2]), np.array([0.9, 0.8, 0.1])),
}


def mannequin(height, width, garment_rgb, view=0.0):
    """Render one mannequin; returns (image (H, W, 3), garment mask (H, W))."""
    ys, xs = np.mgrid[0:height, 0:width]
    u = (xs + 0.5) / width - 0.5 - 0.12 * view
    v = (ys + 0.5) / height
    squash = 1.0 - 0.3 * abs(view)

    head = (u / (0.11 * squash)) ** 2 + ((v - 0.16) / 0.11) ** 2 <= 1.0
    torso = (np.abs(u) <= 0.2 * squash) & (v >= 0.28) & (v <= 0.66)
    legs = (np.abs(np.abs(u) - 0.09 * squash) <= 0.06 * squash) & (v > 0.66) & (v <= 0.97)
    arms = (np.abs(np.abs(u) - 0.26 * squash) <= 0.045 * squash) & (v >= 0.3) & (v <= 0.6)

    img = np.empty((height, width, 3))
    img[:] = BACKGROUND
    img[head | legs | arms] = BODY
    img[torso] = garment_rgb
    return img, torso.astype(np.uint8)


def sample_garment(label, rng):
    modes = GARMENT_MODES[label]
    return modes[rng.integers(len(modes))]


def make_dataset(count, height=16, width=16, seed=0, labels=(0, 1)):
    """Random mannequins with random label, mode and view.

    Returns a dict of stacked arrays: images (N, H, W, 3), labels (N,),
    masks (N, H, W), views (N,).
    """
    rng = np.random.default_rng(seed)
    images, labs, masks, views = [], [], [], []
    for _ in range(count):
        label = int(rng.choice(labels))
        view = rng.uniform(-1.0, 1.0)
        img, mask = mannequin(height, width, sample_garment(label, rng), view)
        images.append(img)
        labs.append(label)
        masks.append(mask)
        views.append(view)
    return dict(images=np.stack(images), labels=np.array(labs),
                masks=np.stack(masks), views=np.array(views))


def multiview_set(n, height=16, width=16, garment_rgb=SOURCE_GARMENT, spread=0.8):
    """``n`` views of one mannequin spread evenly over [-spread, spread]."""
    views = np.linspace(-spread, spread, n) if n > 1 else np.zeros(1)
    pairs = [mannequin(height, width, garment_rgb, v) for v in views]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]), views


def two_color_images(count, height=8, width=8, seed=0):
    """Images split into two flat colored halves at a random row."""
    rng = np.random.default_rng(seed)
    palette = np.array([[0.9, 0.2, 0.2], [0.2, 0.3, 0.9]])
    out = np.empty((count, height, width, 3))
    for i in range(count):
        cut = rng.integers(2, height - 1)
        out[i, :cut] = palette[0]
        out[i, cut:] = palette[1]
    return out


def write_dataset(out_dir, count, height=16, width=16, seed=0):
    """Write PNG images, PNG masks and a JSON manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    data = make_dataset(count, height, width, seed)
    manifest = []
    for i in range(count):
        img_name = f"image_{i:04d}.png"
        mask_name = f"mask_{i:04d}.png"
        write_png(os.path.join(out_dir, img_name), data["images"][i])
        write_mask(os.path.join(out_dir, mask_name), data["masks"][i])
        manifest.append({"image": img_name, "label": int(data["labels"][i]),
                         "mask": mask_name, "view": float(data["views"][i])})
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1)
    return path


def read_dataset(manifest_path):
    base = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path) as f:
        manifest = json.load(f)
    images = np.stack([read_png(os.path.join(base, r["image"])) for r in manifest])
    masks = np.stack([read_mask(os.path.join(base, r["mask"])) for r in manifest])
    labels = np.array([r["label"] for r in manifest])
    return dict(images=images, labels=labels, masks=masks)
