"""File formats: GSPL scene files, camera JSON documents, PNG images and masks.

GSPL layout (little-endian)::

    b"GSPL" | u32 version=1 | u32 sh_degree | u64 count
    count x f32[3 + 4 + 3 + 1 + 3*(L+1)^2 + 1]
        mean, quat (w,x,y,z), log-scale, opacity logit, sh (channel-major),
        editable (0.0 / 1.0)

Scenes hold float64 arrays; saving rounds them to float32, so
``load(save(scene))`` is exact whenever the scene already holds
float32-representable values (true for anything loaded from a file).
"""
import json
import os
import struct

import numpy as np
from PIL import Image

from .scene import Camera, GaussianScene
from .sh import MAX_DEGREE, num_coeffs

MAGIC = b"GSPL"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


class SceneFormatError(ValueError):
    """Base class for unreadable scene files."""


class MalformedHeaderError(SceneFormatError):
    pass


class TruncatedPayloadError(SceneFormatError):
    pass


class UnsupportedVersionError(SceneFormatError):
    pass


def record_width(sh_degree):
    return 3 + 4 + 3 + 1 + 3 * num_coeffs(sh_degree) + 1


def scene_to_bytes(scene):
    n = len(scene)
    rec = np.concatenate([
        scene.means, scene.quats, scene.log_scales,
        scene.opacity_logits[:, None], scene.sh.reshape(n, 3 * num_coeffs(scene.sh_degree)),
        scene.editable[:, None].astype(np.float64),
    ], axis=1).astype("<f4")
    return _HEADER.pack(MAGIC, VERSION, scene.sh_degree, n) + rec.tobytes()


def scene_from_bytes(data):
    if len(data) < _HEADER.size:
        raise MalformedHeaderError(f"file too short for header ({len(data)} bytes)")
    magic, version, degree, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"version {version} (supported: {VERSION})")
    if degree > MAX_DEGREE:
        raise MalformedHeaderError(f"sh_degree {degree} exceeds {MAX_DEGREE}")
    width = record_width(degree)
    need = count * width * 4
    payload = data[_HEADER.size:]
    if len(payload) < need:
        raise TruncatedPayloadError(
            f"expected {need} payload bytes for {count} gaussians, got {len(payload)}")
    rec = np.frombuffer(payload, dtype="<f4", count=count * width)
    rec = rec.reshape(count, width).astype(np.float64)
    k = num_coeffs(degree)
    return GaussianScene(
        rec[:, 0:3], rec[:, 3:7], rec[:, 7:10], rec[:, 10],
        rec[:, 11:11 + 3 * k].reshape(count, 3, k),
        rec[:, 11 + 3 * k] != 0.0, sh_degree=degree)


def save_scene(scene, path):
    with open(path, "wb") as f:
        f.write(scene_to_bytes(scene))
    return path


def load_scene(path):
    with open(path, "rb") as f:
        return scene_from_bytes(f.read())


def camera_to_record(cam):
    rec = {
        "width": cam.width, "height": cam.height,
        "fx": float(cam.fx), "fy": float(cam.fy),
        "cx": float(cam.cx), "cy": float(cam.cy),
        "rotation": [float(v) for v in cam.R.reshape(-1)],
        "translation": [float(v) for v in cam.t],
        "image": cam.image_path,
    }
    if cam.mask_path is not None:
        rec["mask"] = cam.mask_path
    return rec


def camera_from_record(rec, base_dir=None):
    def resolve(p):
        if p is None or base_dir is None or os.path.isabs(p):
            return p
        return os.path.join(base_dir, p)

    return Camera(rec["width"], rec["height"], rec["fx"], rec["fy"],
                  rec["cx"], rec["cy"], np.reshape(rec["rotation"], (3, 3)),
                  rec["translation"], resolve(rec.get("image")),
                  resolve(rec.get("mask")))


def save_cameras(cameras, path):
    with open(path, "w") as f:
        json.dump([camera_to_record(c) for c in cameras], f, indent=1)
    return path


def load_cameras(path):
    """Load cameras; relative image/mask paths resolve against the JSON's folder."""
    with open(path) as f:
        records = json.load(f)
    base = os.path.dirname(os.path.abspath(path))
    return [camera_from_record(r, base) for r in records]


def write_png(path, image):
    """Write an (H, W) or (H, W, 3) float image in [0, 1] as 8-bit PNG."""

    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)
    return path


def read_png(path):
    """Read a PNG as float64 in [0, 1]; RGB(A) becomes (H, W, 3)."""

    with Image.open(path) as im:
        if im.mode in ("L", "I", "1"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def read_mask(path):
    """8-bit grayscale mask; values >= 128 become 1."""

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)


def write_mask(path, mask):

    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)
    return path
