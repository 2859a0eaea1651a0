"""Numbered PNG frames from an orbit around a scene."""
import os

import numpy as np

from .io import write_png
from .rasterizer import DEFAULT_SETTINGS, render_forward
from .synthetic import orbit_cameras


def render_turntable(scene, out_dir, frames, radius, elevation=0.2, center=(0.0, 0.0, 0.0),
                     width=64, height=64, fov_y=np.deg2rad(50), settings=DEFAULT_SETTINGS):
    """Render ``frames`` evenly spaced orbit views to ``out_dir/frame_0000.png`` ...

    Returns the written paths.
    """
    if frames <= 0 or radius <= 0 or not np.all(np.isfinite(center)):
        raise ValueError(f"invalid orbit: frames={frames}, radius={radius}, center={center}")
    if abs(elevation) >= np.pi / 2:
        raise ValueError("orbit elevation must be strictly between -90 and 90 degrees")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, cam in enumerate(orbit_cameras(frames, radius, elevation, width, height, fov_y,
                                          center)):
        path = os.path.join(out_dir, f"frame_{i:04d}.png")
        write_png(path, render_forward(scene, cam, settings).rgb)
        paths.append(path)
    return paths
