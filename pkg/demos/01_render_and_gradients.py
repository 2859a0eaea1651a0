"""
Rendering a Gaussian scene and checking its gradients
=====================================================

Build a handful of Gaussians, render them through the tiled rasterizer,
then compare the analytic backward pass against central differences.
Writes ``render.png`` into the current directory.
"""

import numpy as np

from splatedit import Camera, Gaussian3D, GaussianScene, RenderSettings, render_forward
from splatedit.gradcheck import rasterizer_gradcheck
from splatedit.io import write_png

# Three overlapping blobs: a wide red one behind, a green and a blue in front.
scene = GaussianScene.from_gaussians([
    Gaussian3D.create([0.0, 0.0, 0.5], [0.6, 0.4, 0.2], 0.8, rgb=[0.9, 0.2, 0.2]),
    Gaussian3D.create([-0.3, 0.1, 0.0], [0.2, 0.2, 0.2], 0.7, rgb=[0.2, 0.8, 0.3]),
    Gaussian3D.create([0.35, -0.1, -0.2], [0.1, 0.3, 0.1], 0.9, rgb=[0.2, 0.3, 0.9]),
])
cam = Camera.look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0], 96, 64, fov_y=0.9)
out = render_forward(scene, cam, RenderSettings(background=(1.0, 1.0, 1.0)))
print("image", out.rgb.shape, "max alpha", out.alpha.max().round(3),
      "max contributors per pixel", out.contributors.max())
write_png("render.png", out.rgb)

# The same check the ``gradcheck`` command runs: random scene, random
# per-pixel weights, every parameter perturbed in turn.
for seed in range(3):
    result = rasterizer_gradcheck(seed)
    print(f"seed {seed}: {result.checked} gradient entries, "
          f"max relative error {result.max_rel_error:.1e}")
