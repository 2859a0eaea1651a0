"""
Fitting Gaussians to posed images
=================================

Render 12 views of the synthetic mannequin, fit a fresh scene to them from
random points in the camera frusta, and score novel views.
"""

import numpy as np

from splatedit import FitConfig, RenderSettings, fit_scene
from splatedit.rasterizer import render_forward
from splatedit.synthetic import mannequin_scene, orbit_cameras
from splatedit.training import TrainingLog, psnr

black = RenderSettings(background=(0.0, 0.0, 0.0))
truth, _ = mannequin_scene(seed=0)
cams = orbit_cameras(12, width=48, height=48)
images = [render_forward(truth, cam, black).rgb for cam in cams]

log = TrainingLog()
fitted = fit_scene(images, cams, cfg=FitConfig(iters=600, densify_interval=200), log=log)
losses = [r["loss"] for r in log.events("iter")]
print(f"L1 {np.mean(losses[:50]):.4f} -> {np.mean(losses[-50:]):.4f}, "
      f"{len(fitted)} Gaussians after densification")

novel = orbit_cameras(3, width=48, height=48, phase=0.4, elevation=0.3)
for cam in novel:
    score = psnr(render_forward(fitted, cam, black).rgb, render_forward(truth, cam, black).rgb)
    print(f"novel view PSNR {score:.1f} dB")
