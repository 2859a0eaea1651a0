"""Differentiable Gaussian splatting with garment-masked, diffusion-guided editing.

Everything is plain numpy. The pieces, roughly in pipeline order:

* :mod:`.scene`, :mod:`.sh`, :mod:`.io`: Gaussians, cameras and their files
* :mod:`.rasterizer`: tiled forward/backward rendering
* :mod:`.attention`, :mod:`.lora`, :mod:`.diffusion`: the toy image editor
* :mod:`.masklift`: 2D garment masks to per-Gaussian editable flags
* :mod:`.training`: scene fitting and the masked edit loop
* :mod:`.cli`: ``python -m splatedit``
"""
from .attention import persona_blend_attention, reference_concat_attention, sdp_attention
from .io import load_cameras, load_scene, save_cameras, save_scene
from .lora import AdaptedLinear, LowRankDelta, init_delta, merge_delta
from .masklift import label_editable, render_editable_silhouette
from .rasterizer import RenderSettings, render_backward, render_forward
from .scene import Camera, Gaussian3D, GaussianScene
from .training import (
    EditConfig,
    FitConfig,
    IdentityEditor,
    OracleRecolorEditor,
    ToyDiffusionEditor,
    fit_scene,
    run_edit,
)

__version__ = "0.1.0"
