"""
Multi-view editing with the toy denoiser
========================================

Train the small patch-transformer denoiser on procedural mannequins (about
two minutes on a laptop CPU), then edit four views of one mannequin with and
without shared reference attention and compare how consistent the garment
colours come out. Finally, edit an unseen view with persona blending.
"""

import numpy as np

from splatedit import toydata
from splatedit.diffusion import (
    NoiseSchedule,
    ToyDenoiser,
    multiview_reference_edit,
    persona_denoise,
    train_base,
)

schedule = NoiseSchedule.linear()
data = toydata.make_dataset(2000, seed=0)
model = ToyDenoiser(seed=0)
history = train_base(model, data["images"], data["labels"], schedule, steps=3000)
print(f"denoiser loss {history[:50].mean():.3f} -> {history[-200:].mean():.3f}")

views, masks, _ = toydata.multiview_set(4)


def garment_colours(images):
    return np.array([img[m > 0].mean(0) for img, m in zip(images, masks)])


# Label 0 garments come in red or blue. Editing the views independently lets
# each one pick its own; sharing the first view's keys/values pulls the others along.
for hooked in (False, True):
    out = multiview_reference_edit(views, 0, model, schedule, masks=masks, seed=3,
                                   use_reference=hooked)
    cols = garment_colours(out)
    print("reference hooks" if hooked else "independent    ",
          np.round(cols, 2).tolist(), "variance", cols.var(0).sum().round(4))

# Record the joint edit's keys/values and use them for a view that was not edited.
out, bank = multiview_reference_edit(views, 0, model, schedule, masks=masks, seed=3,
                                     record=True)
target = garment_colours(out).mean(0)
held, held_mask = toydata.mannequin(16, 16, toydata.SOURCE_GARMENT, 0.0)
for lam in (1.0, 0.55):
    edit = persona_denoise(held, bank, lam, model, schedule, 0, mask=held_mask, seed=7)
    col = edit[held_mask > 0].mean(0)
    print(f"lambda {lam}: held-out garment {np.round(col, 2)}, "
          f"distance to edited views {np.linalg.norm(col - target):.3f}")
