"""Train the appearance transform model on top of a frozen spatial model.

The appearance model explains per-voxel intensity differences between the
atlas and a subject after anatomy is factored out: the subject is warped
into the atlas frame with the inverse field, and the net predicts an
additive delta there. A smoothness penalty, gated off at label boundaries,
keeps the delta from encoding anatomy.
"""
import numpy as np

from atlasaug import toydata
from atlasaug.fields import warp_linear_raw
from atlasaug.models import (AppearanceModel, SpatialModel, predict_appearance,
                             predict_displacement, train_appearance,
                             train_spatial)

params = toydata.ToyGenParams(size=48, warp_amplitude=4.0, warp_spacing=8,
                              intensity_jitter=0.15, bias_amplitude=0.2, seed=5)
tmpl_labels, atlas = toydata.make_template(params)
unlabeled = [toydata.make_subject(params, tmpl_labels, s)[0] for s in range(1, 6)]

spatial = SpatialModel.create(widths=(8, 16, 16), seed=0)
print("training the spatial model (300 steps)...")
train_spatial(spatial, atlas, unlabeled, steps=300, seed=0)

appearance = AppearanceModel.create(widths=(8, 16, 16), lambda_a=0.02, seed=1)
print("training the appearance model (300 steps)...")
train_appearance(appearance, atlas, tmpl_labels, unlabeled, spatial,
                 steps=300, seed=0)
print(f"appearance loss: {appearance.loss_history[0]:.5f} at step 1 -> "
      f"{np.mean(appearance.loss_history[-20:]):.5f} tail mean")

# what the delta looks like for one subject
subject = unlabeled[2]
inv = predict_displacement(spatial.inverse_net, subject, atlas)
registered = warp_linear_raw(subject, inv)
psi = predict_appearance(appearance, atlas, registered)
resid_before = np.abs(atlas - registered).mean()
resid_after = np.abs(atlas + psi - registered).mean()
print(f"\nmean |delta| = {np.abs(psi).mean():.4f}, "
      f"range [{psi.min():.3f}, {psi.max():.3f}]")
print(f"mean |atlas - registered subject|:        {resid_before:.4f}")
print(f"mean |atlas + delta - registered subject|: {resid_after:.4f}")
