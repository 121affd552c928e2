# ---
# jupyter:
#   jupytext:
#     formats: ipynb,py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Training a small eye detector
#
# Render synthetic eye images, train the full keypoint head for a short
# schedule, and score it. The numbers here come from a deliberately tiny run;
# the acceptance suite trains for longer.

# %%
import numpy as np

from eyeload import detector as D
from eyeload import metrics, synthdata

train = synthdata.generate_dataset(400, seed=1)
test = synthdata.generate_dataset(60, seed=2, prefix="test")
print(train[0].record)

# %%
import matplotlib.pyplot as plt

fig, axes = plt.subplots(1, 4, figsize=(10, 2.6))
for ax, s in zip(axes, train):
    ax.imshow(s.image, cmap="gray", vmin=0, vmax=1)
    x1, y1, x2, y2 = s.record.bounding_box
    ax.add_patch(plt.Rectangle((x1, y1), x2 - x1, y2 - y1, fill=False, color="y"))
    ax.set_title(s.record.state)
    ax.axis("off")

# %%
cfg = D.DetectorConfig(prior=D.median_prior([s.record for s in train]), seed=0)
model, log = D.train([(s.image, s.record) for s in train], cfg, D.TrainSchedule(iterations=120, batch_size=8))
print({k: round(v, 3) for k, v in log[-1].items()})

# %% [markdown]
# Score with the keypoint AP suite. At this budget the box head is usable
# while the keypoints are still coarse.

# %%
outs = model.infer_batch(np.stack([s.image for s in test]))
preds = [[metrics.prediction_from_detection(d) for d in o.detections] for o in outs]
report = metrics.evaluate_detections(preds, [s.record for s in test])
print("box AP50", round(report["box_ap50"], 3), "mAP", round(report["mAP"], 3),
      "mean error", round(report["mean_weighted_error"], 4))

# %%
fig, ax = plt.subplots(figsize=(4, 4))
s, o = test[0], outs[0]
ax.imshow(s.image, cmap="gray", vmin=0, vmax=1)
for d in o.detections:
    k = d.keypoints
    for name, p in (("lat", k.lateral), ("med", k.medial), ("pupil", k.pupil)):
        if p is not None:
            ax.plot(*p, "r+")
            ax.text(p[0] + 1, p[1] - 1, name, color="r", fontsize=7)
ax.axis("off")
