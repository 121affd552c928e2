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
# # Load sequences, tracking, and a scalar baseline
#
# In the synthetic load sequences, high load narrows the pupil's wandering.
# We check how separable the two classes are from the trajectory alone, then
# track a clip's annotated boxes and train the pupil-position classifier.

# %%
import numpy as np

from eyeload import synthdata, temporal
from eyeload.geometry import BBox
from eyeload.tracking import TrackerConfig, track_sequence

plans = [synthdata.plan_sequence(synthdata.LoadSequenceParams(load=("low", "high")[i % 2]), i) for i in range(400)]
disp = np.array([synthdata.clip_dispersion(p.trajectory) for p in plans])
labels = np.array([i % 2 for i in range(400)])
print("low load dispersion", disp[labels == 0].mean().round(4), "high", disp[labels == 1].mean().round(4))

# %%
import matplotlib.pyplot as plt

fig, ax = plt.subplots(figsize=(5, 3))
ax.hist(disp[labels == 0], bins=30, alpha=0.6, label="low")
ax.hist(disp[labels == 1], bins=30, alpha=0.6, label="high")
ax.set_xlabel("clip dispersion (eye widths)")
ax.legend()

# %% [markdown]
# Track one rendered clip from its annotated boxes. Blinks keep a box, so the
# whole clip should come back as a single track.

# %%
seq = synthdata.generate_sequence(synthdata.LoadSequenceParams(load="high"), 7)
boxes = [[BBox.from_corners(*r.bounding_box)] for r in seq.records]
tracks = track_sequence(boxes, TrackerConfig(theta=0.3))
print(len(tracks), "track(s), lengths", [len(t) for t in tracks])

# %% [markdown]
# A scalar classifier on horizontal pupil position, built straight from the
# rendered annotations (no detector in the loop).


# %%
def clip_from(seq, clip_id):
    recs = seq.records
    boxes = [BBox.from_corners(*r.bounding_box) for r in recs]
    x = np.array([seq.trajectory[t, 0] for t in range(len(recs))])
    return temporal.TrackClip(clip_id, seq.label, list(range(len(recs))), boxes, x[:, None], x)


clips = [clip_from(synthdata.generate_sequence(synthdata.LoadSequenceParams(load=("low", "high")[i % 2], frames=32), 500 + i), f"c{i}")
         for i in range(60)]
cfg = temporal.TemporalConfig(input_kind="pupil_x", input_dim=1, sequence_len=32, iterations=100)
result = temporal.train_temporal(clips[:40], cfg)
print("held-out accuracy", temporal.accuracy(result.predict(clips[40:]), [c.label for c in clips[40:]]))
