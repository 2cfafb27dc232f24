# %% [markdown]
# # Confidence weights in the corrective loss
#
# The teacher's argmax over old classes becomes a pseudo-label. Its logit
# in the student is rescaled by W = (THR / confidence)^n: confident teacher
# voxels get W below one, uncertain ones get W above one.

# %%
import numpy as np
import torch

from incseg import LabelSpace, LossWeights, corr_loss, corr_weights

w = LossWeights()  # THR 0.95, n 12
for conf in (0.99, 0.95, 0.8, 0.6, 0.5):
    probs = torch.tensor([[1 - conf, conf]], dtype=torch.float64)
    W = corr_weights(probs, torch.tensor([1]), w)[0, 1].item()
    print(f"confidence {conf:.2f} -> W = {W:10.4f}")

# %% [markdown]
# How the loss on one voxel moves with teacher confidence. The student
# weakly prefers the old organ; the teacher agrees with varying certainty.

# %%
space = LabelSpace([[1], [2]])
student = torch.tensor([[0.2, 0.4, -0.3]], dtype=torch.float64)
for conf in np.linspace(0.55, 0.99, 5):
    teacher = torch.tensor([[0.0, np.log(conf / (1 - conf))]], dtype=torch.float64)
    print(f"teacher conf {conf:.2f}: loss {corr_loss(student, teacher, space, 1).item():.3e}")

# %% [markdown]
# Extreme confidences are clamped to [1e-3, 1e4] so float32 training stays
# finite.

# %%
probs = torch.tensor([[0.34, 0.33, 0.33]], dtype=torch.float64)
print("W at confidence 0.34:", corr_weights(probs, torch.tensor([0]), w)[0, 0].item())
