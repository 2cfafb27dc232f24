# %% [markdown]
# # Background remodeling
#
# A stage-1 model knows background, one old organ and one new organ.
# Its dataset only labels the new organ, so an old-organ voxel is marked
# background. Remodeling folds probabilities so neither loss punishes an
# answer that may well be right.

# %%
import torch

from incseg import LabelSpace, remodel_kd, remodel_seg, softmax

space = LabelSpace([[1], [2]])  # stage 0 adds class 1, stage 1 adds class 2
print("channels after stage 1:", space.cumulative(1))

logits = torch.tensor([[0.5, 2.0, -1.0]])  # confident about the old organ
p = softmax(logits)
print("student softmax     ", p.numpy().round(4))

# %% [markdown]
# For the segmentation loss every old channel is folded into background.
# The label "background" now accepts the old-organ answer at full credit.

# %%
q_seg = remodel_seg(p, space, 1)
print("segmentation view   ", q_seg.numpy().round(4))

# %% [markdown]
# For distillation the new channels fold into background. The teacher
# never saw class 2, so its "background" includes whatever class 2 is.

# %%
q_kd = remodel_kd(p, space, 1)
print("distillation view   ", q_kd.numpy().round(4))
print("both still sum to one:", float(q_seg.sum()), float(q_kd.sum()))

# %% [markdown]
# Reading the remodeled background as exp of a summed logit does not give
# a distribution; that form is kept only for comparison.

# %%
literal = remodel_kd(logits, space, 1, literal=True)
print("literal variant sums to", float(literal.sum()))
