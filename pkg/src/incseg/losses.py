"""Segmentation, distillation and CORR losses.

Every loss takes tensors with the channel axis at dim 1 and reduces with a
mean over all voxels of all samples. Targets are channel indices (use
:meth:`LabelSpace.encode` to convert class ids).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch

from .errors import (
    InvalidInputError,
    InvalidLabelError,
    NoPreviousStageError,
    NumericalError,
)
from .labelspace import (
    LabelSpace,
    pseudo_labels,
    remodel_kd,
    remodel_logits_corr,
    remodel_seg,
    softmax,
)

log = logging.getLogger(__name__)

LOG_EPS = 1e-12
DICE_EPS = 1e-5
W_CLAMP = (1e-3, 1e4)


@dataclass(frozen=True)
class LossWeights:
    seg: float = 1.0
    kd: float = 10.0
    corr: float = 1.0
    thr: float = 0.95
    n: int = 12
    clamp_lo: float = W_CLAMP[0]
    clamp_hi: float = W_CLAMP[1]

    def __post_init__(self):
        if min(self.seg, self.kd, self.corr) < 0:
            raise InvalidInputError("loss weights must be nonnegative")
        if not 0 < self.thr <= 1:
            raise InvalidInputError(f"THR must lie in (0, 1], got {self.thr}")
        if int(self.n) != self.n or self.n < 1:
            raise InvalidInputError(f"n must be a positive integer, got {self.n}")


@dataclass(frozen=True)
class StrategySpec:
    name: str
    remodel_seg: bool = False
    remodel_kd: bool = False
    use_kd: bool = False
    use_corr: bool = False

    @classmethod
    def named(cls, name: str) -> "StrategySpec":
        try:
            return STRATEGIES[name]
        except KeyError:
            raise InvalidInputError(
                f"unknown strategy {name!r}; choose from {sorted(STRATEGIES)}"
            ) from None


STRATEGIES = {
    "FT": StrategySpec("FT"),
    "LwF": StrategySpec("LwF", use_kd=True),
    "MiB": StrategySpec("MiB", remodel_seg=True, remodel_kd=True, use_kd=True),
    "MiB+CORR": StrategySpec(
        "MiB+CORR", remodel_seg=True, remodel_kd=True, use_kd=True, use_corr=True
    ),
}


def _flatten(x: torch.Tensor) -> torch.Tensor:
    """(N, C, *spatial) -> (voxels, C)."""
    return x.movedim(1, -1).reshape(-1, x.shape[1])


def _check_target(probs: torch.Tensor, target: torch.Tensor) -> None:
    if target.shape != probs.shape[:1] + probs.shape[2:]:
        raise InvalidInputError(
            f"target shape {tuple(target.shape)} does not match map {tuple(probs.shape)}"
        )


def ce_seg_loss(probs, target, valid_channels=None) -> torch.Tensor:
    """Mean negative log-probability at the labeled channel.

    ``valid_channels`` lists the channels a current-stage label may take;
    anything else (e.g. an old organ) raises :class:`InvalidLabelError`.
    """
    _check_target(probs, target)
    target = target.long()
    if valid_channels is not None:
        allowed = torch.zeros(probs.shape[1], dtype=torch.bool)
        allowed[list(valid_channels)] = True
        if target.numel() and (~allowed[target]).any():
            bad = sorted(set(target[~allowed[target]].tolist()))
            raise InvalidLabelError(
                f"label channels {bad} are not annotatable in this stage "
                f"(allowed {sorted(valid_channels)})"
            )
    p = probs.gather(1, target.unsqueeze(1))
    return -torch.log(p.clamp_min(LOG_EPS)).mean()


def dice_loss(probs, target, channels) -> torch.Tensor:
    """Soft Dice over the listed foreground channels, one minus the mean."""
    _check_target(probs, target)
    channels = list(channels)
    if not channels:
        log.warning("dice_loss called without foreground channels; returning 0")
        return probs.sum() * 0.0
    p = _flatten(probs)[:, channels]
    g = torch.stack([(target.reshape(-1) == c) for c in channels], dim=1).to(p.dtype)
    inter = (p * g).sum(dim=0)
    score = (2 * inter + DICE_EPS) / (p.sum(dim=0) + g.sum(dim=0) + DICE_EPS)
    return 1 - score.mean()


def kd_loss(q_hat, teacher_probs) -> torch.Tensor:
    """Soft-target cross-entropy of the student against the teacher softmax."""
    if q_hat.shape != teacher_probs.shape:
        raise InvalidInputError(
            f"student map {tuple(q_hat.shape)} and teacher map "
            f"{tuple(teacher_probs.shape)} differ"
        )
    per_voxel = -(teacher_probs * torch.log(q_hat.clamp_min(LOG_EPS))).sum(dim=1)
    return per_voxel.mean()


def corr_weights(teacher_probs, y_pseu, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Confidence weight map: ``(THR / conf)^n`` at the pseudo-label, 1 elsewhere."""
    _check_target(teacher_probs, y_pseu)
    idx = y_pseu.long().unsqueeze(1)
    conf = teacher_probs.gather(1, idx)
    # conf -> 0 would divide by zero; the clamp caps the result anyway
    w = (weights.thr / conf.clamp_min(1e-30)) ** weights.n
    w = w.clamp(weights.clamp_lo, weights.clamp_hi)
    return torch.ones_like(teacher_probs).scatter(1, idx, w)


def corr_loss(logits, old_logits, space: LabelSpace, t: int,
              weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Cross-entropy of the rescaled remodeled logits against teacher pseudo-labels."""
    if t < 1:
        raise NoPreviousStageError("CORR loss needs a previous-stage teacher")
    q_check = remodel_logits_corr(logits, space, t)
    with torch.no_grad():
        old_logits = old_logits.detach()
        if old_logits.shape != q_check.shape:
            raise InvalidInputError(
                f"teacher logits {tuple(old_logits.shape)} do not cover Y^{t - 1}"
            )
        y = pseudo_labels(old_logits)
        w = corr_weights(softmax(old_logits), y, weights)
    logp = torch.log_softmax(q_check * w, dim=1)
    return -logp.gather(1, y.unsqueeze(1)).mean()


@dataclass
class LossBreakdown:
    total: torch.Tensor
    terms: dict[str, float] = field(default_factory=dict)


def total_loss(logits, old_logits, target, space: LabelSpace, t: int,
               weights: LossWeights = LossWeights(),
               strategy: StrategySpec = STRATEGIES["MiB+CORR"]) -> LossBreakdown:
    """Weighted sum of the active terms for ``strategy``.

    Stage 0 (or a missing teacher) trains the segmentation term alone.
    ``target`` holds stage-``t`` channel indices.
    """
    probs = softmax(logits)
    first = t == 0 or old_logits is None
    q_tilde = probs if first or not strategy.remodel_seg else remodel_seg(probs, space, t)
    valid = [0, *space.new_channels(t)]
    ce = ce_seg_loss(q_tilde, target, valid)
    dice = dice_loss(q_tilde, target, space.new_channels(t))
    seg = ce + dice
    total = weights.seg * seg
    terms = {"ce": ce.item(), "dice": dice.item(), "seg": seg.item()}

    if not first and strategy.use_kd:
        n_old = space.num_channels(t - 1)
        teacher = softmax(old_logits.detach())
        if strategy.remodel_kd:
            q_hat = remodel_kd(probs, space, t)
        else:
            # plain LwF: student softmax restricted to the old channels
            q_hat = softmax(logits[:, :n_old])
        kd = kd_loss(q_hat, teacher)
        total = total + weights.kd * kd
        terms["kd"] = kd.item()

    if not first and strategy.use_corr:
        if weights.corr != 0:
            corr = corr_loss(logits, old_logits, space, t, weights)
            total = total + weights.corr * corr
            terms["corr"] = corr.item()
        else:
            # logged only; kept out of the graph so omega_3 = 0 equals MiB exactly
            with torch.no_grad():
                terms["corr"] = corr_loss(logits, old_logits, space, t, weights).item()

    terms["total"] = total.item()
    if not math.isfinite(terms["total"]):
        raise NumericalError(f"non-finite loss: {terms}")
    return LossBreakdown(total, terms)
