"""Staged label universe and the background-remodeling transforms.

All tensor operations take the channel axis at dim 1, so a batch of
volumes is ``(N, C, *spatial)`` and a plain list of voxels is ``(N, C)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import ConfigError, InvalidInputError, NoPreviousStageError

BACKGROUND = 0


@dataclass(frozen=True)
class LabelSpace:
    """Ordered, disjoint per-stage class sets.

    Channel 0 is the background; the remaining channels follow the order
    in which classes were introduced, so the channel layout of stage
    ``t - 1`` is always a prefix of the layout of stage ``t``.
    """

    stages: tuple[tuple[int, ...], ...]

    def __init__(self, stages: Sequence[Sequence[int]]):
        frozen = tuple(tuple(int(c) for c in s) for s in stages)
        seen: set[int] = set()
        for t, classes in enumerate(frozen):
            if len(set(classes)) != len(classes):
                raise ConfigError(f"stage {t} lists a class twice: {classes}")
            for c in classes:
                if c <= 0:
                    raise ConfigError(f"stage {t}: class ids must be positive, got {c}")
                if c in seen:
                    raise ConfigError(f"class {c} introduced in more than one stage")
                seen.add(c)
        object.__setattr__(self, "stages", frozen)

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def _check_stage(self, t: int) -> None:
        if not 0 <= t < len(self.stages):
            raise InvalidInputError(f"stage {t} outside 0..{len(self.stages) - 1}")

    def new_classes(self, t: int) -> tuple[int, ...]:
        self._check_stage(t)
        return self.stages[t]

    def cumulative(self, t: int) -> tuple[int, ...]:
        """Classes known after stage ``t`` in channel order, background first."""
        self._check_stage(t)
        out = [BACKGROUND]
        for classes in self.stages[: t + 1]:
            out.extend(classes)
        return tuple(out)

    def num_channels(self, t: int) -> int:
        return len(self.cumulative(t))

    def channel_of(self, cls: int) -> int:
        order = self.cumulative(len(self.stages) - 1)
        try:
            return order.index(int(cls))
        except ValueError:
            raise InvalidInputError(f"class {cls} is not part of the label space") from None

    def new_channels(self, t: int) -> list[int]:
        n_old = 1 if t == 0 else self.num_channels(t - 1)
        return list(range(n_old, self.num_channels(t)))

    def extend(self, classes: Sequence[int]) -> "LabelSpace":
        return LabelSpace([*self.stages, tuple(classes)])

    def truncate(self, t: int) -> "LabelSpace":
        self._check_stage(t)
        return LabelSpace(self.stages[: t + 1])

    def encode(self, labels, t: int) -> torch.Tensor:
        """Map a class-id label map to channel indices of stage ``t``."""
        labels = torch.as_tensor(labels)
        classes = self.cumulative(t)
        lut = torch.full((max(classes) + 1,), -1, dtype=torch.long)
        for ch, c in enumerate(classes):
            lut[c] = ch
        flat = labels.long()
        if flat.numel() and (flat.min() < 0 or flat.max() > max(classes)):
            raise InvalidInputError(f"label values outside Y^{t} = {classes}")
        out = lut[flat]
        if (out < 0).any():
            bad = sorted(set(flat[out < 0].tolist()))
            raise InvalidInputError(f"label values {bad} outside Y^{t} = {classes}")
        return out

    def decode(self, channels, t: int) -> torch.Tensor:
        classes = torch.tensor(self.cumulative(t), dtype=torch.long)
        return classes[torch.as_tensor(channels).long()]

    def to_dict(self) -> dict:
        return {"stages": [list(s) for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSpace":
        return cls(d["stages"])


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise InvalidInputError(f"{what} contains non-finite values")


def _check_channels(x: torch.Tensor, expected: int, what: str) -> None:
    if x.dim() < 2:
        raise InvalidInputError(f"{what} must have shape (N, C, ...), got {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise InvalidInputError(f"{what} has {x.shape[1]} channels, expected {expected}")


def _previous(space: LabelSpace, t: int) -> tuple[int, int]:
    if t < 1:
        raise NoPreviousStageError("stage 0 has no previous stage to remodel against")
    return space.num_channels(t - 1), space.num_channels(t)


def softmax(logits: torch.Tensor) -> torch.Tensor:
    _check_finite(logits, "logits")
    # torch's softmax subtracts the per-voxel max internally
    return torch.softmax(logits, dim=1)


def log_softmax(logits: torch.Tensor) -> torch.Tensor:
    _check_finite(logits, "logits")
    return torch.log_softmax(logits, dim=1)


def remodel_kd(x: torch.Tensor, space: LabelSpace, t: int, literal: bool = False) -> torch.Tensor:
    """Fold the probability of stage-``t`` classes into background.

    Returns a map over ``Y^{t-1}``. With ``literal=True`` the input is read
    as raw logits and the background channel is ``exp(z_b + sum z_new) / Z``;
    that variant does not sum to one and exists for comparison only.
    """
    n_old, n_all = _previous(space, t)
    _check_channels(x, n_all, "input")
    if literal:
        _check_finite(x, "logits")
        log_z = torch.logsumexp(x, dim=1, keepdim=True)
        bg = torch.exp(x[:, :1] + x[:, n_old:].sum(dim=1, keepdim=True) - log_z)
        return torch.cat([bg, torch.exp(x[:, 1:n_old] - log_z)], dim=1)
    bg = x[:, :1] + x[:, n_old:].sum(dim=1, keepdim=True)
    return torch.cat([bg, x[:, 1:n_old]], dim=1)


def remodel_seg(x: torch.Tensor, space: LabelSpace, t: int, literal: bool = False) -> torch.Tensor:
    """Fold all ``Y^{t-1}`` probability (background included) into background.

    Old non-background channels become exactly zero; new channels are passed
    through. ``literal=True`` takes logits, as in :func:`remodel_kd`.
    """
    n_old, n_all = _previous(space, t)
    _check_channels(x, n_all, "input")
    if literal:
        _check_finite(x, "logits")
        log_z = torch.logsumexp(x, dim=1, keepdim=True)
        bg = torch.exp(x[:, :n_old].sum(dim=1, keepdim=True) - log_z)
        new = torch.exp(x[:, n_old:] - log_z)
    else:
        bg = x[:, :n_old].sum(dim=1, keepdim=True)
        new = x[:, n_old:]
    zeros = torch.zeros_like(x[:, 1:n_old])
    return torch.cat([bg, zeros, new], dim=1)


def remodel_logits_corr(logits: torch.Tensor, space: LabelSpace, t: int) -> torch.Tensor:
    """Background logit plus the sum of new-class logits; old logits copied."""
    n_old, n_all = _previous(space, t)
    _check_channels(logits, n_all, "logits")
    _check_finite(logits, "logits")
    bg = logits[:, :1] + logits[:, n_old:].sum(dim=1, keepdim=True)
    return torch.cat([bg, logits[:, 1:n_old]], dim=1)


def pseudo_labels(old_logits: torch.Tensor, one_hot: bool = False) -> torch.Tensor:
    """Teacher argmax per voxel; ties go to the lowest channel index.

    Returns channel indices of shape ``(N, *spatial)``, or a one-hot float
    tensor shaped like the input when ``one_hot`` is set.
    """
    if old_logits.dim() < 2:
        raise InvalidInputError("logits must have shape (N, C, ...)")
    _check_finite(old_logits, "logits")
    # torch.argmax returns the first maximal index
    idx = torch.argmax(old_logits, dim=1)
    if not one_hot:
        return idx
    out = torch.zeros_like(old_logits)
    return out.scatter_(1, idx.unsqueeze(1), 1.0)
