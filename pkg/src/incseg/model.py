"""Compact U-Net with an expandable 1x1 classifier head, plus checkpoints.

Checkpoint file layout (all integers little-endian)::

    magic    8 bytes   b"INCSGCKP"
    version  uint32    CHECKPOINT_VERSION
    hlen     uint32    length of the header in bytes
    header   hlen      UTF-8 JSON, sorted keys, no whitespace
    payload            float32 LE blocks, concatenated in header order

The header holds ``stage``, ``label_space``, ``arch``, ``meta`` (free-form
training metadata, including ``parent_hash`` and ``config_hash``) and
``blocks``: a list of ``[name, shape]`` pairs. Block names are the
``state_dict`` keys of :class:`SegmentationModel`, e.g.
``encoders.0.conv1.weight`` or ``head.bias``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ConfigError, InvalidInputError
from .labelspace import LabelSpace

CHECKPOINT_MAGIC = b"INCSGCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 1
    levels: int = 3
    width: int = 8
    dims: int = 2

    def __post_init__(self):
        if not 2 <= self.levels <= 4:
            raise ConfigError(f"levels must be in 2..4, got {self.levels}")
        if self.dims not in (2, 3):
            raise ConfigError(f"dims must be 2 or 3, got {self.dims}")


class _Block(nn.Module):
    def __init__(self, cin, cout, dims):
        super().__init__()
        Conv = nn.Conv2d if dims == 2 else nn.Conv3d
        Norm = nn.InstanceNorm2d if dims == 2 else nn.InstanceNorm3d
        self.conv1 = Conv(cin, cout, 3, padding=1)
        self.norm1 = Norm(cout, affine=True)
        self.conv2 = Conv(cout, cout, 3, padding=1)
        self.norm2 = Norm(cout, affine=True)
        self.act = nn.LeakyReLU(0.01)

    def forward(self, x):
        x = self.act(self.norm1(self.conv1(x)))
        return self.act(self.norm2(self.conv2(x)))


class SegmentationModel(nn.Module):
    def __init__(self, arch: ArchConfig, num_classes: int):
        super().__init__()
        self.arch = arch
        dims, w = arch.dims, arch.width
        Conv = nn.Conv2d if dims == 2 else nn.Conv3d
        Up = nn.ConvTranspose2d if dims == 2 else nn.ConvTranspose3d
        widths = [w * 2**i for i in range(arch.levels)]
        self.encoders = nn.ModuleList()
        cin = arch.in_channels
        for cw in widths:
            self.encoders.append(_Block(cin, cw, dims))
            cin = cw
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for hi, lo in zip(widths[::-1][:-1], widths[::-1][1:]):
            self.ups.append(Up(hi, lo, 2, stride=2))
            self.decoders.append(_Block(2 * lo, lo, dims))
        self.pool = nn.MaxPool2d(2) if dims == 2 else nn.MaxPool3d(2)
        self.head = Conv(widths[0], num_classes, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def num_classes(self) -> int:
        return self.head.out_channels

    @property
    def divisor(self) -> int:
        return 2 ** (self.arch.levels - 1)

    def features(self, x):
        if x.dim() != self.arch.dims + 2:
            raise InvalidInputError(
                f"expected input of shape (N, {self.arch.in_channels}, "
                f"{'*' * self.arch.dims}) for a {self.arch.dims}D model, got {tuple(x.shape)}"
            )
        bad = [s for s in x.shape[2:] if s % self.divisor]
        if bad:
            raise InvalidInputError(
                f"spatial shape {tuple(x.shape[2:])} must be divisible by {self.divisor}"
            )
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x if i == 0 else self.pool(x))
            skips.append(x)
        x = skips.pop()
        for up, dec in zip(self.ups, self.decoders):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return x

    def forward(self, x):
        return self.head(self.features(x))


def build_model(arch: ArchConfig, space: LabelSpace, t: int, seed: int) -> SegmentationModel:
    """Fresh model for stage ``t``; trunk initialised from ``seed``, head zeroed."""
    torch.manual_seed(seed)
    return SegmentationModel(arch, space.num_channels(t))


def forward(model: SegmentationModel, volume) -> torch.Tensor:
    return model(torch.as_tensor(volume))


def expand_classifier(model: SegmentationModel, num_new: int) -> SegmentationModel:
    """Return a copy with ``num_new`` extra head channels.

    New channels copy the background weights; background and new biases
    become ``b_bg - log(num_new + 1)``, so the old background probability is
    split evenly among background and the new classes.
    """
    if num_new < 0:
        raise ConfigError("num_new must be nonnegative")
    out = copy.deepcopy(model)
    if num_new == 0:
        return out
    old = model.head
    Conv = type(old)
    k = old.out_channels
    head = Conv(old.in_channels, k + num_new, 1).to(old.weight.dtype)
    with torch.no_grad():
        head.weight[:k] = old.weight
        head.bias[:k] = old.bias
        head.weight[k:] = old.weight[:1].expand(num_new, *old.weight.shape[1:])
        shifted = old.bias[0] - math.log(num_new + 1)
        head.bias[0] = shifted
        head.bias[k:] = shifted
    out.head = head
    return out


class Teacher:
    """Frozen, inference-only view of a stage model."""

    def __init__(self, model: SegmentationModel):
        self._model = copy.deepcopy(model).eval()
        for p in self._model.parameters():
            p.requires_grad_(False)

    @property
    def num_classes(self) -> int:
        return self._model.num_classes

    def __call__(self, x) -> torch.Tensor:
        with torch.no_grad():
            return self._model(torch.as_tensor(x))


def freeze_teacher(model_or_ckpt) -> Teacher | None:
    """Teacher for the next stage; ``None`` when there is no previous stage."""
    if model_or_ckpt is None:
        return None
    model = model_or_ckpt.model if isinstance(model_or_ckpt, Checkpoint) else model_or_ckpt
    return Teacher(model)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass
class Checkpoint:
    stage: int
    space: LabelSpace
    model: SegmentationModel
    meta: dict

    def header(self) -> dict:
        state = self.model.state_dict()
        return {
            "format": "incseg-checkpoint",
            "stage": self.stage,
            "label_space": self.space.to_dict(),
            "arch": asdict(self.model.arch),
            "meta": self.meta,
            "blocks": [[k, list(v.shape)] for k, v in state.items()],
        }

    def to_bytes(self) -> bytes:
        header = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode()
        parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
        for v in self.model.state_dict().values():
            parts.append(v.detach().cpu().numpy().astype("<f4").tobytes())
        return b"".join(parts)

    def save(self, path) -> str:
        """Write atomically; returns the sha256 of the file."""
        data = self.to_bytes()
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(path)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        if len(data) < 16:
            raise CheckpointError("checkpoint truncated inside the preamble")
        version, hlen = struct.unpack("<II", data[8:16])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        try:
            header = json.loads(data[16 : 16 + hlen].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt checkpoint header: {e}") from None
        space = LabelSpace.from_dict(header["label_space"])
        arch = ArchConfig(**header["arch"])
        model = SegmentationModel(arch, space.num_channels(header["stage"]))
        offset = 16 + hlen
        state = {}
        for name, shape in header["blocks"]:
            n = int(np.prod(shape)) * 4
            if offset + n > len(data):
                raise CheckpointError(
                    f"checkpoint truncated in block {name}: need {offset + n} bytes, have {len(data)}"
                )
            arr = np.frombuffer(data, dtype="<f4", count=n // 4, offset=offset).reshape(shape)
            state[name] = torch.from_numpy(arr.astype(np.float32))
            offset += n
        if offset != len(data):
            raise CheckpointError(f"{len(data) - offset} trailing bytes after last block")
        model.load_state_dict(state)
        return cls(header["stage"], space, model, header["meta"])

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
