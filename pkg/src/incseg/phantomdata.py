"""Synthetic abdominal phantoms with partial annotations.

Every case renders the whole organ catalog; a dataset only labels the
classes it was built for, the rest stays background. A per-dataset
``shift`` in [0, 1] raises organ intensities (up to 30% of the [0, 1]
intensity range) and translates the whole layout (up to 15% of each grid
axis).

Volume file layout (integers little-endian)::

    magic    8 bytes   b"INCSGVOL"
    version  uint32    VOLUME_VERSION
    hlen     uint32
    header   hlen      UTF-8 JSON, sorted keys: shape, spacing,
                       labeled_classes, dataset_id, case_id, seed
    image    prod(shape) float32 LE
    labels   prod(shape) uint16 LE
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import gamma

from .errors import ConfigError, TruncatedVolumeError, VolumeFormatError, VolumeVersionError

VOLUME_MAGIC = b"INCSGVOL"
VOLUME_VERSION = 1
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
MAX_INTENSITY_SHIFT = 0.3
MAX_TRANSLATION = 0.15


@dataclass(frozen=True)
class Organ:
    id: int
    name: str
    center: tuple[float, ...]  # fraction of each grid axis
    radii: tuple[float, ...]  # fraction of each grid axis
    intensity: float
    exponent: float = 2.0


# rows run head-to-feet, columns patient-right to patient-left
ABDOMEN_2D = (
    Organ(1, "liver", (0.40, 0.28), (0.20, 0.15), 0.55, 2.5),
    Organ(2, "spleen", (0.35, 0.72), (0.10, 0.08), 0.70),
    Organ(3, "pancreas", (0.52, 0.56), (0.05, 0.11), 0.42),
    Organ(4, "right_kidney", (0.72, 0.32), (0.08, 0.06), 0.85),
    Organ(5, "left_kidney", (0.70, 0.70), (0.08, 0.06), 0.85),
)

BODY = ((0.5, 0.5), (0.42, 0.45), 0.2)


@dataclass(frozen=True)
class PhantomSpec:
    grid: tuple[int, ...] = (64, 64)
    organs: tuple[Organ, ...] = ABDOMEN_2D
    spacing: tuple[float, ...] | None = None
    position_sigma: float = 1.5  # voxels
    radius_sigma: float = 0.06  # relative
    intensity_sigma: float = 0.03
    noise_sigma: float = 0.05
    shift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.shift <= 1.0:
            raise ConfigError(f"shift must lie in [0, 1], got {self.shift}")
        nd = len(self.grid)
        if nd not in (2, 3):
            raise ConfigError("grid must be 2D or 3D")
        for o in self.organs:
            if len(o.center) != nd or len(o.radii) != nd:
                raise ConfigError(f"organ {o.name} does not match the {nd}D grid")
        ids = [o.id for o in self.organs]
        if len(set(ids)) != len(ids) or min(ids) < 1:
            raise ConfigError("organ ids must be unique positive integers")

    @property
    def ndim(self) -> int:
        return len(self.grid)

    @property
    def voxel_spacing(self) -> tuple[float, ...]:
        return self.spacing or (1.0,) * self.ndim

    def organ(self, cls: int) -> Organ:
        for o in self.organs:
            if o.id == cls:
                return o
        raise ConfigError(f"class {cls} is not in the organ catalog {[o.id for o in self.organs]}")

    def with_(self, **kw) -> "PhantomSpec":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if "organs" in d:
            d["organs"] = tuple(
                Organ(**{**o, "center": tuple(o["center"]), "radii": tuple(o["radii"])})
                for o in d["organs"]
            )
        for k in ("grid", "spacing"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def uniform_3d_spec(**kw) -> PhantomSpec:
    """Same layout as the 2D catalog, extruded to superellipsoids on a 32^3 grid."""
    organs = tuple(
        replace(o, center=(0.5, *o.center), radii=(0.25, *o.radii)) for o in ABDOMEN_2D
    )
    return PhantomSpec(grid=(32, 32, 32), organs=organs, **kw)


@dataclass
class VolumeRecord:
    image: np.ndarray
    labels: np.ndarray
    labeled_classes: tuple[int, ...]
    dataset_id: str
    case_id: str
    seed: int
    spacing: tuple[float, ...] = field(default=None)

    def __post_init__(self):
        if self.spacing is None:
            self.spacing = (1.0,) * self.image.ndim
        self.labeled_classes = tuple(int(c) for c in self.labeled_classes)

    def validate(self) -> None:
        if self.image.shape != self.labels.shape:
            raise VolumeFormatError("image and label shapes differ")
        if not np.isfinite(self.image).all():
            raise VolumeFormatError(f"case {self.case_id}: non-finite image values")
        extra = set(np.unique(self.labels).tolist()) - {0, *self.labeled_classes}
        if extra:
            raise VolumeFormatError(
                f"case {self.case_id}: labels {sorted(extra)} outside {self.labeled_classes}"
            )


def superellipse_measure(radii: Sequence[float], exponent: float) -> float:
    """Area (2D) or volume (3D) of ``sum |x_k / r_k|^p <= 1``."""
    d = len(radii)
    return 2**d * float(np.prod(radii)) * gamma(1 + 1 / exponent) ** d / gamma(1 + d / exponent)


def _case_rng(spec: PhantomSpec, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, SPLITS.index(split), index])


def _grid(shape):
    return np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")


def _inside(coords, center, radii, p):
    acc = np.zeros(coords[0].shape)
    for x, c, r in zip(coords, center, radii):
        acc += np.abs((x - c) / r) ** p
    return acc <= 1.0


def organ_geometry(spec: PhantomSpec, rng: np.random.Generator | None = None):
    """Per-organ (center, radii, intensity) in voxel units, jittered by ``rng``."""
    grid = np.asarray(spec.grid, dtype=np.float64)
    offset = spec.shift * MAX_TRANSLATION * grid
    out = []
    for o in spec.organs:
        center = np.asarray(o.center) * grid + offset
        radii = np.asarray(o.radii) * grid
        level = o.intensity + spec.shift * MAX_INTENSITY_SHIFT
        if rng is not None:
            center = center + rng.normal(0.0, spec.position_sigma, spec.ndim)
            radii = radii * (1.0 + rng.normal(0.0, spec.radius_sigma, spec.ndim))
            level = level + rng.normal(0.0, spec.intensity_sigma)
        out.append((o, center, np.maximum(radii, 0.5), level))
    return out


def render_case(spec: PhantomSpec, split: str, index: int):
    """Image plus full (all-organ) label map for one case."""
    rng = _case_rng(spec, split, index)
    coords = _grid(spec.grid)
    grid = np.asarray(spec.grid, dtype=np.float64)
    image = np.zeros(spec.grid)
    full = np.zeros(spec.grid, dtype=np.uint16)
    (bc, br, blevel) = BODY
    body_center = np.asarray(bc[: spec.ndim] if spec.ndim == 2 else (0.5, *bc)) * grid
    body_radii = np.asarray(br if spec.ndim == 2 else (0.45, *br)) * grid
    body_center = body_center + spec.shift * MAX_TRANSLATION * grid
    image[_inside(coords, body_center, body_radii, 2.0)] = blevel
    for organ, center, radii, level in organ_geometry(spec, rng):
        mask = _inside(coords, center, radii, organ.exponent)
        image[mask] = level
        full[mask] = organ.id
    image += rng.normal(0.0, spec.noise_sigma, spec.grid)
    return image.astype(np.float32), full


def _partial(full: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    return np.where(np.isin(full, list(classes)), full, 0).astype(np.uint16)


def generate_stage_dataset(spec: PhantomSpec, stage_classes: Sequence[int], count: int,
                           split: str = "train", dataset_id: str | None = None) -> list[VolumeRecord]:
    """``count`` cases of ``split`` labeling only ``stage_classes``."""
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
    for c in stage_classes:
        spec.organ(c)
    classes = tuple(sorted(int(c) for c in stage_classes))
    dataset_id = dataset_id or "D" + "-".join(map(str, classes))
    out = []
    for i in range(count):
        image, full = render_case(spec, split, i)
        out.append(
            VolumeRecord(image, _partial(full, classes), classes, dataset_id,
                         f"{split}-{i:04d}", spec.seed, spec.voxel_spacing)
        )
    return out


def build_joint_dataset(spec: PhantomSpec, all_classes: Sequence[int] | None = None,
                        count: int = 0, split: str = "train",
                        dataset_id: str = "joint") -> list[VolumeRecord]:
    """Fully labeled counterpart of :func:`generate_stage_dataset` (same images)."""
    classes = all_classes if all_classes is not None else [o.id for o in spec.organs]
    return generate_stage_dataset(spec, classes, count, split, dataset_id)


# -- on-disk format ---------------------------------------------------------


def volume_to_bytes(rec: VolumeRecord) -> bytes:
    header = {
        "shape": list(rec.image.shape),
        "spacing": [float(s) for s in rec.spacing],
        "labeled_classes": list(rec.labeled_classes),
        "dataset_id": rec.dataset_id,
        "case_id": rec.case_id,
        "seed": int(rec.seed),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return b"".join([
        VOLUME_MAGIC,
        struct.pack("<II", VOLUME_VERSION, len(hbytes)),
        hbytes,
        np.ascontiguousarray(rec.image, dtype="<f4").tobytes(),
        np.ascontiguousarray(rec.labels, dtype="<u2").tobytes(),
    ])


def volume_from_bytes(data: bytes) -> VolumeRecord:
    if len(data) < 16 or data[:8] != VOLUME_MAGIC:
        raise VolumeFormatError("bad magic: not a volume file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VOLUME_VERSION:
        raise VolumeVersionError(f"volume version {version}, this reader handles {VOLUME_VERSION}")
    try:
        header = json.loads(data[16 : 16 + hlen].decode())
        shape = tuple(int(n) for n in header["shape"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise VolumeFormatError(f"corrupt volume header: {e}") from None
    n = math.prod(shape)
    start = 16 + hlen
    expected = start + 6 * n
    if len(data) < expected:
        raise TruncatedVolumeError(f"truncated payload: expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise VolumeFormatError(f"{len(data) - expected} trailing bytes after label payload")
    image = np.frombuffer(data, "<f4", n, start).reshape(shape).astype(np.float32)
    labels = np.frombuffer(data, "<u2", n, start + 4 * n).reshape(shape).astype(np.uint16)
    return VolumeRecord(image, labels, tuple(header["labeled_classes"]), header["dataset_id"],
                        header["case_id"], header["seed"], tuple(header["spacing"]))


def write_volume(rec: VolumeRecord, path) -> None:
    Path(path).write_bytes(volume_to_bytes(rec))


def read_volume(path) -> VolumeRecord:
    return volume_from_bytes(Path(path).read_bytes())


# -- dataset directories ----------------------------------------------------


def write_dataset(root, spec: PhantomSpec, classes: Sequence[int], counts: dict[str, int],
                  dataset_id: str) -> Path:
    """Render all splits into ``root/<dataset_id>/`` and write ``manifest.json``."""
    d = Path(root) / dataset_id
    d.mkdir(parents=True, exist_ok=True)
    cases = []
    for split in SPLITS:
        for rec in generate_stage_dataset(spec, classes, counts.get(split, 0), split, dataset_id):
            name = f"{rec.case_id}.vol"
            write_volume(rec, d / name)
            cases.append({"case_id": rec.case_id, "split": split, "file": name})
    manifest = {
        "schema_version": MANIFEST_VERSION,
        "dataset_id": dataset_id,
        "labeled_classes": sorted(int(c) for c in classes),
        "phantom": spec.to_dict(),
        "cases": cases,
    }
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


class DatasetStore:
    """Reads dataset manifests and volumes, recording every manifest opened."""

    def __init__(self):
        self.opened: list[str] = []

    def manifest(self, path) -> dict:
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        self.opened.append(str(path.resolve()))
        m = json.loads(path.read_text())
        if m.get("schema_version") != MANIFEST_VERSION:
            raise VolumeVersionError(f"{path}: manifest schema {m.get('schema_version')}")
        m["_root"] = str(path.parent)
        return m

    def load(self, path, split: str) -> list[VolumeRecord]:
        m = self.manifest(path)
        root = Path(m["_root"])
        out = []
        for case in m["cases"]:
            if case["split"] != split:
                continue
            rec = read_volume(root / case["file"])
            if set(rec.labeled_classes) != set(m["labeled_classes"]):
                raise VolumeFormatError(f"{case['file']}: labeled classes disagree with manifest")
            rec.validate()
            out.append(rec)
        return out
