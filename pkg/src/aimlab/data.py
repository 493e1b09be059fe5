"""Packed datasets, meta-splits, episode/trajectory samplers and the synthetic generator.

AIMD layout (little-endian)::

    b"AIMD" | u32 version=1 | u32 N | u32 C | u32 H | u32 W | u8 dtype (0=u8, 1=f64)
    | u32 labels[N] | image payload (N*C*H*W items of dtype)

The split manifest lives next to the pack as ``<pack>.splits.json``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import ContractError

MAGIC = b"AIMD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIB")
SPLITS = ("meta_train", "meta_val", "meta_test")

OMNIGLOT_CLASSES = 1623
OMNIGLOT_IMAGES_PER_CLASS = 20
OMNIGLOT_SPLIT = (963, 0, 660)


class DatasetFormatError(ValueError):
    pass


class MagicError(DatasetFormatError):
    pass


class VersionError(DatasetFormatError):
    pass


class TruncationError(DatasetFormatError):
    pass


class LabelOverflowError(DatasetFormatError):
    pass


class SplitError(DatasetFormatError):
    pass


@dataclass
class PackedDataset:
    images: np.ndarray  # [N, C, H, W], uint8 or float64
    labels: np.ndarray  # [N] uint32
    split_manifest: dict = field(default_factory=dict)
    class_names: Optional[list] = None
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint32)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DatasetFormatError(f"images {self.images.shape} vs labels {self.labels.shape}")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise LabelOverflowError(f"label {int(self.labels.max())} >= class count {self.num_classes}")
        check_splits(self.split_manifest)
        self._by_class = {}
        for c in np.unique(self.labels):
            self._by_class[int(c)] = np.flatnonzero(self.labels == c)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def pixels(self, index=None) -> np.ndarray:
        """Float64 pixels in [0, 1]."""
        imgs = self.images if index is None else self.images[index]
        if imgs.dtype == np.uint8:
            return imgs.astype(np.float64) / 255.0
        return np.asarray(imgs, dtype=np.float64)

    def indices_of(self, cls: int) -> np.ndarray:
        return self._by_class.get(int(cls), np.empty(0, dtype=np.int64))

    def classes(self, split: Optional[str] = None) -> np.ndarray:
        if split is None:
            return np.array(sorted(self._by_class))
        if split not in self.split_manifest:
            raise SplitError(f"no split named {split!r}")
        return np.asarray(self.split_manifest[split], dtype=np.int64)

    def describe(self) -> dict:
        counts = np.bincount(self.labels.astype(np.int64), minlength=self.num_classes)
        present = counts[counts > 0]
        return {
            "images": int(self.labels.size),
            "classes": int(present.size),
            "images_per_class": sorted(set(int(c) for c in present)),
            "shape": list(self.image_shape),
            "splits": {k: len(v) for k, v in self.split_manifest.items()},
        }


def check_splits(manifest: dict) -> None:
    seen: dict[int, str] = {}
    for name, ids in manifest.items():
        if name not in SPLITS:
            continue
        for c in ids:
            if int(c) in seen:
                raise SplitError(f"class {c} appears in both {seen[int(c)]} and {name}")
            seen[int(c)] = name


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".splits.json")


def save_packed(path, ds: PackedDataset) -> None:
    n, c, h, w = ds.images.shape
    if ds.images.dtype == np.uint8:
        tag, payload = 0, np.ascontiguousarray(ds.images).tobytes()
    else:
        tag, payload = 1, np.ascontiguousarray(ds.images, dtype="<f8").tobytes()
    header = _HEADER.pack(MAGIC, VERSION, n, c, h, w, tag)
    labels = np.ascontiguousarray(ds.labels, dtype="<u4").tobytes()
    Path(path).write_bytes(header + labels + payload)
    meta = {k: [int(i) for i in v] for k, v in ds.split_manifest.items()}
    meta["num_classes"] = int(ds.num_classes)
    if ds.class_names is not None:
        meta["class_names"] = list(ds.class_names)
    manifest_path(path).write_text(json.dumps(meta, indent=1))


def load_packed(path) -> PackedDataset:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise MagicError(f"{path}: expected magic {MAGIC!r}, found {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise TruncationError(f"{path}: header needs {_HEADER.size} bytes, file has {len(buf)}")
    _, version, n, c, h, w, tag = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise VersionError(f"{path}: unsupported version {version}")
    if tag not in (0, 1):
        raise DatasetFormatError(f"{path}: unknown dtype tag {tag}")
    itemsize = 1 if tag == 0 else 8
    need = _HEADER.size + 4 * n + itemsize * n * c * h * w
    if len(buf) < need:
        raise TruncationError(f"{path}: expected {need} bytes, file has {len(buf)}")
    if len(buf) > need:
        raise DatasetFormatError(f"{path}: {len(buf) - need} trailing bytes")
    pos = _HEADER.size
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=pos).astype(np.uint32)
    pos += 4 * n
    dtype = np.uint8 if tag == 0 else np.dtype("<f8")
    images = np.frombuffer(buf, dtype=dtype, count=n * c * h * w, offset=pos).reshape(n, c, h, w)
    images = images.astype(np.uint8 if tag == 0 else np.float64)

    meta = {}
    mpath = manifest_path(path)
    if mpath.exists():
        meta = json.loads(mpath.read_text())
    num_classes = meta.pop("num_classes", None)
    names = meta.pop("class_names", None)
    if num_classes is not None and n and int(labels.max()) >= num_classes:
        raise LabelOverflowError(f"{path}: label {int(labels.max())} >= class count {num_classes}")
    splits = {k: v for k, v in meta.items() if k in SPLITS}
    return PackedDataset(images, labels, splits, names, num_classes)


# ---------------------------------------------------------------------------
# sampling


@dataclass
class EpisodeSpec:
    k: int = 5
    n: int = 1
    q: int = 15

    def __post_init__(self):
        if self.k < 2 or self.n < 1 or self.q < 1:
            raise ContractError(f"episode needs k>=2, n>=1, q>=1; got {self}")


@dataclass
class Episode:
    classes: np.ndarray  # original class ids, position = new label
    support_idx: np.ndarray
    support_y: np.ndarray
    query_idx: np.ndarray
    query_y: np.ndarray


def sample_episode(ds: PackedDataset, spec: EpisodeSpec, split: str, rng: np.random.Generator) -> Episode:
    pool = ds.classes(split)
    eligible = [c for c in pool if ds.indices_of(c).size >= spec.n + spec.q]
    if len(eligible) < spec.k:
        raise ContractError(
            f"split {split!r} has {len(eligible)} classes with >= {spec.n + spec.q} samples, need {spec.k}"
        )
    chosen = rng.choice(np.asarray(eligible), size=spec.k, replace=False)
    s_idx, s_y, q_idx, q_y = [], [], [], []
    for label, cls in enumerate(chosen):
        picks = rng.choice(ds.indices_of(cls), size=spec.n + spec.q, replace=False)
        s_idx.append(picks[: spec.n])
        q_idx.append(picks[spec.n :])
        s_y.append(np.full(spec.n, label))
        q_y.append(np.full(spec.q, label))
    return Episode(
        classes=np.asarray(chosen),
        support_idx=np.concatenate(s_idx),
        support_y=np.concatenate(s_y),
        query_idx=np.concatenate(q_idx),
        query_y=np.concatenate(q_y),
    )


@dataclass
class ClassBlock:
    cls: int
    support_idx: np.ndarray
    test_idx: np.ndarray


@dataclass
class Trajectory:
    blocks: list

    @property
    def classes(self) -> list:
        return [b.cls for b in self.blocks]


def sample_trajectory(ds: PackedDataset, classes_per_traj: int, shots: int, split: str,
                      rng: np.random.Generator, test_per_class: Optional[int] = None,
                      classes: Optional[Sequence[int]] = None) -> Trajectory:
    """Ordered distinct classes; per class ``shots`` support images, the rest (or ``test_per_class``) for testing."""
    pool = ds.classes(split) if classes is None else np.asarray(classes)
    if len(pool) < classes_per_traj:
        raise ContractError(f"split {split!r} has {len(pool)} classes, trajectory needs {classes_per_traj}")
    order = rng.choice(pool, size=classes_per_traj, replace=False)
    blocks = []
    for cls in order:
        idx = rng.permutation(ds.indices_of(cls))
        if idx.size <= shots:
            raise ContractError(f"class {cls} has {idx.size} images, needs more than {shots}")
        test = idx[shots:] if test_per_class is None else idx[shots : shots + test_per_class]
        blocks.append(ClassBlock(int(cls), idx[:shots], test))
    return Trajectory(blocks)


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticSpec:
    classes: int = 20
    samples_per_class: int = 20
    image_size: int = 28
    channels: int = 1
    prototype_seed: int = 0
    noise_std: float = 0.1
    block: int = 4
    split_sizes: Optional[tuple] = None  # (train, val, test) class counts


@dataclass
class SyntheticManifest:
    prototypes: np.ndarray  # [classes, C, H, W]
    noise_std: float


def _default_splits(n: int) -> tuple:
    test = max(1, n // 4)
    val = max(0, n // 8)
    return (n - val - test, val, test)


def gen_synthetic(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[PackedDataset, SyntheticManifest]:
    """Each class is a fixed blocky random prototype plus Gaussian pixel noise, clipped to [0, 1].

    Prototypes come from ``spec.prototype_seed`` so they are shared across
    runs; the noise comes from ``rng``.
    """
    proto_rng = np.random.default_rng(spec.prototype_seed)
    cells = -(-spec.image_size // spec.block)
    coarse = proto_rng.uniform(0.0, 1.0, size=(spec.classes, spec.channels, cells, cells))
    protos = np.kron(coarse, np.ones((1, 1, spec.block, spec.block)))[..., : spec.image_size, : spec.image_size]
    labels = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    images = protos[labels] + spec.noise_std * rng.standard_normal((labels.size,) + protos.shape[1:])
    images = np.clip(images, 0.0, 1.0)
    train, val, test = spec.split_sizes or _default_splits(spec.classes)
    if train + val + test != spec.classes:
        raise ContractError(f"split sizes {spec.split_sizes} do not add up to {spec.classes}")
    ids = np.arange(spec.classes)
    manifest = {
        "meta_train": ids[:train].tolist(),
        "meta_val": ids[train : train + val].tolist(),
        "meta_test": ids[train + val :].tolist(),
    }
    ds = PackedDataset(images.astype(np.float64), labels, manifest, num_classes=spec.classes)
    return ds, SyntheticManifest(protos, spec.noise_std)


def nearest_prototype_accuracy(ds: PackedDataset, prototypes: np.ndarray) -> float:
    """Brute-force nearest-prototype classifier (squared Euclidean distance)."""
    x = ds.pixels().reshape(len(ds.labels), -1)
    p = prototypes.reshape(len(prototypes), -1)
    d = (x * x).sum(1)[:, None] - 2 * x @ p.T + (p * p).sum(1)[None, :]
    return float((d.argmin(axis=1) == ds.labels).mean())
