"""Supervision rendering, PNG I/O and the on-disk synthetic dataset.

Dataset directory layout::

    root/
      manifest.json
      images/NNNN.png     8-bit RGB front view
      layouts/NNNN.png    8-bit class map, 0=background 1=road 2=vehicle
      scenes/NNNN.json    SceneSpec document
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .geometry import (
    MULTI_CLASS_SET,
    ROAD,
    SINGLE_CLASS_SET,
    VEHICLE,
    FrontViewImage,
    LayoutRaster,
    SceneSpec,
    generate_scene,
    rasterize_bev,
    render_front_view,
)

SINGLE_CLASS, MULTI_CLASS = "single_class", "multi_class"
TARGET_CLASSES = {"vehicle": VEHICLE, "road": ROAD}
MANIFEST_VERSION = 1


@dataclass
class SupervisionTensor:
    """Three-channel ground truth. Single-class: the binary foreground map
    repeated on all channels. Multi-class: one-hot in class-id order."""

    data: np.ndarray
    mode: str
    class_set: tuple[str, ...]

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ValueError(f"supervision tensor must be 3xHxW, got {self.data.shape}")
        if self.mode not in (SINGLE_CLASS, MULTI_CLASS):
            raise ValueError(f"unknown mode {self.mode!r}")

    def class_ids(self) -> np.ndarray:
        """H x W class ids in ``class_set`` indexing."""
        if self.mode == SINGLE_CLASS:
            return (self.data[0] > 0.5).astype(np.int64)
        return self.data.argmax(axis=0)


def render_single_class(raster: LayoutRaster, target_class: str) -> SupervisionTensor:
    if target_class not in TARGET_CLASSES:
        raise ValueError(f"unknown target_class {target_class!r}")
    if tuple(raster.class_set) != MULTI_CLASS_SET:
        raise ValueError("render_single_class needs a raster over the 3-class set")
    if target_class == "road" and raster.coverage is not None:
        fg = raster.coverage["road"]
    else:
        fg = raster.classes == TARGET_CLASSES[target_class]
    plane = fg.astype(np.float32)
    return SupervisionTensor(np.repeat(plane[None], 3, axis=0), SINGLE_CLASS, SINGLE_CLASS_SET)


def render_multi_class(raster: LayoutRaster) -> SupervisionTensor:
    if tuple(raster.class_set) != MULTI_CLASS_SET:
        raise ValueError("render_multi_class needs class_set (background, road, vehicle)")
    ids = raster.classes
    if ids.min() < 0 or ids.max() >= len(MULTI_CLASS_SET):
        raise ValueError("class id out of range")
    onehot = (ids[None] == np.arange(3)[:, None, None]).astype(np.float32)
    return SupervisionTensor(onehot, MULTI_CLASS, MULTI_CLASS_SET)


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out) * n_in) // n_out


def resize_labels(tensor: SupervisionTensor, new_h: int, new_w: int) -> SupervisionTensor:
    """Nearest-neighbor resize; whole label vectors are copied, never blended."""
    if new_h <= 0 or new_w <= 0:
        raise ValueError("target dims must be positive")
    _, h, w = tensor.data.shape
    for n_in, n_out in ((h, new_h), (w, new_w)):
        if n_out < n_in and n_in % n_out:
            raise ValueError(f"downsizing {n_in}->{n_out} needs an integer divisor")
    rows = nearest_indices(h, new_h)
    cols = nearest_indices(w, new_w)
    out = tensor.data[:, rows[:, None], cols[None, :]]
    return SupervisionTensor(np.ascontiguousarray(out), tensor.mode, tensor.class_set)


def supervise(raster: LayoutRaster, mode: str, target_class: Optional[str] = None) -> SupervisionTensor:
    if mode == SINGLE_CLASS:
        return render_single_class(raster, target_class or "vehicle")
    if mode == MULTI_CLASS:
        return render_multi_class(raster)
    raise ValueError(f"unknown mode {mode!r}")


# --------------------------------------------------------------------------- #
# PNG I/O
# --------------------------------------------------------------------------- #

def save_class_png(classes: np.ndarray, path) -> None:
    classes = np.asarray(classes)
    if classes.min() < 0 or classes.max() > 255:
        raise ValueError("class ids must fit in 8 bits")
    Image.fromarray(classes.astype(np.uint8), mode="L").save(path)


def load_class_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: class map must be single-channel 8-bit")
        return np.asarray(im, dtype=np.int64)


def save_raster_png(raster: LayoutRaster, path) -> None:
    save_class_png(raster.classes, path)


def load_raster_png(path, class_set=MULTI_CLASS_SET, resolution: float = 0.25) -> LayoutRaster:
    return LayoutRaster(load_class_png(path), tuple(class_set), resolution)


def save_image_png(image: FrontViewImage, path) -> None:
    px = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(px, mode="RGB").save(path)


def load_image_png(path) -> FrontViewImage:
    with Image.open(path) as im:
        px = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return FrontViewImage(px)


# --------------------------------------------------------------------------- #
# dataset
# --------------------------------------------------------------------------- #

@dataclass
class DatasetConfig:
    root: str
    seed: int = 0
    difficulty: str = "standard"
    image_size: int = 256
    grid_size: int = 64
    extent: float = 16.0
    noise_std: float = 0.02
    val_fraction: float = 0.2
    split_seed: Optional[int] = None
    workers: int = 1


@dataclass
class ManifestEntry:
    id: int
    image: str
    layout: str
    scene: str
    seed: int
    split: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    class_set: tuple[str, ...] = MULTI_CLASS_SET
    split_seed: int = 0
    image_size: int = 256
    grid_size: int = 64
    difficulty: str = "standard"
    noise_std: float = 0.0
    version: int = MANIFEST_VERSION

    def split(self, name: str) -> list[ManifestEntry]:
        if name == "all":
            return list(self.entries)
        return [e for e in self.entries if e.split == name]

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "class_set": list(self.class_set),
            "split_seed": self.split_seed,
            "image_size": self.image_size,
            "grid_size": self.grid_size,
            "difficulty": self.difficulty,
            "noise_std": self.noise_std,
            "entries": [asdict(e) for e in self.entries],
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.json"
        if not path.is_file():
            raise FileNotFoundError(f"no manifest.json under {root}")
        doc = json.loads(path.read_text())
        if doc.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {doc.get('version')!r}")
        entries = [ManifestEntry(**e) for e in doc["entries"]]
        for e in entries:
            for rel in (e.image, e.layout, e.scene):
                if rel and not (root / rel).is_file():
                    raise FileNotFoundError(f"manifest lists missing file {rel}")
        return cls(root, entries, tuple(doc["class_set"]), doc["split_seed"], doc["image_size"],
                   doc["grid_size"], doc["difficulty"], doc["noise_std"], doc["version"])


def split_key(entry_id: int, split_seed: int) -> str:
    return hashlib.sha256(f"{split_seed}:{entry_id}".encode()).hexdigest()


def assign_splits(entry_ids, split_seed: int, val_fraction: float = 0.2) -> dict[int, str]:
    """Entries with the smallest hash keys go to val. The assignment depends
    on the id set and seed only, never on input order."""
    ids = sorted(set(int(i) for i in entry_ids))
    n_val = int(round(len(ids) * val_fraction))
    n_val = min(n_val, max(len(ids) - 1, 0))
    ranked = sorted(ids, key=lambda i: split_key(i, split_seed))
    val = set(ranked[:n_val])
    return {i: ("val" if i in val else "train") for i in ids}


def scene_seed(base_seed: int, index: int) -> int:
    return base_seed * 100_000 + index


def _write_entry(root: Path, cfg: DatasetConfig, index: int) -> int:
    seed = scene_seed(cfg.seed, index)
    scene = generate_scene(seed, cfg.difficulty, extent=cfg.extent)
    raster = rasterize_bev(scene, cfg.grid_size)
    image = render_front_view(scene, cfg.image_size, cfg.image_size, cfg.noise_std)
    name = f"{index:04d}"
    save_image_png(image, root / "images" / f"{name}.png")
    save_raster_png(raster, root / "layouts" / f"{name}.png")
    (root / "scenes" / f"{name}.json").write_text(scene.to_json() + "\n")
    return seed


def build_dataset(n_scenes: int, config: DatasetConfig) -> DatasetManifest:
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    root = Path(config.root)
    try:
        for sub in ("images", "layouts", "scenes"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset under {root}: {exc}") from exc
    if not os.access(root, os.W_OK):
        raise OSError(f"cannot write dataset under {root}")

    indices = range(n_scenes)
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            seeds = list(pool.map(lambda i: _write_entry(root, config, i), indices))
    else:
        seeds = [_write_entry(root, config, i) for i in indices]

    split_seed = config.seed if config.split_seed is None else config.split_seed
    splits = assign_splits(indices, split_seed, config.val_fraction)
    entries = [
        ManifestEntry(i, f"images/{i:04d}.png", f"layouts/{i:04d}.png", f"scenes/{i:04d}.json",
                      seeds[i], splits[i])
        for i in indices
    ]
    manifest = DatasetManifest(root, entries, MULTI_CLASS_SET, split_seed, config.image_size,
                               config.grid_size, config.difficulty, config.noise_std)
    (root / "manifest.json").write_text(manifest.to_json())
    return manifest


@dataclass
class Sample:
    id: int
    image: np.ndarray     # 3 x H x W float32
    layout: np.ndarray    # 3 x H x W float32 supervision at image resolution
    classes: np.ndarray   # H x W int64 ids in the task's class_set


@dataclass
class LayoutDataset:
    """In-memory view of one split, rendered for one task."""

    manifest: DatasetManifest
    split: str
    mode: str
    target_class: Optional[str] = None
    samples: list[Sample] = field(default_factory=list)

    @classmethod
    def load(cls, root, split: str, mode: str, target_class: Optional[str] = None,
             input_hw: Optional[int] = None) -> "LayoutDataset":
        manifest = DatasetManifest.load(root)
        if tuple(manifest.class_set) != MULTI_CLASS_SET:
            raise ValueError(f"dataset class_set {list(manifest.class_set)} does not match "
                             f"expected {list(MULTI_CLASS_SET)}")
        ds = cls(manifest, split, mode, target_class)
        entries = manifest.split(split)
        if not entries:
            raise ValueError(f"split {split!r} of {root} has no samples")
        for e in entries:
            ds.samples.append(load_sample(manifest.root, e, mode, target_class, input_hw))
        return ds

    @property
    def class_set(self) -> tuple[str, ...]:
        return SINGLE_CLASS_SET if self.mode == SINGLE_CLASS else MULTI_CLASS_SET

    def __len__(self) -> int:
        return len(self.samples)

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        sel = [self.samples[i] for i in indices]
        return (np.stack([s.image for s in sel]), np.stack([s.layout for s in sel]),
                np.stack([s.classes for s in sel]))


def load_sample(root: Path, entry: ManifestEntry, mode: str, target_class: Optional[str],
                input_hw: Optional[int] = None) -> Sample:
    image = load_image_png(root / entry.image).pixels
    if input_hw is not None and image.shape[:2] != (input_hw, input_hw):
        raise ValueError(f"image {entry.image} is {image.shape[:2]}, model expects {input_hw}")
    grid = load_class_png(root / entry.layout)
    if entry.scene:
        # re-rasterize to recover the pre-priority road coverage
        scene = SceneSpec.from_json((root / entry.scene).read_text())
        raster = rasterize_bev(scene, grid.shape[0])
        if not np.array_equal(raster.classes, grid):
            raise ValueError(f"layout {entry.layout} disagrees with scene {entry.scene}")
    else:
        raster = LayoutRaster(grid, MULTI_CLASS_SET)
    sup = supervise(raster, mode, target_class)
    sup = resize_labels(sup, image.shape[0], image.shape[1])
    return Sample(entry.id, np.ascontiguousarray(image.transpose(2, 0, 1)), sup.data, sup.class_ids())
