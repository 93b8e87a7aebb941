"""Slice loading, preprocessing, splitting, augmentation and phantom data.

On-disk layout (one directory per dataset root)::

    <root>/dataset.cfg                  optional key-value config
    <root>/<volume_id>/img_<k>.png      16-bit (or 8-bit) grayscale slice
    <root>/<volume_id>/lab_<k>.png      integer label slice
    <root>/<volume_id>.npz              alternative: arrays ``image`` (K,H,W), ``label`` (K,H,W)
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .taxonomy import ClassTaxonomy, Kind

CROP_MODES = ("region_mean", "none")
_SLICE_RE = re.compile(r"^img_(\d+)\.png$")
_LABEL_RE = re.compile(r"^lab_(\d+)\.png$")


class DataLoadError(RuntimeError):
    pass


@dataclass
class SliceSample:
    image: np.ndarray  # (H, W) float in [0, 1]
    label: np.ndarray  # (H, W) int
    volume_id: str = "vol"
    slice_index: int = 0
    slice_count: int = 1

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise ValueError(f"image {self.image.shape} and label {self.label.shape} differ")
        if not 0 <= self.slice_index < self.slice_count:
            raise ValueError(f"slice_index {self.slice_index} outside [0, {self.slice_count})")

    @property
    def present(self) -> set[int]:
        return {int(v) for v in np.unique(self.label) if v != 0}


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]

    def to_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test}


@dataclass
class DatasetConfig:
    taxonomy: str = "MRSpineSeg"
    remap: dict[int, int] = field(default_factory=dict)
    crop: str = "region_mean"


@dataclass
class PhantomSpec:
    image_size: int = 96
    n_vertebrae: int = 5
    noise_sigma: float = 0.05
    seed: int = 0
    n_slices: int = 1

    def validate(self) -> None:
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if not 2 <= self.n_vertebrae <= 10:
            raise ValueError("n_vertebrae must be in [2, 10]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_slices < 1:
            raise ValueError("n_slices must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PhantomSpec":
        return cls(**{k: d[k] for k in ("image_size", "n_vertebrae", "noise_sigma", "seed", "n_slices") if k in d})


# ---------------------------------------------------------------- loading


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def parse_kv(text: str) -> dict[str, object]:
    """Flat ``key = value`` lines; values are JSON literals where they parse."""
    out: dict[str, object] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def read_dataset_config(root: str | Path) -> DatasetConfig:
    path = Path(root) / "dataset.cfg"
    if not path.exists():
        return DatasetConfig()
    kv = parse_kv(path.read_text())
    cfg = DatasetConfig()
    for key, value in kv.items():
        if key == "taxonomy":
            cfg.taxonomy = str(value)
        elif key == "crop":
            if value not in CROP_MODES:
                raise DataLoadError(f"{path}: crop must be one of {CROP_MODES}")
            cfg.crop = str(value)
        elif key.startswith("remap."):
            cfg.remap[int(key.split(".", 1)[1])] = int(value)
        else:
            raise DataLoadError(f"{path}: unknown key {key!r}")
    return cfg


def _apply_remap(label: np.ndarray, remap: Mapping[int, int]) -> np.ndarray:
    if not remap:
        return label
    out = label.copy()
    for src, dst in remap.items():
        out[label == src] = dst
    return out


def _check_label(label: np.ndarray, taxonomy: ClassTaxonomy, where: str) -> None:
    lo, hi = int(label.min()), int(label.max())
    if lo < 0 or hi >= taxonomy.num_classes:
        raise DataLoadError(
            f"{where}: label value {hi if hi >= taxonomy.num_classes else lo} outside "
            f"[0, {taxonomy.num_classes - 1}] for taxonomy {taxonomy.name}"
        )


def load_volume(
    path: str | Path, taxonomy: ClassTaxonomy, remap: Mapping[int, int] | None = None
) -> list[SliceSample]:
    """Read one volume (a slice directory or an ``.npz`` archive)."""
    path = Path(path)
    remap = dict(remap or {})
    if path.suffix == ".npz":
        if not path.exists():
            raise DataLoadError(f"{path}: no such archive")
        with np.load(path) as z:
            if "image" not in z or "label" not in z:
                raise DataLoadError(f"{path}: archive needs 'image' and 'label' arrays")
            images, labels = z["image"], z["label"]
        if images.ndim == 2:
            images, labels = images[None], labels[None]
        if images.shape != labels.shape:
            raise DataLoadError(f"{path}: image {images.shape} vs label {labels.shape}")
        if len(images) == 0:
            raise DataLoadError(f"{path}: empty volume")
        vid = path.stem
        pairs = [(images[k], labels[k], f"{path}[{k}]") for k in range(len(images))]
    else:
        if not path.is_dir():
            raise DataLoadError(f"{path}: not a volume directory")
        found = sorted(
            (int(m.group(1)), p) for p in path.iterdir() if (m := _SLICE_RE.match(p.name))
        )
        if not found:
            raise DataLoadError(f"{path}: empty volume (no img_<k>.png files)")
        vid = path.name
        pairs = []
        for k, img_path in found:
            lab_path = img_path.with_name(img_path.name.replace("img_", "lab_", 1))
            if not lab_path.exists():
                raise DataLoadError(f"{lab_path}: missing label file for {img_path.name}")
            img = np.asarray(Image.open(img_path))
            lab = np.asarray(Image.open(lab_path))
            if img.shape != lab.shape:
                raise DataLoadError(f"{lab_path}: shape {lab.shape} != image shape {img.shape}")
            pairs.append((img, lab, str(lab_path)))

    count = len(pairs)
    out = []
    for k, (img, lab, where) in enumerate(pairs):
        lab = _apply_remap(np.asarray(lab).astype(np.int64), remap)
        _check_label(lab, taxonomy, where)
        out.append(SliceSample(normalize_intensity(img), lab, vid, k, count))
    return out


def list_volumes(root: str | Path) -> list[Path]:
    root = Path(root)
    vols = [p for p in root.iterdir() if p.is_dir() or p.suffix == ".npz"]
    return sorted(vols, key=lambda p: p.stem)


def load_dataset(root: str | Path, taxonomy: ClassTaxonomy, cfg: DatasetConfig | None = None):
    cfg = cfg or read_dataset_config(root)
    return {p.stem: load_volume(p, taxonomy, cfg.remap) for p in list_volumes(root)}


def load_label_maps(root: str | Path) -> dict[str, list[np.ndarray]]:
    """Label maps only (``lab_<k>.png`` or the ``label`` array of an
    ``.npz``), e.g. a directory of predictions laid out like a dataset."""
    out = {}
    for p in list_volumes(root):
        if p.suffix == ".npz":
            with np.load(p) as z:
                if "label" not in z:
                    raise DataLoadError(f"{p}: archive has no 'label' array")
                labels = z["label"]
            out[p.stem] = list(labels[None] if labels.ndim == 2 else labels)
            continue
        found = sorted((int(m.group(1)), q) for q in p.iterdir() if (m := _LABEL_RE.match(q.name)))
        if not found:
            raise DataLoadError(f"{p}: no lab_<k>.png files")
        out[p.name] = [np.asarray(Image.open(q)).astype(np.int64) for _, q in found]
    return out


def save_volume(samples: Sequence[SliceSample], root: str | Path, fmt: str = "png") -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    vid = samples[0].volume_id
    if fmt == "npz":
        out = root / f"{vid}.npz"
        np.savez_compressed(
            out,
            image=np.stack([s.image for s in samples]).astype(np.float32),
            label=np.stack([s.label for s in samples]).astype(np.uint8),
        )
        return out
    if fmt != "png":
        raise ValueError(f"unknown format {fmt!r}")
    vdir = root / vid
    vdir.mkdir(exist_ok=True)
    width = max(3, len(str(len(samples) - 1)))
    for s in samples:
        img16 = np.round(np.clip(s.image, 0, 1) * 65535).astype(np.uint16)
        Image.fromarray(img16).save(vdir / f"img_{s.slice_index:0{width}d}.png")
        Image.fromarray(s.label.astype(np.uint8)).save(vdir / f"lab_{s.slice_index:0{width}d}.png")
    return vdir


# ---------------------------------------------------------------- preprocessing


def region_mean_bbox(image: np.ndarray, pad: float = 0.05) -> tuple[int, int, int, int]:
    """Bounding box (y0, y1, x0, x1) of above-mean pixels, padded and clamped."""
    h, w = image.shape
    ys, xs = np.nonzero(image > image.mean())
    if len(ys) == 0:
        return 0, h, 0, w
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    py, px = int(math.ceil(pad * (y1 - y0))), int(math.ceil(pad * (x1 - x0)))
    return max(0, y0 - py), min(h, y1 + py), max(0, x0 - px), min(w, x1 + px)


def resize_pair(image: np.ndarray, label: np.ndarray, size: tuple[int, int]):
    if image.shape == tuple(size):
        return image.copy(), label.copy()
    img = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64))[None, None]
    lab = torch.from_numpy(np.ascontiguousarray(label, dtype=np.float64))[None, None]
    img = F.interpolate(img, size=size, mode="bilinear", align_corners=False)
    lab = F.interpolate(lab, size=size, mode="nearest-exact")
    return img[0, 0].numpy(), lab[0, 0].numpy().astype(label.dtype)


def preprocess(sample: SliceSample, target: int = 384, crop: str = "region_mean") -> SliceSample:
    """Region-mean crop followed by a resize to ``target`` x ``target``."""
    if target <= 0:
        raise ValueError(f"target size must be positive, got {target}")
    if crop not in CROP_MODES:
        raise ValueError(f"crop must be one of {CROP_MODES}")
    image, label = sample.image, sample.label
    if crop == "region_mean":
        y0, y1, x0, x1 = region_mean_bbox(image)
        image, label = image[y0:y1, x0:x1], label[y0:y1, x0:x1]
    image, label = resize_pair(image, label, (target, target))
    return replace(sample, image=np.clip(image, 0.0, 1.0), label=label)


# ---------------------------------------------------------------- splitting


def stratified_split(
    volumes: Mapping[str, Iterable[int]] | Sequence[tuple[str, Iterable[int]]],
    ratios: tuple[int, int, int] = (8, 1, 1),
    seed: int = 0,
) -> DatasetSplit:
    """Volume-level train/val/test split stratified by each volume's rarest
    present class."""
    items = list(volumes.items()) if isinstance(volumes, Mapping) else list(volumes)
    n = len(items)
    if n < len(ratios):
        raise ValueError(f"need at least {len(ratios)} volumes to split, got {n}")
    classes = {vid: frozenset(int(c) for c in cs if int(c) != 0) for vid, cs in items}
    freq = Counter(c for cs in classes.values() for c in cs)

    def key(vid):
        cs = classes[vid]
        # rarest present class; ties broken by class id
        return min(((freq[c], c) for c in cs), default=(n + 1, -1))

    total = sum(ratios)
    targets = [max(1, round(n * r / total)) for r in ratios]
    targets[0] = n - sum(targets[1:])

    rng = np.random.default_rng(seed)
    buckets: dict[tuple, list[str]] = {}
    for vid in sorted(classes):
        buckets.setdefault(key(vid), []).append(vid)
    order = []
    for k in sorted(buckets):
        vids = buckets[k]
        order.extend(vids[i] for i in rng.permutation(len(vids)))

    parts: list[list[str]] = [[] for _ in ratios]
    for vid in order:
        # least-filled split relative to its target; ties go to the earlier split
        j = min(
            (i for i in range(len(parts)) if len(parts[i]) < targets[i]),
            key=lambda i: (len(parts[i]) / targets[i], i),
        )
        parts[j].append(vid)
    return DatasetSplit(*parts)


# ---------------------------------------------------------------- augmentation


def random_distort(sample: SliceSample, strength: float, seed: int) -> SliceSample:
    """Smooth elastic warp from a 4x4 grid of random control displacements;
    the largest displacement is ``strength`` x 5% of the image width."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must be in [0, 1], got {strength}")
    h, w = sample.image.shape
    rng = np.random.default_rng(seed)
    max_disp = strength * 0.05 * w
    grid = rng.uniform(-1.0, 1.0, size=(2, 4, 4)) * max_disp
    dy = ndimage.zoom(grid[0], (h / 4, w / 4), order=3, mode="nearest", grid_mode=True)
    dx = ndimage.zoom(grid[1], (h / 4, w / 4), order=3, mode="nearest", grid_mode=True)
    # cubic splines overshoot slightly; keep the stated bound
    dy, dx = np.clip(dy, -max_disp, max_disp), np.clip(dx, -max_disp, max_disp)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    coords = np.stack([yy + dy, xx + dx])
    image = ndimage.map_coordinates(sample.image, coords, order=1, mode="nearest")
    label = ndimage.map_coordinates(sample.label, coords, order=0, mode="nearest")
    return replace(sample, image=image, label=label.astype(sample.label.dtype))


# ---------------------------------------------------------------- phantoms


def _rounded_rect(yy, xx, cy, cx, hh, hw, r):
    # inside test for an axis-aligned rectangle with corner radius r
    qy = np.maximum(np.abs(yy - cy) - (hh - r), 0.0)
    qx = np.maximum(np.abs(xx - cx) - (hw - r), 0.0)
    return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw) & (qy**2 + qx**2 <= r**2)


def class_intensity(taxonomy: ClassTaxonomy) -> np.ndarray:
    """Phantom grey value per class id: kinds are far apart, classes of one
    kind differ only by a few percent."""
    table = np.zeros(taxonomy.num_classes)
    table[0] = 0.1
    counters = Counter()
    base = {Kind.VB: 0.55, Kind.ID: 0.85, Kind.SC: 0.35}
    step = {Kind.VB: 0.01, Kind.ID: 0.005, Kind.SC: 0.0}
    for e in taxonomy.entries[1:]:
        table[e.id] = base[e.kind] + step[e.kind] * counters[e.kind]
        counters[e.kind] += 1
    return table


def synth_phantom(spec: PhantomSpec, taxonomy: ClassTaxonomy) -> list[SliceSample]:
    """One synthetic sagittal volume: a vertical stack of rounded vertebrae
    separated by disc bands, plus a posterior canal stripe when the taxonomy
    has a spinal canal class."""
    spec.validate()
    vbs = sorted(taxonomy.of_kind(Kind.VB), key=lambda e: e.rank)
    if spec.n_vertebrae > len(vbs):
        raise ValueError(
            f"n_vertebrae={spec.n_vertebrae} exceeds the {len(vbs)} vertebrae of {taxonomy.name}"
        )
    discs = {e.between: e for e in taxonomy.of_kind(Kind.ID)}
    canal = taxonomy.of_kind(Kind.SC)
    intensity = class_intensity(taxonomy)

    rng = np.random.default_rng(spec.seed)
    n, size = spec.n_vertebrae, spec.image_size
    start = int(rng.integers(0, len(vbs) - n + 1))
    chosen = vbs[start : start + n]
    top = rng.uniform(0.06, 0.12) * size
    extent = rng.uniform(0.76, 0.84) * size
    vb_h = extent / (n + 0.35 * (n - 1))
    disc_h = 0.35 * vb_h
    cx0 = rng.uniform(0.40, 0.50) * size
    half_w = rng.uniform(0.13, 0.17) * size
    curve = rng.uniform(-0.04, 0.04) * size
    vid = f"phantom_{spec.seed:04d}"

    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    out = []
    for k in range(spec.n_slices):
        u = k / (spec.n_slices - 1) if spec.n_slices > 1 else 0.5
        # lateral slices cut the vertebrae off-centre and look narrower
        lateral = 1.0 - 0.35 * abs(2.0 * u - 1.0)
        label = np.zeros((size, size), dtype=np.int64)
        y = top
        for j, vb in enumerate(chosen):
            cy = y + vb_h / 2
            cx = cx0 + curve * math.sin(math.pi * cy / size)
            hw = half_w * lateral
            mask = _rounded_rect(yy, xx, cy, cx, vb_h / 2, hw, min(vb_h, 2 * hw) * 0.25)
            label[mask] = vb.id
            y += vb_h
            if j + 1 < n:
                disc = discs.get((vb.name, chosen[j + 1].name))
                cy = y + disc_h / 2
                cx = cx0 + curve * math.sin(math.pi * cy / size)
                mask = _rounded_rect(yy, xx, cy, cx, disc_h / 2, hw * 0.92, disc_h * 0.45)
                if disc is not None:
                    label[mask & (label == 0)] = disc.id
                y += disc_h
        if canal:
            cx = cx0 + curve * np.sin(np.pi * yy / size) + half_w * lateral + 0.05 * size
            stripe = (np.abs(xx - cx) <= 0.03 * size) & (yy >= top) & (yy <= top + extent)
            label[stripe & (label == 0)] = canal[0].id
        image = intensity[label]
        if spec.noise_sigma > 0:
            image = np.clip(image + rng.normal(0.0, spec.noise_sigma, image.shape), 0.0, 1.0)
        out.append(SliceSample(image, label, vid, k, spec.n_slices))
    return out


def phantom_corpus(
    n_volumes: int,
    taxonomy: ClassTaxonomy,
    *,
    image_size: int = 64,
    n_slices: int = 2,
    noise_sigma: float = 0.05,
    n_vertebrae: tuple[int, int] = (4, 7),
    seed: int = 0,
) -> dict[str, list[SliceSample]]:
    """Several phantom volumes with varied vertebra counts and offsets."""
    rng = np.random.default_rng(seed)
    vols = {}
    for v in range(n_volumes):
        spec = PhantomSpec(
            image_size=image_size,
            n_vertebrae=int(rng.integers(n_vertebrae[0], n_vertebrae[1] + 1)),
            noise_sigma=noise_sigma,
            seed=int(seed * 10_000 + v),
            n_slices=n_slices,
        )
        samples = synth_phantom(spec, taxonomy)
        vols[samples[0].volume_id] = samples
    return vols
