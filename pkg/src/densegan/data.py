"""Dataset manifests, grid patch extraction, ROI cropping and split protocols.

Images are handled as float arrays of shape ``(C, H, W)``. Manifests are
tab-separated text files with the columns

    path    label    mask_path-or-dash    class_tag    [group]

where ``label`` is ``normal`` or ``anomalous``. The optional fifth column
names the source image a patch was cut from, so patch scores can be pooled
per image; it defaults to the path itself.
"""

import logging
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import BatchLoadError, ConfigurationError

log = logging.getLogger(__name__)

NORMAL = "normal"
ANOMALOUS = "anomalous"
LABELS = (NORMAL, ANOMALOUS)
MIN_ROI_SIDE = 32
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass(frozen=True)
class Record:
    path: str
    label: str = NORMAL
    mask_path: Optional[str] = None
    class_tag: str = ""
    group: Optional[str] = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ConfigurationError(f"unknown label {self.label!r} for {self.path}")

    @property
    def source(self):
        return self.group or self.path

    @property
    def is_anomalous(self):
        return self.label == ANOMALOUS


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple
    split: str = "test"

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.split not in ("train", "test"):
            raise ConfigurationError(f"unknown split {self.split!r}")
        if self.split == "train":
            bad = [r.path for r in self.records if r.is_anomalous]
            if bad:
                raise ConfigurationError(
                    f"train manifest contains {len(bad)} anomalous record(s), e.g. {bad[0]}")

    def __len__(self):
        return len(self.records)

    def __getitem__(self, idx):
        return self.records[idx]

    @property
    def labels(self):
        return np.array([r.is_anomalous for r in self.records], dtype=int)

    def validate_masks(self):
        """Check that every mask exists and matches its image's size."""
        problems = []
        for r in self.records:
            if r.mask_path is None:
                continue
            if not os.path.exists(r.mask_path):
                problems.append(f"{r.path}: mask {r.mask_path} does not exist")
                continue
            with Image.open(r.path) as im, Image.open(r.mask_path) as mk:
                if im.size != mk.size:
                    problems.append(f"{r.path}: mask size {mk.size} != image size {im.size}")
        if problems:
            raise ConfigurationError("invalid masks:\n  " + "\n  ".join(problems))
        return self


def write_manifest(manifest, path):
    lines = []
    for r in manifest.records:
        cols = [r.path, r.label, r.mask_path or "-", r.class_tag or "-"]
        if r.group is not None:
            cols.append(r.group)
        if any("\t" in c or "\n" in c for c in cols):
            raise ConfigurationError(f"manifest field contains a tab or newline: {cols}")
        lines.append("\t".join(cols))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(line + "\n" for line in lines))


def read_manifest(path, split="test", check_masks=False):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) not in (4, 5):
                raise ConfigurationError(f"{path}:{lineno}: expected 4 or 5 tab-separated fields")
            img, label, mask, tag = cols[:4]
            records.append(Record(img, label, None if mask == "-" else mask,
                                  "" if tag == "-" else tag, cols[4] if len(cols) == 5 else None))
    manifest = DatasetManifest(records, split)
    if check_masks:
        manifest.validate_masks()
    return manifest


# --- patches -----------------------------------------------------------------

@dataclass(frozen=True)
class PatchSpec:
    patch_size: int = 256
    stride: Optional[int] = None
    pad_mode: str = "reflect"

    def __post_init__(self):
        if self.patch_size < 32:
            raise ConfigurationError("patch_size must be at least 32")
        if self.step < 1:
            raise ConfigurationError("stride must be at least 1")

    @property
    def step(self):
        return self.patch_size if self.stride is None else self.stride


def _grid_positions(length, size, step):
    n = max(1, math.ceil((length - size) / step) + 1)
    return [k * step for k in range(n)], (n - 1) * step + size


def pad_for_patches(image, spec):
    """Pad ``image`` (C, H, W) on the bottom/right so the patch grid covers it."""
    _, h, w = image.shape
    _, ph = _grid_positions(h, spec.patch_size, spec.step)
    _, pw = _grid_positions(w, spec.patch_size, spec.step)
    return np.pad(image, ((0, 0), (0, ph - h), (0, pw - w)), mode=spec.pad_mode)


def extract_patches(image, spec=PatchSpec()):
    """Tile ``image`` (C, H, W) into patches, left to right, top to bottom.

    Returns ``(patches, origins)``: an array ``(N, C, ps, ps)`` and a list of
    ``(row, col)`` origins in the padded image. The remainder is padded with
    ``spec.pad_mode``. An image smaller than the patch in both dimensions is
    upscaled to the patch size first.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {image.shape}")
    ps = spec.patch_size
    _, h, w = image.shape
    if h < ps and w < ps:
        log.warning("image of size %dx%d is smaller than the %d patch; upscaling", h, w, ps)
        image = resize(image, ps)
    padded = pad_for_patches(image, spec)
    rows, _ = _grid_positions(padded.shape[1], ps, spec.step)
    cols, _ = _grid_positions(padded.shape[2], ps, spec.step)
    origins = [(r, c) for r in rows for c in cols]
    patches = np.stack([padded[:, r:r + ps, c:c + ps] for r, c in origins])
    return patches, origins


def reassemble_patches(patches, origins, shape):
    """Inverse of :func:`extract_patches` onto a canvas of ``shape`` (C, H, W)."""
    canvas = np.zeros(shape, dtype=np.asarray(patches).dtype)
    ps = patches.shape[-1]
    for patch, (r, c) in zip(patches, origins):
        canvas[:, r:r + ps, c:c + ps] = patch
    return canvas


def resize(image, size):
    """Bilinear resize of a (C, H, W) array to ``size`` x ``size``."""
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64))[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0].numpy().astype(np.asarray(image).dtype, copy=False)


# --- ROI ---------------------------------------------------------------------

def roi_box(mask, min_side=MIN_ROI_SIDE):
    """Square window ``(top, left, bottom, right)`` around the nonzero mask.

    The tight bounding box is expanded to a centered square of side at least
    ``min_side`` and then clipped to the image bounds.
    """
    mask = np.asarray(mask)
    if mask.ndim == 3:
        mask = mask.any(axis=0)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("mask is empty")
    top, bottom = int(ys.min()), int(ys.max()) + 1
    left, right = int(xs.min()), int(xs.max()) + 1
    side = max(bottom - top, right - left, min_side)
    cy2, cx2 = top + bottom, left + right  # doubled centers keep half-pixels exact
    t = (cy2 - side) // 2
    l_ = (cx2 - side) // 2
    h, w = mask.shape
    return max(t, 0), max(l_, 0), min(t + side, h), min(l_ + side, w)


def apply_roi_mask(image, mask, patch_size=256, min_side=MIN_ROI_SIDE, name=None):
    """Crop the masked region of ``image`` (C, H, W) and resize it to ``patch_size``.

    Returns ``(crop, box)`` with ``box = (top, left, bottom, right)``.
    """
    image = np.asarray(image)
    if np.asarray(mask).shape[-2:] != image.shape[-2:]:
        raise ValueError(f"mask shape {np.asarray(mask).shape} does not match image {image.shape}")
    try:
        box = roi_box(mask, min_side)
    except ValueError:
        raise ValueError(f"empty ROI mask for {name or 'image'}") from None
    t, l_, b, r = box
    return resize(image[:, t:b, l_:r], patch_size), box


# --- split protocols ---------------------------------------------------------

def build_one_vs_all_split(train_items, test_items, normal_class):
    """One class is normal, every other class is anomalous and test-only.

    ``train_items`` and ``test_items`` are sequences of ``(path, class_tag)``
    drawn from the dataset's own train/test partitions.
    """
    classes = {tag for _, tag in train_items} | {tag for _, tag in test_items}
    if normal_class not in classes:
        raise ConfigurationError(f"unknown class {normal_class!r}; known: {sorted(classes)}")
    train = [Record(p, NORMAL, None, tag) for p, tag in train_items if tag == normal_class]
    test = [Record(p, NORMAL if tag == normal_class else ANOMALOUS, None, tag) for p, tag in test_items]
    if not train:
        raise ConfigurationError(f"class {normal_class!r} has no training images")
    return DatasetManifest(train, "train"), DatasetManifest(test, "test")


def seeded_subset(records, n, seed):
    """Uniformly sample ``n`` records without replacement, keeping input order."""
    records = list(records)
    if n is None or n >= len(records):
        return records
    idx = np.sort(np.random.default_rng(seed).choice(len(records), size=n, replace=False))
    return [records[i] for i in idx]


# --- loading -----------------------------------------------------------------

def read_image(path, channels=3):
    """Decode an 8-bit image to a float array (C, H, W) scaled to [-1, 1]."""
    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        arr = np.asarray(im, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr / 127.5 - 1.0


def read_mask(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def save_image(array, path):
    """Write a [-1, 1] (C, H, W) array as an 8-bit PNG."""
    a = np.clip(np.rint((np.asarray(array) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    a = a[0] if a.shape[0] == 1 else a.transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(a).save(path)


def load_record(record, size, channels=3):
    img = read_image(record.path, channels)
    if record.mask_path is not None:
        img, _ = apply_roi_mask(img, read_mask(record.mask_path), size, name=record.path)
    elif img.shape[1:] != (size, size):
        img = resize(img, size)
    return img


def load_batch(manifest, indices, size, channels=3, augment=False, rng=None, dtype=torch.float32):
    """Decode ``manifest[indices]`` into a tensor (B, C, size, size) in [-1, 1].

    Masked records are cropped to their ROI. With ``augment`` each image is
    flipped horizontally with probability 1/2 using ``rng``. Every record is
    attempted; if any fail, :class:`BatchLoadError` lists all failures.
    """
    if augment and manifest.split != "train":
        raise ConfigurationError("augmentation is only allowed on the train split")
    rng = rng if rng is not None else np.random.default_rng(0)
    images, failures = [], {}
    for idx in indices:
        try:
            images.append(load_record(manifest[idx], size, channels))
        except Exception as exc:  # collected and re-raised below
            failures[idx] = f"{manifest[idx].path}: {exc}"
    if failures:
        raise BatchLoadError(failures)
    batch = np.stack(images)
    if augment:
        flip = rng.random(len(batch)) < 0.5
        batch[flip] = batch[flip][..., ::-1]
    return torch.from_numpy(np.ascontiguousarray(batch)).to(dtype)


class ImageSet(torch.utils.data.Dataset):
    """In-memory tensor dataset with labels, class tags and source groups."""

    def __init__(self, images, labels=None, class_tags=None, groups=None, ids=None):
        self.images = torch.as_tensor(images)
        n = len(self.images)
        self.labels = np.zeros(n, dtype=int) if labels is None else np.asarray(labels, dtype=int)
        self.class_tags = [""] * n if class_tags is None else list(class_tags)
        self.ids = [str(i) for i in range(n)] if ids is None else list(ids)
        self.groups = list(self.ids) if groups is None else list(groups)
        if not (len(self.labels) == len(self.class_tags) == len(self.ids) == len(self.groups) == n):
            raise ValueError("ImageSet fields have inconsistent lengths")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, idx):
        return self.images[idx]

    def subset(self, idx):
        idx = list(idx)
        return ImageSet(self.images[idx], self.labels[idx], [self.class_tags[i] for i in idx],
                        [self.groups[i] for i in idx], [self.ids[i] for i in idx])

    @classmethod
    def from_manifest(cls, manifest, size, channels=3, dtype=torch.float32):
        images = load_batch(manifest, range(len(manifest)), size, channels, dtype=dtype)
        return cls(images, manifest.labels, [r.class_tag for r in manifest.records],
                   [r.source for r in manifest.records], [r.path for r in manifest.records])


# --- directory protocols -------------------------------------------------------

def _images_in(directory):
    d = Path(directory)
    if not d.is_dir():
        return []
    return sorted(str(p) for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _class_dirs(directory):
    d = Path(directory)
    return sorted(p.name for p in d.iterdir() if p.is_dir()) if d.is_dir() else []


def scan_one_vs_all(root, normal_class):
    """``root/{train,test}/<class>/*`` layout (e.g. CIFAR-10 exported to PNG)."""
    items = {}
    for split in ("train", "test"):
        items[split] = [(p, c) for c in _class_dirs(Path(root) / split) for p in _images_in(Path(root) / split / c)]
    return build_one_vs_all_split(items["train"], items["test"], normal_class)


def scan_normal_only(root, normal_dir="good", use_masks=False):
    """``root/train/<normal_dir>``, ``root/test/<class>`` and optionally
    ``root/ground_truth/<class>/<stem>_mask.png`` (the MVTec AD layout)."""
    root = Path(root)
    train = [Record(p, NORMAL, None, normal_dir) for p in _images_in(root / "train" / normal_dir)]
    test, problems = [], []
    for c in _class_dirs(root / "test"):
        for p in _images_in(root / "test" / c):
            if c == normal_dir:
                test.append(Record(p, NORMAL, None, c))
                continue
            mask = None
            if use_masks:
                mask = str(root / "ground_truth" / c / (Path(p).stem + "_mask.png"))
                if not os.path.exists(mask):
                    problems.append(f"{p}: missing mask {mask}")
                    continue
            test.append(Record(p, ANOMALOUS, mask, c))
    if problems:
        raise ConfigurationError("records with problems:\n  " + "\n  ".join(problems))
    if not train:
        raise ConfigurationError(f"no training images under {root / 'train' / normal_dir}")
    return DatasetManifest(train, "train"), DatasetManifest(test, "test")


def patchify_manifest(manifest, spec, out_dir, channels=3):
    """Replace every unmasked record larger than the patch by its grid patches,
    written as PNGs under ``out_dir``. Masked records are kept whole."""
    out = []
    for r in manifest.records:
        if r.mask_path is not None:
            out.append(r)
            continue
        with Image.open(r.path) as im:
            w, h = im.size
        if w <= spec.patch_size and h <= spec.patch_size:
            out.append(r)
            continue
        patches, origins = extract_patches(read_image(r.path, channels), spec)
        stem = Path(r.path).stem
        sub = Path(out_dir) / (r.class_tag or "_") / stem
        for patch, (row, col) in zip(patches, origins):
            p = sub / f"{stem}_r{row}_c{col}.png"
            save_image(patch, p)
            out.append(replace(r, path=str(p), group=r.path))
    return DatasetManifest(out, manifest.split)
