"""EndoVis-style dataset folders, geometric augmentation and a synthetic scene generator.

Layout::

    root/
      classes.json
      images/{split}/<id>.png          8-bit RGB
      masks_anatomy/{split}/<id>.png   8-bit indexed, head-local ids, 255 = ignore
      masks_tool/{split}/<id>.png      8-bit indexed, head-local ids, 255 = ignore
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .fusion import IGNORE_INDEX, LabelRegistry

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray       # 3 x H x W float32 in [0, 1]
    anat_mask: np.ndarray   # H x W uint8, anatomy-local ids
    tool_mask: np.ndarray   # H x W uint8, tool-local ids
    id: str

    def __post_init__(self):
        hw = self.image.shape[1:]
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DatasetError(f"{self.id}: image must be 3 x H x W, got {self.image.shape}")
        for name in ("anat_mask", "tool_mask"):
            m = getattr(self, name)
            if m is not None and m.shape != hw:
                raise DatasetError(f"{self.id}: {name} shape {m.shape} != image {hw}")


@dataclass(frozen=True)
class AugmentationSpec:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    rotation_degrees: tuple[int, ...] = (0, 90, 180, 270)
    crop_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        for name in ("hflip_prob", "vflip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if not self.rotation_degrees or any(d % 90 or not 0 <= d < 360 for d in self.rotation_degrees):
            raise ValueError(f"rotations must be drawn from 0/90/180/270, got {self.rotation_degrees}")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ValueError(f"crop_fraction must be in (0, 1], got {self.crop_fraction}")


IDENTITY_AUGMENTATION = AugmentationSpec(0.0, 0.0, (0,), 1.0)


# ---------------------------------------------------------------- file io

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_image(path, image: np.ndarray):
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, "RGB").save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("P", "L"):
            raise DatasetError(f"{path}: mask must be single-channel indexed, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8).copy()


_GRAY_PALETTE = [v for i in range(256) for v in (i, i, i)]


def write_mask(path, mask: np.ndarray, palette: Sequence[int] | None = None):
    img = Image.fromarray(np.asarray(mask, dtype=np.uint8), "P")
    # Pillow re-indexes pixels beyond a missing or short palette, so always attach a full one
    pal = list(palette) if palette is not None else list(_GRAY_PALETTE)
    img.putpalette((pal + _GRAY_PALETTE[len(pal):])[:768])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def head_palette(registry: LabelRegistry, head: str) -> list[int]:
    pal = [0] * 768
    pal[0:3] = registry.background.color
    for c in registry.head_classes(head):
        pal[3 * c.local_id:3 * c.local_id + 3] = c.color
    return pal


def _check_mask(path, mask, registry, head):
    valid = {0, IGNORE_INDEX} | {c.local_id for c in registry.head_classes(head)}
    unknown = sorted(set(np.unique(mask).tolist()) - valid)
    if unknown:
        raise DatasetError(f"{path}: class id {unknown[0]} not in classes.json for head {head!r}")


def load_dataset(root, split: str, registry: LabelRegistry | None = None,
                 heads: Sequence[str] = ("anatomy", "tool")) -> list[Sample]:
    """Load one split in lexicographic id order, validating every mask.

    Heads not listed in ``heads`` are not read (their mask field is None).
    """
    root = Path(root)
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}")
    if registry is None:
        manifest = root / "classes.json"
        if not manifest.exists():
            raise DatasetError(f"{manifest} missing")
        registry = LabelRegistry.from_json(manifest)
    img_dir = root / "images" / split
    if not img_dir.is_dir():
        raise DatasetError(f"{img_dir} does not exist")
    samples = []
    for img_path in sorted(img_dir.glob("*.png")):
        sid = img_path.stem
        image = read_image(img_path)
        masks = {}
        for head, sub in (("anatomy", "masks_anatomy"), ("tool", "masks_tool")):
            if head not in heads:
                masks[head] = None
                continue
            mpath = root / sub / split / img_path.name
            if not mpath.exists():
                raise DatasetError(f"missing {head} mask for image {sid}: {mpath}")
            m = read_mask(mpath)
            if m.shape != image.shape[1:]:
                raise DatasetError(f"{sid}: size mismatch image {image.shape[1:]} vs {head} mask {m.shape}")
            _check_mask(mpath, m, registry, head)
            masks[head] = m
        samples.append(Sample(image, masks["anatomy"], masks["tool"], sid))
    return samples


# ---------------------------------------------------------------- augmentation

def _apply_all(sample: Sample, fn) -> Sample:
    return Sample(
        np.ascontiguousarray(fn(sample.image)),
        None if sample.anat_mask is None else np.ascontiguousarray(fn(sample.anat_mask)),
        None if sample.tool_mask is None else np.ascontiguousarray(fn(sample.tool_mask)),
        sample.id,
    )


def hflip(sample: Sample) -> Sample:
    return _apply_all(sample, lambda a: a[..., ::-1])


def vflip(sample: Sample) -> Sample:
    return _apply_all(sample, lambda a: a[..., ::-1, :])


def rotate90(sample: Sample, degrees: int) -> Sample:
    """Clockwise rotation; pixel (r, c) of an H x W map lands at (c, H-1-r) for 90."""
    k = (degrees // 90) % 4
    return _apply_all(sample, lambda a: np.rot90(a, -k, axes=(-2, -1)))


def crop_resize(sample: Sample, top: int, left: int, ch: int, cw: int) -> Sample:
    H, W = sample.image.shape[1:]
    img = torch.from_numpy(sample.image[:, top:top + ch, left:left + cw].copy())[None]
    img = F.interpolate(img, size=(H, W), mode="bilinear", align_corners=False)[0].numpy()

    def resize_mask(m):
        if m is None:
            return None
        t = torch.from_numpy(m[top:top + ch, left:left + cw].astype(np.float32))[None, None]
        return F.interpolate(t, size=(H, W), mode="nearest")[0, 0].numpy().astype(np.uint8)

    return Sample(img.astype(np.float32), resize_mask(sample.anat_mask),
                  resize_mask(sample.tool_mask), sample.id)


def augment(sample: Sample, spec: AugmentationSpec, rng: np.random.Generator) -> Sample:
    """Random flips, 90-degree rotation and crop, identical for image and masks.

    Crops are resized back to the input size (bilinear image, nearest masks).
    """
    out = sample
    if rng.random() < spec.hflip_prob:
        out = hflip(out)
    if rng.random() < spec.vflip_prob:
        out = vflip(out)
    deg = spec.rotation_degrees[int(rng.integers(len(spec.rotation_degrees)))]
    if deg:
        out = rotate90(out, deg)
    if spec.crop_fraction < 1.0:
        H, W = out.image.shape[1:]
        ch = max(1, int(round(H * spec.crop_fraction)))
        cw = max(1, int(round(W * spec.crop_fraction)))
        top = int(rng.integers(H - ch + 1))
        left = int(rng.integers(W - cw + 1))
        out = crop_resize(out, top, left, ch, cw)
    return out


# ---------------------------------------------------------------- synthetic scenes

def default_registry(n_anatomy: int = 2, n_tool: int = 2) -> LabelRegistry:
    anat_colors = [(200, 60, 60), (230, 200, 80), (120, 40, 140), (60, 160, 90)]
    tool_colors = [(40, 200, 255), (255, 120, 0), (0, 255, 120), (255, 0, 200)]
    classes = []
    gid = 1
    for i in range(n_anatomy):
        classes.append({"id": gid, "name": f"organ_{i + 1}", "head": "anatomy",
                        "color": list(anat_colors[i % len(anat_colors)])})
        gid += 1
    for i in range(n_tool):
        classes.append({"id": gid, "name": f"tool_{i + 1}", "head": "tool",
                        "color": list(tool_colors[i % len(tool_colors)])})
        gid += 1
    return LabelRegistry(classes)


# rendered appearance (distinct from registry display colors)
_TISSUE = np.array([0.62, 0.30, 0.28])
_ORGAN_RGB = [np.array(c) for c in ([0.45, 0.12, 0.12], [0.85, 0.72, 0.40],
                                    [0.55, 0.35, 0.55], [0.40, 0.50, 0.35])]
_TOOL_RGB = [np.array(c) for c in ([0.92, 0.92, 0.95], [0.55, 0.85, 0.95],
                                   [0.95, 0.95, 0.60], [0.70, 0.95, 0.70])]


def _smooth_field(rng, H, W, sigma):
    return ndimage.gaussian_filter(rng.standard_normal((H, W)), sigma, mode="wrap")


def _capsule(H, W, p0, p1, radius):
    rr, cc = np.mgrid[0:H, 0:W].astype(np.float64)
    d = p1 - p0
    t = np.clip(((rr - p0[0]) * d[0] + (cc - p0[1]) * d[1]) / max(d @ d, 1e-9), 0.0, 1.0)
    dist2 = (rr - p0[0] - t * d[0]) ** 2 + (cc - p0[1] - t * d[1]) ** 2
    return dist2 <= radius ** 2


def synth_sample(rng: np.random.Generator, H: int, W: int, n_anatomy: int, n_tool: int):
    """One scene: image (3xHxW float) plus anatomy and tool local masks."""
    scale = min(H, W)
    anat = np.zeros((H, W), dtype=np.uint8)
    for k in range(n_anatomy):
        field = _smooth_field(rng, H, W, sigma=scale / 8)
        blob = field > np.quantile(field, 0.75)
        anat[blob] = k + 1
    light = _smooth_field(rng, H, W, sigma=scale / 6)
    shade = np.clip(1.0 + 0.12 * (light - light.mean()) / (light.std() + 1e-9), 0.7, 1.3)
    image = np.empty((H, W, 3))
    image[:] = _TISSUE
    for k in range(n_anatomy):
        image[anat == k + 1] = _ORGAN_RGB[k % len(_ORGAN_RGB)]
    image *= shade[..., None]

    tool = np.zeros((H, W), dtype=np.uint8)
    for _ in range(int(rng.integers(1, 3))):
        cls = int(rng.integers(n_tool)) + 1
        # tools enter from the frame edge
        side = int(rng.integers(4))
        edge = rng.uniform(0.2, 0.8)
        p0 = {0: (0.0, edge * W), 1: (H - 1.0, edge * W), 2: (edge * H, 0.0), 3: (edge * H, W - 1.0)}[side]
        p0 = np.array(p0)
        angle = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(0.3, 0.6) * scale
        p1 = p0 + length * np.array([np.sin(angle), np.cos(angle)])
        p1 = np.array([np.clip(p1[0], 0, H - 1), np.clip(p1[1], 0, W - 1)])
        radius = rng.uniform(0.022, 0.04) * scale
        m = _capsule(H, W, p0, p1, radius)
        tool[m] = cls
    for k in range(n_tool):
        image[tool == k + 1] = _TOOL_RGB[k % len(_TOOL_RGB)]
    anat[tool != 0] = 0
    image += rng.normal(0.0, 0.03, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32).transpose(2, 0, 1)
    return image, anat, tool


def synth_generate(root, seed: int = 7, n_train: int = 200, n_val: int = 50, n_test: int = 0,
                   size: int | tuple[int, int] = 64, registry: LabelRegistry | None = None) -> Path:
    """Write a deterministic synthetic dataset; same seed gives identical bytes."""
    H, W = (size, size) if isinstance(size, int) else size
    if H <= 0 or W <= 0 or H % 32 or W % 32:
        raise ValueError(f"size {H}x{W} must be positive and divisible by 32")
    registry = registry or default_registry()
    n_anat = len(registry.head_classes("anatomy"))
    n_tool = len(registry.head_classes("tool"))
    if n_anat < 1 or n_tool < 1:
        raise ValueError("registry needs at least one anatomy and one tool class")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    registry.to_json(root / "classes.json")
    apal, tpal = head_palette(registry, "anatomy"), head_palette(registry, "tool")
    for s_idx, (split, n) in enumerate(zip(SPLITS, (n_train, n_val, n_test))):
        for i in range(n):
            rng = np.random.default_rng([seed, s_idx, i])
            image, anat, tool = synth_sample(rng, H, W, n_anat, n_tool)
            name = f"{split}_{i:05d}.png"
            write_image(root / "images" / split / name, image)
            write_mask(root / "masks_anatomy" / split / name, anat, apal)
            write_mask(root / "masks_tool" / split / name, tool, tpal)
    return root


def collate(samples: Sequence[Sample], head: str):
    """Stack a list of samples into (images, targets) tensors for one head."""
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    key = "anat_mask" if head == "anatomy" else "tool_mask"
    targets = torch.from_numpy(np.stack([getattr(s, key) for s in samples]).astype(np.int64))
    return images, targets
