"""Evaluation driver: single-head and fused metrics, fused mask export, overlays,
and the loss ablation runner."""
from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .checkpoint import checkpoint_registry, load_checkpoint
from .config import TrainConfig
from .data import Sample, collate, load_dataset, read_image, write_mask
from .fusion import IGNORE_INDEX, LabelRegistry, SegOutput, derive_output, morph_refine, priority_fuse
from .metrics import ConfusionMatrix, accumulate, build_report, write_report
from .train import predict_probs, train

MODES = ("anatomy", "tool", "fused")


class RegistryMismatchError(ValueError):
    pass


def load_pair(checkpoints: Mapping[str, str | Path], needed: Sequence[str]):
    """Load the checkpoints for ``needed`` heads and check they share one registry."""
    models, registry = {}, None
    for head in needed:
        if head not in checkpoints or checkpoints[head] is None:
            raise ValueError(f"no checkpoint given for the {head} head")
        model, header = load_checkpoint(checkpoints[head])
        if header["head"] != head:
            raise ValueError(f"{checkpoints[head]} was trained for head {header['head']!r}, not {head!r}")
        reg = checkpoint_registry(header)
        if registry is not None and reg != registry:
            raise RegistryMismatchError("anatomy and tool checkpoints carry different label registries")
        registry = reg
        models[head] = model
    return models, registry


def _one_hot_probs(mask: np.ndarray, K: int) -> torch.Tensor:
    m = torch.from_numpy(np.where(mask == IGNORE_INDEX, 0, mask).astype(np.int64))
    return F.one_hot(m, K).permute(0, 3, 1, 2).float()


def head_outputs(models, samples: list[Sample], registry: LabelRegistry, heads, inject_gt=False):
    outs = {}
    for head in heads:
        if inject_gt:
            key = "anat_mask" if head == "anatomy" else "tool_mask"
            probs = _one_hot_probs(np.stack([getattr(s, key) for s in samples]), registry.num_classes(head))
        else:
            images = torch.from_numpy(np.stack([s.image for s in samples]))
            probs = predict_probs(models[head], images)
        outs[head] = derive_output(probs, head)
    return outs


def fuse_outputs(outs: dict[str, SegOutput], registry, refine_radius: int | None = None,
                 fusion_mode: str = "priority") -> np.ndarray:
    fused = priority_fuse(outs["tool"], outs["anatomy"], registry, mode=fusion_mode)
    if refine_radius:
        fused = morph_refine(fused, refine_radius)
    return fused


def evaluate(checkpoints: Mapping[str, str | Path] | None, root, split: str = "val", mode: str = "fused",
             *, refine_radius: int | None = None, fusion_mode: str = "priority",
             include_background: bool = True, label_space: str = "head", inject_gt: bool = False,
             registry: LabelRegistry | None = None, batch: int = 32) -> dict:
    """Metrics report for one head or the fused pair.

    ``label_space="global"`` scores a single head against the full global
    ground truth (other heads' classes count as missed). ``inject_gt`` replaces
    model predictions by one-hot ground truth, for exercising the pipeline.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    heads = ("anatomy", "tool") if mode == "fused" or label_space == "global" else (mode,)
    pred_heads = ("anatomy", "tool") if mode == "fused" else (mode,)
    models = {}
    if not inject_gt:
        models, registry = load_pair(checkpoints or {}, pred_heads)
    elif registry is None:
        registry = LabelRegistry.from_json(Path(root) / "classes.json")
    samples = load_dataset(root, split, registry, heads=heads)
    use_global = mode == "fused" or label_space == "global"
    K = registry.num_classes() if use_global else registry.num_classes(mode)
    cm = ConfusionMatrix(K)
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        outs = head_outputs(models, chunk, registry, pred_heads, inject_gt)
        if use_global:
            gt = np.stack([registry.merge_masks(s.anat_mask, s.tool_mask) for s in chunk])
            if mode == "fused":
                pred = fuse_outputs(outs, registry, refine_radius, fusion_mode)
            else:
                pred = registry.to_global(mode, outs[mode].labels.numpy())
        else:
            gt = collate(chunk, mode)[1].numpy()
            pred = outs[mode].labels.numpy()
        cm = accumulate(cm, pred, gt)
    names = registry.names() if use_global else registry.names(mode)
    echo = {"split": split, "mode": mode, "refine_radius": refine_radius, "fusion_mode": fusion_mode,
            "label_space": "global" if use_global else "head", "images": len(samples),
            "checkpoints": {k: str(v) for k, v in (checkpoints or {}).items()}}
    return build_report(cm, names, include_background, echo)


def export_fused(checkpoints, root, split, out_dir, refine_radius=None, fusion_mode="priority") -> list[Path]:
    """Write one fused global-id mask PNG per image of ``split``."""
    models, registry = load_pair(checkpoints, ("anatomy", "tool"))
    samples = load_dataset(root, split, registry, heads=())
    out_dir = Path(out_dir)
    written = []
    for s in samples:
        outs = head_outputs(models, [s], registry, ("anatomy", "tool"))
        fused = fuse_outputs(outs, registry, refine_radius, fusion_mode)[0]
        path = out_dir / f"{s.id}.png"
        write_mask(path, fused, registry.palette())
        written.append(path)
    return written


def infer_overlay(checkpoints, image_path, out_prefix, refine_radius=None, fusion_mode="priority",
                  blend: float = 0.5) -> dict:
    """Fused mask + colour overlay for one image.

    Images whose sides are not multiples of 32 are edge-padded at the bottom
    and right and the result is cropped back; the sidecar JSON records this.
    """
    models, registry = load_pair(checkpoints, ("anatomy", "tool"))
    try:
        image = read_image(image_path)
    except Exception as e:
        raise ValueError(f"cannot read image {image_path}: {e}") from e
    H, W = image.shape[1:]
    ph, pw = (-H) % 32, (-W) % 32
    padded = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="edge")
    outs = head_outputs(models, [Sample(padded, None, None, "x")], registry, ("anatomy", "tool"))
    fused = fuse_outputs(outs, registry, refine_radius, fusion_mode)[0][:H, :W].astype(np.uint8)

    with Image.open(image_path) as im:
        rgb = np.asarray(im.convert("RGB")).astype(np.float64)
    colors = np.array(registry.palette(), dtype=np.float64).reshape(256, 3)[fused]
    overlay = rgb.copy()
    fg = fused != 0
    overlay[fg] = (1 - blend) * rgb[fg] + blend * colors[fg]
    overlay = np.clip(np.rint(overlay), 0, 255).astype(np.uint8)

    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    mask_path = out_prefix.with_name(out_prefix.name + "_mask.png")
    overlay_path = out_prefix.with_name(out_prefix.name + "_overlay.png")
    meta_path = out_prefix.with_name(out_prefix.name + ".json")
    write_mask(mask_path, fused, registry.palette())
    Image.fromarray(overlay, "RGB").save(overlay_path)
    meta = {
        "image": str(image_path),
        "original_size": [H, W],
        "padded_size": [H + ph, W + pw],
        "padding": {"bottom": ph, "right": pw},
        "blend": blend,
        "refine_radius": refine_radius,
        "fusion_mode": fusion_mode,
        "classes_present": sorted(int(c) for c in np.unique(fused)),
    }
    meta_path.write_text(json.dumps(meta, indent=2))
    return {"mask": mask_path, "overlay": overlay_path, "meta": meta_path, **meta}


ABLATION_RUNS = (("tversky", 1.0), ("cross_entropy", 0.0), ("combined", 0.7))


def ablate_losses(config: TrainConfig, seeds: Sequence[int] = (0, 1, 2, 3, 4), out_dir=None,
                  lambda_combined: float = 0.7) -> dict:
    """Train the configured head under Tversky-only, CE-only and combined loss
    for each seed; report mean val mIoU/Dice per loss."""
    root = Path(config.dataset_root)
    registry = LabelRegistry.from_json(root / "classes.json")
    train_s = load_dataset(root, "train", registry, heads=(config.head,))
    val_s = load_dataset(root, config.val_split, registry, heads=(config.head,))
    out_dir = Path(out_dir or config.output_dir)
    rows = []
    for name, lam in ABLATION_RUNS:
        if name == "combined":
            lam = lambda_combined
        per_seed = []
        for seed in seeds:
            cfg = config.replace(seed=seed, loss=dataclasses.replace(config.loss, lambda_combined=lam),
                                 output_dir=str(out_dir / name / f"seed{seed}"))
            res = train(cfg, train_samples=train_s, val_samples=val_s, registry=registry)
            last = res.history[-1]
            per_seed.append({"seed": seed, "miou": last["val_miou"], "dice": last["val_dice"],
                             "probe_loss": res.probe["loss"]})
        rows.append({
            "loss": name,
            "lambda_combined": lam,
            "miou": float(np.mean([r["miou"] for r in per_seed])),
            "dice": float(np.mean([r["dice"] for r in per_seed])),
            "runs": per_seed,
        })
    report = {"head": config.head, "seeds": list(seeds), "rows": rows, "config": config.to_dict()}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.json").write_text(json.dumps(report, indent=2))
    with (out_dir / "ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Loss Function", "mIoU", "Dice"])
        for r in rows:
            w.writerow([r["loss"], f"{100 * r['miou']:.2f}", f"{100 * r['dice']:.2f}"])
    return report


__all__ = ["evaluate", "export_fused", "infer_overlay", "ablate_losses", "write_report", "load_pair"]
