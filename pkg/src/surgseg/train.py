"""Training loop for one model instance (SegAnatomy or SegTool)."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import TrainConfig
from .data import Sample, augment, collate, load_dataset
from .decoders import DecoderConfig, SegModel
from .fusion import LabelRegistry
from .loss import combined_loss
from .metrics import ConfusionMatrix, accumulate, mean_dice, miou

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


def triangular_lr(step: int, lr_base: float, lr_max: float, cycle_length: int) -> float:
    """Triangular cyclic policy: base at the cycle start, max at its midpoint."""
    half = cycle_length / 2
    cycle = math.floor(1 + step / cycle_length)
    x = abs(step / half - 2 * cycle + 1)
    return lr_base + (lr_max - lr_base) * max(0.0, 1.0 - x)


def lr_at(config: TrainConfig, step: int) -> float:
    if config.scheduler == "constant":
        return config.lr_base
    return triangular_lr(step, config.lr_base, config.lr_max, config.cycle_length_steps)


def param_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_model(config: TrainConfig, registry: LabelRegistry) -> SegModel:
    dec = DecoderConfig(config.resolved_embed_dim, registry.num_classes(config.head),
                        config.resolved_head_kind)
    return SegModel(config.variant, dec)


def target_key(head: str) -> str:
    return "anat_mask" if head == "anatomy" else "tool_mask"


@torch.no_grad()
def predict_probs(model: SegModel, images: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
    model.eval()
    out = [model(images[i:i + batch_size]).softmax(1) for i in range(0, len(images), batch_size)]
    return torch.cat(out)


def evaluate_head(model: SegModel, samples: list[Sample], head: str, num_classes: int,
                  ignore_index: int = 255) -> ConfusionMatrix:
    cm = ConfusionMatrix(num_classes)
    if not samples:
        return cm
    images, targets = collate(samples, head)
    pred = predict_probs(model, images).argmax(1)
    return accumulate(cm, pred.numpy(), targets.numpy(), ignore_index)


@dataclass
class TrainResult:
    model: SegModel
    history: list[dict] = field(default_factory=list)
    best_checkpoint: Path | None = None
    last_checkpoint: Path | None = None
    step: int = 0
    probe: dict = field(default_factory=dict)


def _check_finite_params(model, step):
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise NonFiniteLossError(step, f"parameter {name}")


def train(config: TrainConfig, *, train_samples: list[Sample] | None = None,
          val_samples: list[Sample] | None = None, registry: LabelRegistry | None = None,
          save: bool = True, model: SegModel | None = None) -> TrainResult:
    """Train one head with the combined loss.

    Samples and registry are read from ``config.dataset_root`` unless passed in.
    Shuffling and augmentation draws depend only on (seed, epoch).
    """
    root = Path(config.dataset_root)
    if registry is None:
        registry = LabelRegistry.from_json(root / "classes.json")
    heads = (config.head,)
    if train_samples is None:
        train_samples = load_dataset(root, "train", registry, heads=heads)
    if val_samples is None:
        val_dir = root / "images" / config.val_split
        val_samples = load_dataset(root, config.val_split, registry, heads=heads) if val_dir.is_dir() else []
    if not train_samples:
        raise ValueError("training set is empty")
    K = registry.num_classes(config.head)

    torch.manual_seed(config.seed)
    if model is None:
        model = build_model(config, registry)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr_base, weight_decay=config.weight_decay)
    out_dir = Path(config.output_dir)
    result = TrainResult(model)
    best = -1.0
    step = 0
    done = False
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(train_samples))
        model.train()
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [augment(train_samples[i], config.augmentation, rng)
                     for i in order[start:start + config.batch_size]]
            images, targets = collate(batch, config.head)
            lr = lr_at(config, step)
            for g in opt.param_groups:
                g["lr"] = lr
            _check_finite_params(model, step)
            probs = model(images).softmax(1)
            loss = combined_loss(probs, targets, config.loss)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        record = {"epoch": epoch, "step": step, "train_loss": float(np.mean(losses)), "lr": lr}
        if val_samples:
            cm = evaluate_head(model, val_samples, config.head, K, config.loss.ignore_index)
            record["val_miou"] = miou(cm)
            record["val_dice"] = mean_dice(cm)
        result.history.append(record)
        log.info("epoch %d %s", epoch, json.dumps(record))
        score = record.get("val_miou", -record["train_loss"])
        if save and score > best:
            best = score
            result.best_checkpoint = save_checkpoint(
                out_dir / "best.ckpt", model, head=config.head, registry=registry, step=step,
                config=config.to_dict(), extra={"epoch": epoch, **record})
        if done:
            break
    result.step = step
    result.probe = probe_batch(model, train_samples[:config.batch_size], config)
    if save:
        result.last_checkpoint = save_checkpoint(
            out_dir / "last.ckpt", model, head=config.head, registry=registry, step=step,
            config=config.to_dict(), extra={"epoch": len(result.history) - 1})
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "history.json").write_text(json.dumps(result.history, indent=2))
        np.save(out_dir / "probe_logits.npy", result.probe["logits"])
        np.save(out_dir / "probe_targets.npy", result.probe["targets"])
        (out_dir / "probe.json").write_text(json.dumps({"loss": result.probe["loss"]}))
    return result


@torch.no_grad()
def probe_batch(model: SegModel, samples: list[Sample], config: TrainConfig) -> dict:
    """Loss on a fixed, un-augmented batch in eval mode, with the logits it came from."""
    model.eval()
    images, targets = collate(samples, config.head)
    logits = model(images)
    loss = combined_loss(logits.softmax(1), targets, config.loss)
    return {"logits": logits.numpy(), "targets": targets.numpy(), "loss": float(loss)}
