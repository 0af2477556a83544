"""Late fusion of the anatomy and tool heads into one global label map."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from scipy import ndimage

Head = Literal["anatomy", "tool"]
HEADS = ("anatomy", "tool")
IGNORE_INDEX = 255


class RegistryError(ValueError):
    pass


@dataclass(frozen=True)
class ClassInfo:
    global_id: int
    head: str
    local_id: int
    name: str
    color: tuple[int, int, int]


class LabelRegistry:
    """Global id <-> (head, head-local id) mapping. Id 0 is background everywhere.

    Head-local ids are assigned 1..n in ascending global-id order within each head.
    """

    def __init__(self, classes, background_name="background", background_color=(0, 0, 0)):
        self.background = ClassInfo(0, "", 0, background_name, tuple(background_color))
        entries = sorted(classes, key=lambda c: c["id"])
        seen = set()
        counters = {h: 0 for h in HEADS}
        infos = []
        for c in entries:
            gid = int(c["id"])
            if gid == 0:
                self.background = ClassInfo(0, "", 0, c.get("name", background_name),
                                            tuple(c.get("color", background_color)))
                continue
            if gid in seen:
                raise RegistryError(f"duplicate class id {gid}")
            if not 0 < gid < IGNORE_INDEX:
                raise RegistryError(f"class id {gid} out of range 1..254")
            head = c["head"]
            if head not in HEADS:
                raise RegistryError(f"class {gid}: unknown head {head!r}")
            seen.add(gid)
            counters[head] += 1
            infos.append(ClassInfo(gid, head, counters[head], c["name"], tuple(int(v) for v in c["color"])))
        self.classes: list[ClassInfo] = infos
        self._by_local = {(i.head, i.local_id): i for i in infos}

    @classmethod
    def from_json(cls, path) -> "LabelRegistry":
        return cls(json.loads(Path(path).read_text()))

    def to_list(self) -> list[dict]:
        out = [{"id": 0, "name": self.background.name, "head": "background",
                "color": list(self.background.color)}]
        out += [{"id": i.global_id, "name": i.name, "head": i.head, "color": list(i.color)}
                for i in self.classes]
        return out

    def to_json(self, path):
        items = [d for d in self.to_list() if d["id"] != 0]
        Path(path).write_text(json.dumps(items, indent=2))

    def __eq__(self, other):
        return isinstance(other, LabelRegistry) and self.to_list() == other.to_list()

    def head_classes(self, head: str) -> list[ClassInfo]:
        return [i for i in self.classes if i.head == head]

    def num_classes(self, head: str | None = None) -> int:
        """Class count including background, globally or for one head."""
        if head is None:
            return max((i.global_id for i in self.classes), default=0) + 1
        return len(self.head_classes(head)) + 1

    def global_id(self, head: str, local_id: int) -> int:
        if local_id == 0:
            return 0
        try:
            return self._by_local[(head, local_id)].global_id
        except KeyError:
            raise RegistryError(f"{head} label {local_id} is not registered") from None

    def names(self, head: str | None = None) -> list[str]:
        if head is None:
            table = {0: self.background.name} | {i.global_id: i.name for i in self.classes}
            return [table.get(k, f"unused_{k}") for k in range(self.num_classes())]
        return [self.background.name] + [i.name for i in self.head_classes(head)]

    def lut(self, head: str) -> np.ndarray:
        """256-entry table mapping head-local ids to global ids; unregistered -> -1."""
        table = np.full(256, -1, dtype=np.int64)
        table[0] = 0
        table[IGNORE_INDEX] = IGNORE_INDEX
        for i in self.head_classes(head):
            table[i.local_id] = i.global_id
        return table

    def to_global(self, head: str, local: np.ndarray) -> np.ndarray:
        local = np.asarray(local)
        if local.size and (local.min() < 0 or local.max() > 255):
            raise RegistryError(f"{head} labels outside 0..255")
        mapped = self.lut(head)[local.astype(np.int64)]
        if (mapped < 0).any():
            bad = int(np.unique(local[mapped < 0])[0])
            raise RegistryError(f"{head} label {bad} is not registered")
        return mapped

    def palette(self) -> list[int]:
        """Flat 768-int PIL palette indexed by global id."""
        pal = [0] * 768
        pal[0:3] = self.background.color
        for i in self.classes:
            pal[3 * i.global_id:3 * i.global_id + 3] = i.color
        return pal

    def merge_masks(self, anat_mask: np.ndarray, tool_mask: np.ndarray) -> np.ndarray:
        """Global ground truth from the two head masks; tools occlude anatomy."""
        anat = self.to_global("anatomy", anat_mask)
        tool = self.to_global("tool", tool_mask)
        out = np.where(tool != 0, tool, anat)
        out[(anat_mask == IGNORE_INDEX) | (tool_mask == IGNORE_INDEX)] = IGNORE_INDEX
        return out


@dataclass
class SegOutput:
    probs: torch.Tensor       # B x K x H x W
    labels: torch.Tensor      # B x H x W, argmax
    confidence: torch.Tensor  # B x H x W, max prob
    head: str = "anatomy"


def derive_output(probs: torch.Tensor, head: str = "anatomy", atol: float = 1e-4) -> SegOutput:
    """Materialize label and confidence maps from per-pixel class probabilities.

    Ties go to the lowest class index.
    """
    if probs.ndim == 3:
        probs = probs.unsqueeze(0)
    if probs.ndim != 4:
        raise ValueError(f"expected B x K x H x W probabilities, got {tuple(probs.shape)}")
    if (probs < -atol).any() or ((probs.sum(dim=1) - 1).abs() > atol).any():
        raise ValueError("probabilities are not normalized per pixel")
    conf, labels = probs.max(dim=1)
    # torch.max does not document tie order; recompute the first maximal index
    first = (probs == conf.unsqueeze(1)).to(torch.int8).argmax(dim=1)
    return SegOutput(probs, first.to(labels.dtype), conf, head)


def priority_fuse(inst: SegOutput, anat: SegOutput, registry: LabelRegistry,
                  mode: Literal["priority", "or"] = "priority") -> np.ndarray:
    """Global label map: the tool label wins where its confidence is strictly
    higher or where the anatomy head predicts background.

    A tool-head *background* prediction never overrides an anatomy label, so a
    pixel is background only when both heads say background. Confidence ties
    go to anatomy. ``mode="or"`` is the plain union baseline: any tool
    foreground wins regardless of confidence.
    """
    if inst.labels.shape != anat.labels.shape:
        raise ValueError(f"size mismatch: {tuple(inst.labels.shape)} vs {tuple(anat.labels.shape)}")
    m_inst = registry.to_global("tool", inst.labels.cpu().numpy())
    m_anat = registry.to_global("anatomy", anat.labels.cpu().numpy())
    if mode == "priority":
        higher = (inst.confidence > anat.confidence).cpu().numpy()
        take_inst = (higher & (m_inst != 0)) | (m_anat == 0)
    elif mode == "or":
        take_inst = m_inst != 0
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    return np.where(take_inst, m_inst, m_anat)


def _open_close(mask: np.ndarray, structure: np.ndarray) -> np.ndarray:
    # erosion treats outside as foreground, dilation as background: keeps the
    # pair adjoint so opening/closing do not eat objects touching the border
    def erode(m):
        return ndimage.binary_erosion(m, structure, border_value=1)

    def dilate(m):
        return ndimage.binary_dilation(m, structure, border_value=0)

    opened = dilate(erode(mask))
    return erode(dilate(opened))


def morph_refine(fused: np.ndarray, radius: int = 1) -> np.ndarray:
    """Per-class opening then closing with a (2r+1)^2 square element.

    A pixel claimed by exactly one refined class takes that class; claimed by
    none it becomes background; claimed by several it keeps its input label.
    Works on H x W or B x H x W maps.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    fused = np.asarray(fused)
    if fused.ndim == 3:
        return np.stack([morph_refine(f, radius) for f in fused])
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    claims = np.zeros(fused.shape, dtype=np.int32)
    winner = np.zeros_like(fused)
    for c in np.unique(fused):
        if c == 0 or c == IGNORE_INDEX:
            continue
        refined = _open_close(fused == c, structure)
        claims += refined
        winner[refined] = c
    out = np.where(claims == 1, winner, 0)
    contested = claims > 1
    out[contested] = fused[contested]
    keep = fused == IGNORE_INDEX
    out[keep] = IGNORE_INDEX
    return out.astype(fused.dtype)
