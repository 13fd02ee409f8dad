"""Pseudo-annotation mining for unknown objects.

Background-predicted proposals are re-scored by the vision-language
oracle; confident broad-class hits become pseudo boxes kept in a
per-image store that stays NMS-deduplicated.  Later visits to the same
image sample from the store instead of re-running identification.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import iou

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MinerConfig:
    tr: float = 0.7            # oracle probability threshold
    min_side: float = 100.0    # both sides must exceed this, original pixels
    top_k_background: int = 10
    nms_iou: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if not (0.0 < self.tr < 1.0):
            raise ValueError("tr must be in (0, 1)")
        if self.min_side < 1.0:
            raise ValueError("min_side must be >= 1")


@dataclass(frozen=True)
class PseudoBox:
    x1: float
    y1: float
    x2: float
    y2: float
    label: str
    score: float
    source_iteration: int = 0

    def geometry(self):
        return (self.x1, self.y1, self.x2, self.y2)


class PseudoStore:
    """Per-image repository of miner-produced broad-labeled boxes."""

    def __init__(self):
        self._by_image: dict[str, tuple[PseudoBox, ...]] = {}

    def boxes_for(self, image_id: str) -> tuple[PseudoBox, ...]:
        return self._by_image.get(image_id, ())

    def has(self, image_id: str) -> bool:
        return image_id in self._by_image

    def image_ids(self) -> list[str]:
        return sorted(self._by_image)

    def __eq__(self, other):
        return isinstance(other, PseudoStore) and self._by_image == other._by_image

    def total_boxes(self) -> int:
        return sum(len(v) for v in self._by_image.values())


def propose_regions(image: np.ndarray, min_side: float = 8.0,
                    max_proposals: int = 32,
                    saliency_threshold: float = 60.0):
    """Class-agnostic box proposals from color saliency.

    Stand-in for a region-proposal network: the border median estimates
    the background color, pixels far from it (summed absolute channel
    difference above ``saliency_threshold``) are grouped into connected
    components, and each sufficiently large component yields one box.
    Boxes are ordered by descending area and truncated to
    ``max_proposals``.  Deterministic; uses no annotation information.
    """
    import cv2

    img = np.asarray(image)
    if img.ndim != 3:
        raise ValueError("expected an HxWxC image")
    border = np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]], axis=0)
    bg = np.median(border.astype(np.float64), axis=0)
    dist = np.abs(img.astype(np.float64) - bg).sum(axis=-1)
    mask = (dist > saliency_threshold).astype(np.uint8)
    n, _, stats, _ = cv2.connectedComponentsWithStats(mask, connectivity=8)
    boxes = []
    for i in range(1, n):
        x, y, w, h, area = (float(v) for v in stats[i])
        if w < min_side or h < min_side:
            continue
        if area < 0.2 * w * h:  # reject wispy noise components
            continue
        boxes.append((x, y, x + w, y + h))
    boxes.sort(key=lambda b: (-(b[2] - b[0]) * (b[3] - b[1]), b))
    return boxes[:max_proposals]


def select_background_proposals(scored, k: int, min_side: float):
    """Top-k proposals by background probability, then size-gated.

    ``scored`` is a list of (box, background_probability).  Ordering is by
    descending background score with ties broken by input index; the size
    gate requires both sides strictly greater than ``min_side``.
    """
    order = sorted(range(len(scored)), key=lambda i: (-scored[i][1], i))[:k]
    kept = []
    for i in order:
        box = scored[i][0]
        if box[2] - box[0] > min_side and box[3] - box[1] > min_side:
            kept.append(scored[i])
    return kept


def identify(subset, image: np.ndarray, broad_names, label_space,
             oracle, config: MinerConfig, source_iteration: int = 0) -> list[PseudoBox]:
    """Oracle-score each candidate; keep broad-name winners above tr.

    Scoring runs over label_space union broad names; a pseudo box is
    emitted only when the argmax is a broad name and its probability
    exceeds the threshold.  Oracle failures skip the proposal.
    """
    if not config.enabled:
        return []
    scored_names = list(dict.fromkeys(list(label_space) + list(broad_names)))
    broad_set = set(broad_names)
    out = []
    for box, _bg_prob in subset:
        try:
            probs = oracle.score_region(image, box, scored_names)
        except ValueError as exc:
            log.warning("miner skipping proposal %s: %s", box, exc)
            continue
        winner = int(np.argmax(probs))
        name = scored_names[winner]
        p = float(probs[winner])
        if name in broad_set and p > config.tr:
            out.append(PseudoBox(float(box[0]), float(box[1]),
                                 float(box[2]), float(box[3]),
                                 label=name, score=p,
                                 source_iteration=source_iteration))
    return out


def commit(store: PseudoStore, image_id: str, boxes: list[PseudoBox],
           nms_iou: float = 0.5) -> PseudoStore:
    """Merge new boxes into the image's list under per-label NMS.

    Keeps the highest-scoring box among same-label overlaps; committing
    the same boxes twice is a no-op.  The image's list is replaced
    atomically.
    """
    merged = list(store.boxes_for(image_id)) + [b for b in boxes]
    by_label: dict[str, list[PseudoBox]] = {}
    for b in merged:
        by_label.setdefault(b.label, []).append(b)
    final: list[PseudoBox] = []
    for label in sorted(by_label):
        group = by_label[label]
        order = sorted(range(len(group)),
                       key=lambda i: (-group[i].score, group[i].geometry()))
        kept: list[int] = []
        for i in order:
            if all(iou(group[i].geometry(), group[j].geometry()) <= nms_iou
                   for j in kept):
                kept.append(i)
        final.extend(group[i] for i in kept)
    final.sort(key=lambda b: (b.label, -b.score, b.geometry()))
    store._by_image[image_id] = tuple(final)
    return store


def sample_for_training(store: PseudoStore, image_id: str,
                        rng_seed: int) -> list[PseudoBox]:
    """Sample Z pseudo boxes, Z = number of distinct stored labels.

    Stratified one box per distinct label, uniform within the label,
    deterministic under the seed.
    """
    boxes = store.boxes_for(image_id)
    if not boxes:
        return []
    by_label: dict[str, list[PseudoBox]] = {}
    for b in boxes:
        by_label.setdefault(b.label, []).append(b)
    rng = np.random.default_rng((rng_seed, zlib.crc32(image_id.encode("utf-8"))))
    out = []
    for label in sorted(by_label):
        group = by_label[label]
        out.append(group[int(rng.integers(0, len(group)))])
    return out


_HEADER = "incdet-pseudo-store v1"


def persist(store: PseudoStore, path: str | Path) -> None:
    lines = [_HEADER]
    for image_id in store.image_ids():
        for b in store.boxes_for(image_id):
            lines.append("\t".join([
                image_id,
                f"{b.x1:.4f}", f"{b.y1:.4f}", f"{b.x2:.4f}", f"{b.y2:.4f}",
                b.label, f"{b.score:.6f}", str(b.source_iteration),
            ]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load(path: str | Path) -> PseudoStore:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != _HEADER:
        raise ValueError(f"{path}: missing store header")
    store = PseudoStore()
    staged: dict[str, list[PseudoBox]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 8:
            raise ValueError(f"{path}: malformed record at line {lineno}")
        try:
            image_id = parts[0]
            box = PseudoBox(float(parts[1]), float(parts[2]),
                            float(parts[3]), float(parts[4]),
                            label=parts[5], score=float(parts[6]),
                            source_iteration=int(parts[7]))
        except ValueError:
            raise ValueError(f"{path}: malformed record at line {lineno}") from None
        staged.setdefault(image_id, []).append(box)
    for image_id, boxes in staged.items():
        store._by_image[image_id] = tuple(sorted(
            boxes, key=lambda b: (b.label, -b.score, b.geometry())))
    return store
