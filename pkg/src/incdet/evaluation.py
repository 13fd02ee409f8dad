"""Box geometry and VOC2007-style detection metrics.

Boxes are (x1, y1, x2, y2) floats in image coordinates with x2 > x1 and
y2 > y1; areas are plain (x2 - x1) * (y2 - y1), no +1 convention.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class DetectionResult:
    image_id: str
    label: str
    score: float
    box: Box


@dataclass
class APReport:
    stage: str
    per_class_ap: dict[str, float]
    map_base: float
    map_novel: float
    map_all: float
    notes: tuple[str, ...] = field(default_factory=tuple)

    def to_json(self) -> str:
        payload = {
            "stage": self.stage,
            "per_class_ap": {k: self.per_class_ap[k] for k in sorted(self.per_class_ap)},
            "map_base": self.map_base,
            "map_novel": self.map_novel,
            "map_all": self.map_all,
            "notes": list(self.notes),
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        lines = [f"stage {self.stage}"]
        width = max((len(n) for n in self.per_class_ap), default=4)
        for name in self.per_class_ap:
            lines.append(f"  {name:<{width}}  {self.per_class_ap[name] * 100:6.2f}")
        lines.append(f"  {'base':<{width}}  {self.map_base * 100:6.2f}")
        lines.append(f"  {'novel':<{width}}  {self.map_novel * 100:6.2f}")
        lines.append(f"  {'all':<{width}}  {self.map_all * 100:6.2f}")
        return "\n".join(lines) + "\n"


def box_area(box: Box) -> float:
    x1, y1, x2, y2 = box
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"degenerate box {box}")
    return (x2 - x1) * (y2 - y1)


def iou(box_a: Box, box_b: Box) -> float:
    area_a = box_area(box_a)
    area_b = box_area(box_b)
    ix1 = max(box_a[0], box_b[0])
    iy1 = max(box_a[1], box_b[1])
    ix2 = min(box_a[2], box_b[2])
    iy2 = min(box_a[3], box_b[3])
    iw = max(0.0, ix2 - ix1)
    ih = max(0.0, iy2 - iy1)
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, boxes as (N, 4) float arrays."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    ix1 = np.maximum(boxes_a[:, None, 0], boxes_b[None, :, 0])
    iy1 = np.maximum(boxes_a[:, None, 1], boxes_b[None, :, 1])
    ix2 = np.minimum(boxes_a[:, None, 2], boxes_b[None, :, 2])
    iy2 = np.minimum(boxes_a[:, None, 3], boxes_b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def nms(boxes: list[Box] | np.ndarray, scores: list[float] | np.ndarray,
        iou_thr: float) -> list[int]:
    """Greedy NMS by descending score; ties broken by input index."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores length mismatch")
    if len(boxes) == 0:
        return []
    # stable sort keeps input order among equal scores
    order = np.argsort(-scores, kind="stable")
    ious = iou_matrix(boxes, boxes)
    kept: list[int] = []
    for idx in order:
        if all(ious[idx, k] <= iou_thr for k in kept):
            kept.append(int(idx))
    return kept


def voc07_ap(dets: list[DetectionResult],
             gts: dict[str, list[tuple[Box, bool]]],
             iou_thr: float = 0.5,
             mode: str = "voc07") -> float:
    """Average precision for a single class.

    ``gts`` maps image_id to (box, difficult) pairs.  Difficult ground
    truth is excluded from the positive count; detections matched to a
    difficult box count as neither TP nor FP.  ``mode`` is "voc07" for
    11-point interpolation or "area" for area under the PR curve.
    """
    npos = sum(1 for boxes in gts.values() for _, diff in boxes if not diff)
    if not dets:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    matched: dict[str, set[int]] = {img: set() for img in gts}
    tp = []
    fp = []
    for i in order:
        det = dets[i]
        gt_list = gts.get(det.image_id, [])
        best_iou = 0.0
        best_j = -1
        for j, (gbox, _diff) in enumerate(gt_list):
            if j in matched.get(det.image_id, set()):
                continue
            ov = iou(det.box, gbox)
            if ov > best_iou:
                best_iou = ov
                best_j = j
        if best_j >= 0 and best_iou >= iou_thr:
            if gt_list[best_j][1]:
                continue  # difficult match: ignore
            matched.setdefault(det.image_id, set()).add(best_j)
            tp.append(1.0)
            fp.append(0.0)
        else:
            tp.append(0.0)
            fp.append(1.0)
    if npos == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / npos
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    if mode == "voc07":
        ap = 0.0
        for level in np.linspace(0.0, 1.0, 11):
            mask = recall >= level - 1e-12
            p = float(precision[mask].max()) if mask.any() else 0.0
            ap += p / 11.0
        return float(ap)
    if mode == "area":
        mrec = np.concatenate(([0.0], recall, [1.0]))
        mpre = np.concatenate(([0.0], precision, [0.0]))
        for k in range(len(mpre) - 2, -1, -1):
            mpre[k] = max(mpre[k], mpre[k + 1])
        idx = np.where(mrec[1:] != mrec[:-1])[0]
        return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    raise ValueError(f"unknown AP mode {mode!r}")


def map_report(dets: list[DetectionResult],
               gts: dict[str, list[tuple[Box, str, bool]]],
               registry,
               stage: str,
               iou_thr: float = 0.5,
               ap_mode: str = "voc07") -> APReport:
    """Per-class AP plus base/novel/all means.

    ``gts`` maps image_id to (box, label, difficult) triples covering the
    full test split.  Classes with no ground truth in the split are
    excluded from the means with a warning.  Novel AP at stage 1 scores
    whatever novel-named detections the head emits (zero-shot rows).
    """
    eval_classes = list(registry.base_names) + list(registry.novel_names)
    known = set(eval_classes)
    for det in dets:
        if det.label not in known:
            raise ValueError(f"detection label {det.label!r} not in registry")
    dets_by_class: dict[str, list[DetectionResult]] = {c: [] for c in eval_classes}
    for det in dets:
        dets_by_class[det.label].append(det)
    gts_by_class: dict[str, dict[str, list[tuple[Box, bool]]]] = {c: {} for c in eval_classes}
    for image_id, triples in gts.items():
        for box, label, diff in triples:
            if label in gts_by_class:
                gts_by_class[label].setdefault(image_id, []).append((box, diff))

    per_class: dict[str, float] = {}
    notes: list[str] = [
        "novel AP at stage 1 scores zero-shot text-row detections when enabled"
    ]
    skipped: list[str] = []
    for cls in eval_classes:
        if not gts_by_class[cls]:
            skipped.append(cls)
            continue
        per_class[cls] = voc07_ap(dets_by_class[cls], gts_by_class[cls],
                                  iou_thr=iou_thr, mode=ap_mode)
    if skipped:
        log.warning("classes with no test ground truth excluded: %s", skipped)
        notes.append("excluded (no ground truth): " + ",".join(skipped))

    def _mean(names):
        vals = [per_class[n] for n in names if n in per_class]
        return float(np.mean(vals)) if vals else 0.0

    return APReport(
        stage=stage,
        per_class_ap=per_class,
        map_base=_mean(registry.base_names),
        map_novel=_mean(registry.novel_names),
        map_all=_mean(eval_classes),
        notes=tuple(notes),
    )


def write_detections(dets: list[DetectionResult], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in sorted(dets, key=lambda d: (d.image_id, d.label, -d.score)):
            fh.write(f"{d.image_id}\t{d.label}\t{d.score:.6f}\t"
                     f"{d.box[0]:.2f}\t{d.box[1]:.2f}\t{d.box[2]:.2f}\t{d.box[3]:.2f}\n")
