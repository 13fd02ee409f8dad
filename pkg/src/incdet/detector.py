"""Two-stage detector adapter with a cosine-similarity classification head.

The desk-scale trunk is a tiny trainable pipeline over handcrafted crop
descriptors: descriptor -> tanh linear trunk -> linear projection ->
L2-normalized visual embedding, classified by cosine against the text
bank plus one learned background row.  All math is double-precision
numpy with analytic gradients, so runs are bit-deterministic and the
finite-difference checks in the test suite are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .evaluation import DetectionResult, nms
from .text_space import TextEmbeddingBank

CROP_SIDE = 8
FEAT_DIM = CROP_SIDE * CROP_SIDE * 3
HIDDEN_DIM = 64


@dataclass(frozen=True)
class Proposal:
    box: tuple[float, float, float, float]
    objectness: float = 0.0
    roi_feature: np.ndarray | None = None


@dataclass(frozen=True)
class DistillConfig:
    weight: float = 0.2
    targets: tuple[str, ...] = ("backbone", "roi")


@dataclass
class DetectorState:
    w_trunk: np.ndarray   # (H, F)
    b_trunk: np.ndarray   # (H,)
    w_proj: np.ndarray    # (D, H)
    b_proj: np.ndarray    # (D,)
    w_reg: np.ndarray     # (4, H)
    b_reg: np.ndarray     # (4,)
    bg_embed: np.ndarray  # (D,), kept unit-norm between updates
    logit_scale: float = 100.0

    def params(self) -> dict[str, np.ndarray]:
        return {
            "w_trunk": self.w_trunk, "b_trunk": self.b_trunk,
            "w_proj": self.w_proj, "b_proj": self.b_proj,
            "w_reg": self.w_reg, "b_reg": self.b_reg,
            "bg_embed": self.bg_embed,
        }

    def copy(self) -> "DetectorState":
        return DetectorState(
            **{k: v.copy() for k, v in self.params().items()},
            logit_scale=self.logit_scale,
        )


def init_detector_state(seed: int, embed_dim: int,
                        feat_dim: int = FEAT_DIM,
                        hidden_dim: int = HIDDEN_DIM,
                        logit_scale: float = 100.0) -> DetectorState:
    rng = np.random.default_rng(seed)
    bg = rng.standard_normal(embed_dim)
    return DetectorState(
        w_trunk=rng.standard_normal((hidden_dim, feat_dim)) / np.sqrt(feat_dim),
        b_trunk=np.zeros(hidden_dim),
        w_proj=rng.standard_normal((embed_dim, hidden_dim)) / np.sqrt(hidden_dim),
        b_proj=np.zeros(embed_dim),
        w_reg=rng.standard_normal((4, hidden_dim)) * 0.01,
        b_reg=np.zeros(4),
        bg_embed=bg / np.linalg.norm(bg),
        logit_scale=logit_scale,
    )


# ---------------------------------------------------------------------------
# crop descriptors and box parameterization
# ---------------------------------------------------------------------------

def crop_descriptor(image: np.ndarray, box) -> np.ndarray:
    """Fixed descriptor: clamp, downsample to 8x8 RGB, scale to [-1, 1]."""
    h, w = image.shape[:2]
    x1 = int(np.clip(np.floor(box[0]), 0, w - 1))
    y1 = int(np.clip(np.floor(box[1]), 0, h - 1))
    x2 = int(np.clip(np.ceil(box[2]), x1 + 1, w))
    y2 = int(np.clip(np.ceil(box[3]), y1 + 1, h))
    crop = image[y1:y2, x1:x2]
    small = cv2.resize(crop, (CROP_SIDE, CROP_SIDE), interpolation=cv2.INTER_AREA)
    return (small.astype(np.float64) / 255.0 - 0.5).reshape(-1) * 2.0


def descriptors(image: np.ndarray, boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, FEAT_DIM))
    return np.stack([crop_descriptor(image, b) for b in boxes])


def encode_deltas(prop_boxes: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    prop_boxes = np.asarray(prop_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    pw = prop_boxes[:, 2] - prop_boxes[:, 0]
    ph = prop_boxes[:, 3] - prop_boxes[:, 1]
    px = prop_boxes[:, 0] + pw / 2
    py = prop_boxes[:, 1] + ph / 2
    gw = gt_boxes[:, 2] - gt_boxes[:, 0]
    gh = gt_boxes[:, 3] - gt_boxes[:, 1]
    gx = gt_boxes[:, 0] + gw / 2
    gy = gt_boxes[:, 1] + gh / 2
    return np.stack([(gx - px) / pw, (gy - py) / ph,
                     np.log(gw / pw), np.log(gh / ph)], axis=1)


def decode_deltas(boxes: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    pw = boxes[:, 2] - boxes[:, 0]
    ph = boxes[:, 3] - boxes[:, 1]
    px = boxes[:, 0] + pw / 2
    py = boxes[:, 1] + ph / 2
    cx = px + deltas[:, 0] * pw
    cy = py + deltas[:, 1] * ph
    w = pw * np.exp(np.clip(deltas[:, 2], -2.0, 2.0))
    h = ph * np.exp(np.clip(deltas[:, 3], -2.0, 2.0))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def build_anchors(width: int, height: int,
                  scales=(20, 32, 48), stride: int = 8) -> np.ndarray:
    centers_x = np.arange(stride // 2, width, stride, dtype=np.float64)
    centers_y = np.arange(stride // 2, height, stride, dtype=np.float64)
    anchors = []
    for s in scales:
        half = s / 2.0
        for cy in centers_y:
            for cx in centers_x:
                anchors.append((max(0.0, cx - half), max(0.0, cy - half),
                                min(float(width), cx + half),
                                min(float(height), cy + half)))
    arr = np.array(anchors)
    good = (arr[:, 2] - arr[:, 0] >= 4) & (arr[:, 3] - arr[:, 1] >= 4)
    return arr[good]


# ---------------------------------------------------------------------------
# forward / loss / gradients
# ---------------------------------------------------------------------------

def forward_features(state: DetectorState, feats: np.ndarray):
    """Return (Z, U, E): trunk output, pre-norm projection, unit embedding."""
    feats = np.asarray(feats, dtype=np.float64)
    z = np.tanh(feats @ state.w_trunk.T + state.b_trunk)
    u = z @ state.w_proj.T + state.b_proj
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm projection output cannot be normalized")
    return z, u, u / norms


def project_roi(state: DetectorState, roi_feature: np.ndarray) -> np.ndarray:
    """Unit visual embedding for one descriptor (or a batch of them)."""
    single = np.asarray(roi_feature).ndim == 1
    feats = np.atleast_2d(np.asarray(roi_feature, dtype=np.float64))
    if feats.shape[1] != state.w_trunk.shape[1]:
        raise ValueError("descriptor dimension mismatch")
    _, _, e = forward_features(state, feats)
    return e[0] if single else e

def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def head_logits(state: DetectorState, bank: TextEmbeddingBank,
                embeds: np.ndarray) -> np.ndarray:
    """Cosine logits over bank rows plus the learned background row."""
    bg = state.bg_embed / np.linalg.norm(state.bg_embed)
    sims = np.concatenate([embeds @ bank.rows.T, (embeds @ bg)[..., None]], axis=-1)
    return state.logit_scale * sims


def classify_cosine(visual: np.ndarray, bank: TextEmbeddingBank,
                    state: DetectorState) -> np.ndarray:
    """Probabilities over bank rows + background for one unit embedding."""
    visual = np.asarray(visual, dtype=np.float64)
    if visual.shape[-1] != bank.dim:
        raise ValueError("embedding dimension mismatch")
    return _softmax(head_logits(state, bank, visual))


SMOOTH_L1_BETA = 0.1


def _smooth_l1(x: np.ndarray, beta: float = SMOOTH_L1_BETA):
    ax = np.abs(x)
    loss = np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)
    grad = np.clip(x / beta, -1.0, 1.0)
    return loss, grad


@dataclass
class TrainBatch:
    feats: np.ndarray        # (N, F)
    labels: np.ndarray       # (N,) target row index; background = n_rows
    reg_mask: np.ndarray     # (N,) bool: has a real ground-truth box target
    reg_targets: np.ndarray  # (N, 4) encoded deltas (zeros where unmasked)
    is_pseudo: np.ndarray    # (N,) bool: classification-only pseudo target
    boxes: np.ndarray | None = None  # (N, 4) proposal geometry, for mining


def _loss_forward(state: DetectorState, bank: TextEmbeddingBank,
                  batch: TrainBatch, distill: DistillConfig | None,
                  teacher: tuple[np.ndarray, np.ndarray] | None):
    n = batch.feats.shape[0]
    n_rows = bank.rows.shape[0]
    if np.any(batch.labels > n_rows) or np.any(batch.labels < 0):
        raise ValueError("target label outside bank + background")
    z, u, e = forward_features(state, batch.feats)
    logits = head_logits(state, bank, e)
    probs = _softmax(logits)
    cls_loss = float(-np.mean(np.log(np.maximum(
        probs[np.arange(n), batch.labels], 1e-300))))

    reg_pred = z @ state.w_reg.T + state.b_reg
    m = int(batch.reg_mask.sum())
    if m > 0:
        diff = reg_pred[batch.reg_mask] - batch.reg_targets[batch.reg_mask]
        l1, l1_grad = _smooth_l1(diff)
        reg_loss = float(l1.sum() / (4 * m))
    else:
        l1_grad = None
        reg_loss = 0.0

    dist_loss = 0.0
    if distill is not None and teacher is not None and distill.weight > 0:
        zt, et = teacher
        if "backbone" in distill.targets:
            dist_loss += float(np.mean((z - zt) ** 2))
        if "roi" in distill.targets:
            dist_loss += float(np.mean((e - et) ** 2))
        dist_loss *= distill.weight

    total = cls_loss + reg_loss + dist_loss
    components = {"cls": cls_loss, "reg": reg_loss, "distill": dist_loss}
    cache = (z, u, e, probs, reg_pred, l1_grad, m)
    return total, components, cache


def detection_loss(state: DetectorState, bank: TextEmbeddingBank,
                   batch: TrainBatch, distill: DistillConfig | None = None,
                   teacher: tuple[np.ndarray, np.ndarray] | None = None):
    """Scalar training loss plus per-component values.

    Pseudo-labeled rows contribute classification loss only (their
    reg_mask is required false); the total is the exact sum of the
    components.
    """
    if np.any(batch.is_pseudo & batch.reg_mask):
        raise ValueError("pseudo targets must not carry regression targets")
    total, components, _ = _loss_forward(state, bank, batch, distill, teacher)
    return total, components


def loss_and_grads(state: DetectorState, bank: TextEmbeddingBank,
                   batch: TrainBatch, distill: DistillConfig | None = None,
                   teacher: tuple[np.ndarray, np.ndarray] | None = None):
    total, components, cache = _loss_forward(state, bank, batch, distill, teacher)
    z, u, e, probs, reg_pred, l1_grad, m = cache
    n = batch.feats.shape[0]
    n_rows = bank.rows.shape[0]
    s = state.logit_scale
    bg_norm = float(np.linalg.norm(state.bg_embed))
    bg_hat = state.bg_embed / bg_norm

    g_logits = probs.copy()
    g_logits[np.arange(n), batch.labels] -= 1.0
    g_logits /= n

    g_e = s * (g_logits[:, :n_rows] @ bank.rows
               + g_logits[:, n_rows:] * bg_hat)
    g_bg_hat = s * (g_logits[:, n_rows] @ e)
    g_bg = (g_bg_hat - (g_bg_hat @ bg_hat) * bg_hat) / bg_norm

    g_z = np.zeros_like(z)
    g_reg = np.zeros_like(reg_pred)
    if m > 0:
        g_reg[batch.reg_mask] = l1_grad / (4 * m)
        g_z += g_reg @ state.w_reg

    if distill is not None and teacher is not None and distill.weight > 0:
        zt, et = teacher
        if "backbone" in distill.targets:
            g_z += distill.weight * 2.0 * (z - zt) / z.size
        if "roi" in distill.targets:
            g_e = g_e + distill.weight * 2.0 * (e - et) / e.size

    norms = np.linalg.norm(u, axis=1, keepdims=True)
    g_u = (g_e - (g_e * e).sum(axis=1, keepdims=True) * e) / norms

    grads = {
        "w_proj": g_u.T @ z,
        "b_proj": g_u.sum(axis=0),
        "w_reg": g_reg.T @ z,
        "b_reg": g_reg.sum(axis=0),
        "bg_embed": g_bg,
    }
    g_z += g_u @ state.w_proj
    g_a = g_z * (1.0 - z * z)
    grads["w_trunk"] = g_a.T @ batch.feats
    grads["b_trunk"] = g_a.sum(axis=0)
    return total, components, grads


def distill_losses(student: dict[str, np.ndarray],
                   teacher: dict[str, np.ndarray],
                   config: DistillConfig) -> float:
    """Weighted mean-squared feature divergence over configured targets."""
    if config.weight == 0.0:
        return 0.0
    total = 0.0
    for target in config.targets:
        a, b = student[target], teacher[target]
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch for distill target {target!r}")
        total += float(np.mean((a - b) ** 2))
    return config.weight * total


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def infer(image: np.ndarray, bank: TextEmbeddingBank, state: DetectorState,
          image_id: str = "", score_threshold: float = 0.05,
          nms_iou: float = 0.5, anchors: np.ndarray | None = None,
          emit_names: set[str] | None = None,
          max_per_image: int = 50) -> list[DetectionResult]:
    """Anchor-grid inference: classify, refine, threshold, per-class NMS.

    Background-argmax proposals and extra-name rows are discarded.  The
    pseudo-annotation miner never runs here.
    """
    h, w = image.shape[:2]
    if anchors is None:
        anchors = build_anchors(w, h)
    if len(anchors) == 0:
        return []
    feats = descriptors(image, anchors)
    z, _, e = forward_features(state, feats)
    probs = _softmax(head_logits(state, bank, e))
    n_rows = bank.rows.shape[0]
    best = probs[:, :n_rows + 1].argmax(axis=1)
    deltas = z @ state.w_reg.T + state.b_reg
    refined = decode_deltas(anchors, deltas)
    refined[:, [0, 2]] = np.clip(refined[:, [0, 2]], 0.0, float(w))
    refined[:, [1, 3]] = np.clip(refined[:, [1, 3]], 0.0, float(h))

    names = bank.all_names
    extra = set(bank.extra_names)
    per_class: dict[str, list[tuple[float, tuple]]] = {}
    for i in range(len(anchors)):
        c = int(best[i])
        if c == n_rows:
            continue  # background wins
        name = names[c]
        if name in extra:
            continue
        if emit_names is not None and name not in emit_names:
            continue
        score = float(probs[i, c])
        if score < score_threshold:
            continue
        box = tuple(refined[i])
        if box[2] - box[0] < 2.0 or box[3] - box[1] < 2.0:
            continue
        per_class.setdefault(name, []).append((score, box))

    results: list[DetectionResult] = []
    for name in sorted(per_class):
        items = per_class[name]
        boxes = [b for _, b in items]
        scores = [sc for sc, _ in items]
        keep = nms(boxes, scores, nms_iou)
        for k in keep:
            results.append(DetectionResult(image_id=image_id, label=name,
                                           score=scores[k], box=boxes[k]))
    results.sort(key=lambda d: -d.score)
    return results[:max_per_image]
