"""Two-stage training protocol.

Task 1: train the cosine head over base (+broad) rows, mine pseudo
annotations for unknown objects, sample the rehearsal buffer.
Task 2: warm up novel annotations against the broad rows while
accumulating broad/novel similarity, finalize the one-to-one mapping,
swap the broad rows for novel text rows, and keep training with feature
distillation from the frozen task-1 model plus rehearsal replay.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import detector as det
from . import miner as mining
from .data import DatasetView, ImageRecord, load_pixels
from .detector import DetectorState, DistillConfig, TrainBatch
from .evaluation import iou_matrix
from .miner import MinerConfig, PseudoStore
from .registry import IncrementalSchedule
from .text_space import (CategoryMapping, MappingAccumulator, PromptTemplate,
                         TextEmbeddingBank, build_text_bank, finalize_mapping,
                         random_bank, swap_embeddings)

log = logging.getLogger(__name__)

GRAD_CLIP_NORM = 1.0


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    lr_initial: float = 0.02
    lr_final: float = 0.0002
    momentum: float = 0.9
    warmup_iters: int = 100
    iters_per_task: int = 1000
    swap_after_fraction: float = 0.2
    distill: DistillConfig = field(default_factory=DistillConfig)
    rehearsal_per_class: int = 10
    rehearsal_fraction: float = 0.25  # 1 rehearsal : 3 new
    min_observations: int = 20
    seed: int = 0
    # balances the per-element MSE distillation term against the x100
    # cosine logits; the configured distill weight multiplies this
    distill_scale: float = 1.0
    negatives_per_image: int = 4
    jitters_per_gt: int = 2
    mining_candidates: int = 16
    logit_scale: float = 100.0
    extra_names: tuple[str, ...] = ()
    pseudo_to_rpn: bool = False  # pseudo boxes never feed proposal targets

    def __post_init__(self):
        if self.lr_final > self.lr_initial:
            raise ValueError("lr_final must be <= lr_initial")
        if not (0.0 < self.swap_after_fraction < 1.0):
            raise ValueError("swap_after_fraction must be in (0, 1)")


@dataclass(frozen=True)
class Toggles:
    """The three ablation switches (text alignment, broad+mapping, miner)."""
    text: bool = True
    broad: bool = True
    image: bool = True


@dataclass(frozen=True)
class RehearsalBuffer:
    per_class: dict[str, tuple[str, ...]]

    def image_ids(self) -> list[str]:
        ids: list[str] = []
        for cls in sorted(self.per_class):
            ids.extend(self.per_class[cls])
        return sorted(set(ids))


def lr_schedule(iteration: int, config: TrainConfig) -> float:
    """Linear warm-up to lr_initial, cosine decay to lr_final."""
    if iteration <= 0:
        return 0.0
    if iteration < config.warmup_iters:
        return config.lr_initial * iteration / config.warmup_iters
    span = max(1, config.iters_per_task - config.warmup_iters)
    t = min(1.0, (iteration - config.warmup_iters) / span)
    return config.lr_final + (config.lr_initial - config.lr_final) * 0.5 * (
        1.0 + math.cos(math.pi * t))


class _SGD:
    def __init__(self, state: DetectorState, momentum: float):
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in state.params().items()}

    def step(self, state: DetectorState, grads: dict[str, np.ndarray], lr: float):
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = GRAD_CLIP_NORM / total if total > GRAD_CLIP_NORM else 1.0
        params = state.params()
        for name, g in grads.items():
            v = self.velocity[name]
            v *= self.momentum
            v += g * scale
            params[name] -= lr * v
        # keep the background row unit-norm between updates
        state.bg_embed /= np.linalg.norm(state.bg_embed)


def make_training_bank(names, toggles: Toggles, oracle,
                       template: PromptTemplate, seed: int,
                       extra_names=()) -> TextEmbeddingBank:
    if toggles.text:
        return build_text_bank(names, template, oracle, extra_names=extra_names)
    return random_bank(names, oracle.dim, seed, extra_names=extra_names)


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------

def _random_box(rng: np.random.Generator, width: int, height: int,
                min_size: int = 20, max_size: int = 56):
    s = int(rng.integers(min_size, max_size + 1))
    sx = min(s, width - 2)
    sy = min(s, height - 2)
    x1 = float(rng.integers(0, max(1, width - sx)))
    y1 = float(rng.integers(0, max(1, height - sy)))
    return (x1, y1, x1 + sx, y1 + sy)


def _jitter_box(rng: np.random.Generator, box, width: int, height: int):
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    dx = float(rng.uniform(-0.15, 0.15)) * w
    dy = float(rng.uniform(-0.15, 0.15)) * h
    ds = float(rng.uniform(0.85, 1.2))
    cx, cy = (x1 + x2) / 2 + dx, (y1 + y2) / 2 + dy
    nw, nh = w * ds / 2, h * ds / 2
    nx1 = max(0.0, cx - nw)
    ny1 = max(0.0, cy - nh)
    nx2 = min(float(width), cx + nw)
    ny2 = min(float(height), cy + nh)
    if nx2 - nx1 < 2 or ny2 - ny1 < 2:
        return box
    return (nx1, ny1, nx2, ny2)


class _ImageSampler:
    """Builds per-image proposals + targets for one training step."""

    def __init__(self, cfg: TrainConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng

    def sample(self, record: ImageRecord, image: np.ndarray,
               target_index_for, pseudo_boxes=()):
        """Returns (boxes, labels, reg_mask, reg_targets, is_pseudo) lists.

        ``target_index_for(label, box, image)`` maps an annotation to its
        bank row index (or None to skip the box this step).
        """
        boxes, labels, reg_mask, reg_targets, is_pseudo = [], [], [], [], []
        gt_geoms = [b.geometry() for b in record.boxes if not b.difficult]
        gt_labels = [b.label for b in record.boxes if not b.difficult]
        for geom, label in zip(gt_geoms, gt_labels):
            idx = target_index_for(label, geom, image)
            if idx is None:
                continue
            candidates = [geom] + [
                _jitter_box(self.rng, geom, record.width, record.height)
                for _ in range(self.cfg.jitters_per_gt)]
            for cand in candidates:
                ov = float(iou_matrix([cand], [geom])[0, 0])
                if ov >= 0.5:
                    boxes.append(cand)
                    labels.append(idx)
                    reg_mask.append(True)
                    reg_targets.append(det.encode_deltas([cand], [geom])[0])
                    is_pseudo.append(False)
        # background negatives: low overlap with every visible box
        bg_found = 0
        for _ in range(self.cfg.negatives_per_image * 6):
            if bg_found >= self.cfg.negatives_per_image:
                break
            cand = _random_box(self.rng, record.width, record.height)
            if gt_geoms:
                ov = iou_matrix([cand], gt_geoms).max()
            else:
                ov = 0.0
            if ov < 0.3:
                boxes.append(cand)
                labels.append(-1)  # background, resolved by caller
                reg_mask.append(False)
                reg_targets.append(np.zeros(4))
                is_pseudo.append(False)
                bg_found += 1
        for pb in pseudo_boxes:
            idx = target_index_for(pb.label, pb.geometry(), image)
            if idx is None:
                continue
            boxes.append(pb.geometry())
            labels.append(idx)
            reg_mask.append(False)
            reg_targets.append(np.zeros(4))
            is_pseudo.append(True)
        return boxes, labels, reg_mask, reg_targets, is_pseudo


def _assemble_batch(parts, images, bank) -> TrainBatch | None:
    feats, labels, reg_mask, reg_targets, is_pseudo, geoms = [], [], [], [], [], []
    bg_index = len(bank.all_names)
    for (boxes, lbls, masks, regs, pseudo), image in zip(parts, images):
        if not boxes:
            continue
        feats.append(det.descriptors(image, boxes))
        labels.extend(bg_index if l == -1 else l for l in lbls)
        reg_mask.extend(masks)
        reg_targets.extend(regs)
        is_pseudo.extend(pseudo)
        geoms.extend(boxes)
    if not feats:
        return None
    return TrainBatch(
        feats=np.concatenate(feats, axis=0),
        labels=np.asarray(labels, dtype=np.int64),
        reg_mask=np.asarray(reg_mask, dtype=bool),
        reg_targets=np.asarray(reg_targets, dtype=np.float64).reshape(-1, 4),
        is_pseudo=np.asarray(is_pseudo, dtype=bool),
        boxes=np.asarray(geoms, dtype=np.float64).reshape(-1, 4),
    )


class _EpochCycler:
    """Deterministic shuffled cycling over record indices."""

    def __init__(self, n: int, seed: int):
        self.n = n
        self.seed = seed
        self.epoch = 0
        self.pos = 0
        self.order = self._shuffled()

    def _shuffled(self):
        rng = np.random.default_rng((self.seed, self.epoch))
        return rng.permutation(self.n)

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if self.pos >= self.n:
                self.epoch += 1
                self.pos = 0
                self.order = self._shuffled()
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out


# ---------------------------------------------------------------------------
# task 1
# ---------------------------------------------------------------------------

@dataclass
class TaskResult:
    state: DetectorState
    bank: TextEmbeddingBank
    store: PseudoStore
    rehearsal: RehearsalBuffer
    mapping: CategoryMapping | None
    metrics: list[str]


def _mine_image(record: ImageRecord, image: np.ndarray, state, bank,
                broad_names, label_space, oracle, miner_cfg: MinerConfig,
                store: PseudoStore, rng: np.random.Generator,
                train_cfg: TrainConfig, iteration: int):
    candidates = list(mining.propose_regions(
        image, max_proposals=train_cfg.mining_candidates))
    if not candidates:
        return
    feats = det.descriptors(image, candidates)
    _, _, embeds = det.forward_features(state, feats)
    probs = det.classify_cosine(embeds, bank, state)
    scored = [(candidates[i], float(probs[i, -1])) for i in range(len(candidates))]
    subset = mining.select_background_proposals(
        scored, miner_cfg.top_k_background, miner_cfg.min_side)
    boxes = mining.identify(subset, image, broad_names, label_space, oracle,
                            miner_cfg, source_iteration=iteration)
    if boxes:
        mining.commit(store, record.image_id, boxes, nms_iou=miner_cfg.nms_iou)


def _sample_rehearsal(view: DatasetView, base_names, per_class: int,
                      seed: int) -> RehearsalBuffer:
    buf: dict[str, tuple[str, ...]] = {}
    for cls in base_names:
        ids = sorted({r.image_id for r in view.records
                      if any(b.label == cls for b in r.boxes)})
        if not ids or per_class <= 0:
            buf[cls] = ()
            continue
        rng = np.random.default_rng((seed, zlib_crc(cls)))
        take = min(per_class, len(ids))
        picked = rng.choice(len(ids), size=take, replace=False)
        buf[cls] = tuple(ids[i] for i in sorted(picked))
    return RehearsalBuffer(per_class=buf)


def zlib_crc(text: str) -> int:
    import zlib
    return zlib.crc32(text.encode("utf-8"))


def run_task_1(schedule: IncrementalSchedule, train_view: DatasetView,
               oracle, train_cfg: TrainConfig, miner_cfg: MinerConfig,
               toggles: Toggles = Toggles(),
               template: PromptTemplate | None = None,
               pixels_fn=load_pixels) -> TaskResult:
    if not train_view.records:
        raise ValueError("empty task-1 training view")
    template = template or PromptTemplate()
    registry = schedule.registry
    # miner needs broad rows in the head even when the mapping protocol is
    # toggled off; the broad toggle governs the task-2 warm-up/swap
    use_broad_rows = toggles.broad or toggles.image
    names = registry.base_names + (registry.broad_names if use_broad_rows else ())
    bank = make_training_bank(names, toggles, oracle, template, train_cfg.seed,
                              extra_names=train_cfg.extra_names if toggles.text else ())
    state = det.init_detector_state(train_cfg.seed, embed_dim=bank.dim,
                                    logit_scale=train_cfg.logit_scale)
    optimizer = _SGD(state, train_cfg.momentum)
    rng = np.random.default_rng((train_cfg.seed, 1))
    cycler = _EpochCycler(len(train_view.records), (train_cfg.seed * 1000 + 11))
    sampler = _ImageSampler(train_cfg, rng)
    store = PseudoStore()
    mined: set[str] = set()
    metrics: list[str] = []
    miner_on = toggles.image and miner_cfg.enabled

    def target_index(label, _geom, _image):
        return bank.index(label)

    for it in range(train_cfg.iters_per_task):
        idxs = cycler.take(train_cfg.batch_size)
        parts, images = [], []
        for i in idxs:
            rec = train_view.records[i]
            image = pixels_fn(rec)
            if miner_on and rec.image_id not in mined and not store.has(rec.image_id):
                _mine_image(rec, image, state, bank, registry.broad_names,
                            bank.names, oracle, miner_cfg, store, rng,
                            train_cfg, it)
                mined.add(rec.image_id)
            pseudo = mining.sample_for_training(store, rec.image_id,
                                                train_cfg.seed) if miner_on else ()
            parts.append(sampler.sample(rec, image, target_index, pseudo))
            images.append(image)
        batch = _assemble_batch(parts, images, bank)
        if batch is None:
            continue
        lr = lr_schedule(it + 1, train_cfg)
        total, comps, grads = det.loss_and_grads(state, bank, batch)
        if not math.isfinite(total):
            raise RuntimeError(f"task-1 loss diverged at iter {it}: {total}")
        optimizer.step(state, grads, lr)
        if it % 50 == 0 or it == train_cfg.iters_per_task - 1:
            metrics.append(f"{it}\t{total:.6f}\t{comps['cls']:.6f}\t"
                           f"{comps['reg']:.6f}\t{comps['distill']:.6f}\t{lr:.6f}")

    rehearsal = _sample_rehearsal(train_view, registry.base_names,
                                  train_cfg.rehearsal_per_class, train_cfg.seed)
    return TaskResult(state=state, bank=bank, store=store, rehearsal=rehearsal,
                      mapping=None, metrics=metrics)


# ---------------------------------------------------------------------------
# task 2
# ---------------------------------------------------------------------------

def _bank_after_swap(bank: TextEmbeddingBank, mapping: CategoryMapping,
                     toggles: Toggles, template: PromptTemplate, oracle,
                     seed: int) -> TextEmbeddingBank:
    if toggles.text:
        return swap_embeddings(bank, mapping, template, oracle)
    # non-semantic variant: same in-place swap, rows from the random bank
    rows = bank.rows.copy()
    names = list(bank.all_names)
    from .oracle import _seeded_vector
    for novel, broad in mapping.pairs:
        idx = bank.index(broad)
        rows[idx] = _seeded_vector(f"{seed}:randrow:{novel}", bank.dim)
        names[idx] = novel
    rows.setflags(write=False)
    split = len(bank.names)
    return TextEmbeddingBank(names=tuple(names[:split]), rows=rows,
                             extra_names=tuple(names[split:]))


def run_task_2(task1: TaskResult, schedule: IncrementalSchedule,
               train_view: DatasetView, rehearsal_view: DatasetView,
               oracle, train_cfg: TrainConfig,
               toggles: Toggles = Toggles(),
               template: PromptTemplate | None = None,
               pixels_fn=load_pixels) -> TaskResult:
    """Second-stage training from the frozen task-1 model.

    ``train_view`` is the task-2 filtered view (novel annotations only);
    ``rehearsal_view`` is the task-1 filtered view the buffer indexes into.
    """
    if not train_view.records:
        raise ValueError("empty task-2 training view")
    template = template or PromptTemplate()
    registry = schedule.registry
    teacher_state = task1.state.copy()
    state = task1.state.copy()
    eff_distill = replace(train_cfg.distill,
                          weight=train_cfg.distill.weight * train_cfg.distill_scale)
    optimizer = _SGD(state, train_cfg.momentum)
    rng = np.random.default_rng((train_cfg.seed, 2))
    sampler = _ImageSampler(train_cfg, rng)
    metrics: list[str] = []

    warm_up = toggles.broad and len(registry.broad_names) > 0
    if warm_up:
        bank = task1.bank  # keep broad rows during the warm-up phase
    else:
        names = registry.base_names + registry.novel_names
        bank = make_training_bank(names, toggles, oracle, template,
                                  train_cfg.seed,
                                  extra_names=train_cfg.extra_names if toggles.text else ())

    broad_idx = [bank.index(b) for b in registry.broad_names] if warm_up else []
    acc = MappingAccumulator(registry.novel_names, registry.broad_names)
    mapping: CategoryMapping | None = None
    swap_iter = int(round(train_cfg.swap_after_fraction * train_cfg.iters_per_task))
    max_swap_iter = min(train_cfg.iters_per_task - 1, 2 * swap_iter)

    rehearsal_ids = set(task1.rehearsal.image_ids())
    rehearsal_records = [r for r in rehearsal_view.records
                         if r.image_id in rehearsal_ids]
    n_rehearsal = int(round(train_cfg.batch_size * train_cfg.rehearsal_fraction)) \
        if rehearsal_records else 0
    n_new = train_cfg.batch_size - n_rehearsal
    new_cycler = _EpochCycler(len(train_view.records), train_cfg.seed * 1000 + 21)
    reh_cycler = _EpochCycler(max(1, len(rehearsal_records)),
                              train_cfg.seed * 1000 + 31)

    def target_index(label, geom, image):
        if label in registry.novel_names and warm_up and mapping is None:
            # phase A: supervise toward the currently most similar broad row
            feat = det.crop_descriptor(image, geom)
            embed = det.project_roi(state, feat)
            sims = [float(bank.rows[j] @ embed) for j in broad_idx]
            j = int(np.argmax(sims))
            acc.add(label, embed, bank)
            return broad_idx[j]
        try:
            return bank.index(label)
        except ValueError:
            return None  # label has no row this phase (shouldn't happen)

    for it in range(train_cfg.iters_per_task):
        if warm_up and mapping is None and it >= swap_iter:
            counts_ok = all(acc.counts[i] >= train_cfg.min_observations
                            for i in range(len(registry.novel_names)))
            if counts_ok:
                mapping = finalize_mapping(acc, train_cfg.min_observations)
                bank = _bank_after_swap(bank, mapping, toggles, template,
                                        oracle, train_cfg.seed)
                log.info("embedding swap at iter %d: %s", it, mapping.pairs)
            elif it >= max_swap_iter:
                raise RuntimeError(
                    "category mapping never finalized: under-observed novel "
                    f"classes (counts {dict(zip(registry.novel_names, acc.counts.tolist()))})")

        new_idx = new_cycler.take(n_new)
        reh_idx = reh_cycler.take(n_rehearsal) if n_rehearsal else []
        parts, images = [], []
        for i in new_idx:
            rec = train_view.records[i]
            image = pixels_fn(rec)
            parts.append(sampler.sample(rec, image, target_index))
            images.append(image)
        for i in reh_idx:
            rec = rehearsal_records[i]
            image = pixels_fn(rec)
            parts.append(sampler.sample(rec, image, target_index))
            images.append(image)
        batch = _assemble_batch(parts, images, bank)
        if batch is None:
            continue
        zt, _, et = det.forward_features(teacher_state, batch.feats)
        lr = lr_schedule(it + 1, train_cfg)
        total, comps, grads = det.loss_and_grads(
            state, bank, batch, distill=eff_distill, teacher=(zt, et))
        if not math.isfinite(total):
            raise RuntimeError(f"task-2 loss diverged at iter {it}: {total}")
        optimizer.step(state, grads, lr)
        if it % 50 == 0 or it == train_cfg.iters_per_task - 1:
            metrics.append(f"{it}\t{total:.6f}\t{comps['cls']:.6f}\t"
                           f"{comps['reg']:.6f}\t{comps['distill']:.6f}\t{lr:.6f}")

    if warm_up and mapping is None:
        raise RuntimeError(
            "category mapping never finalized: under-observed novel classes "
            f"(counts {dict(zip(registry.novel_names, acc.counts.tolist()))})")

    return TaskResult(state=state, bank=bank, store=task1.store,
                      rehearsal=task1.rehearsal, mapping=mapping,
                      metrics=metrics)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, result: TaskResult, meta: dict) -> None:
    path = Path(path)
    arrays = {f"param_{k}": v for k, v in result.state.params().items()}
    arrays["bank_rows"] = result.bank.rows
    payload = {
        "version": CHECKPOINT_VERSION,
        "logit_scale": result.state.logit_scale,
        "bank_names": list(result.bank.names),
        "bank_extra_names": list(result.bank.extra_names),
        "mapping": [list(p) for p in result.mapping.pairs] if result.mapping else None,
        "meta": meta,
    }
    np.savez(path, **arrays)
    Path(str(path) + ".json").write_text(json.dumps(payload, sort_keys=True, indent=2))


def load_checkpoint(path: str | Path) -> tuple[DetectorState, TextEmbeddingBank,
                                               CategoryMapping | None, dict]:
    path = Path(path)
    payload = json.loads(Path(str(path) + ".json").read_text())
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload['version']}")
    with np.load(path if path.suffix == ".npz" else str(path) + ".npz") as data:
        params = {k[len("param_"):]: data[k] for k in data.files
                  if k.startswith("param_")}
        rows = data["bank_rows"]
    state = DetectorState(**params, logit_scale=payload["logit_scale"])
    rows = rows.copy()
    rows.setflags(write=False)
    bank = TextEmbeddingBank(names=tuple(payload["bank_names"]), rows=rows,
                             extra_names=tuple(payload["bank_extra_names"]))
    mapping = None
    if payload["mapping"]:
        mapping = CategoryMapping(pairs=tuple(tuple(p) for p in payload["mapping"]))
    return state, bank, mapping, payload["meta"]
