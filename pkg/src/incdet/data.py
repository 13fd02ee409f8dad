"""Dataset ingestion: VOC-format IO, synthetic generation, task filtering.

Everything downstream of this module consumes the same VOC-style layout:
Annotations/*.xml, JPEGImages/*.jpg, ImageSets/Main/<split>.txt.  The
synthetic generator persists through the same layout so both paths are
format-identical.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from .evaluation import iou
from .registry import VOC_CLASSES, TaskSpec


@dataclass(frozen=True)
class AnnotatedBox:
    x1: float
    y1: float
    x2: float
    y2: float
    label: str
    difficult: bool = False

    def geometry(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int
    boxes: tuple[AnnotatedBox, ...]
    pixel_source: str | None = None  # path to the image payload


@dataclass(frozen=True)
class DatasetView:
    records: tuple[ImageRecord, ...]
    split: str
    task: TaskSpec | None = None


class _PixelCache:
    """Tiny read-through cache for decoded image payloads."""

    def __init__(self, capacity: int = 512):
        self.capacity = capacity
        self._store: dict[str, np.ndarray] = {}

    def get(self, record: ImageRecord) -> np.ndarray:
        if record.pixel_source is None:
            raise ValueError(f"record {record.image_id} has no pixel source")
        key = record.pixel_source
        if key not in self._store:
            img = cv2.imread(key, cv2.IMREAD_COLOR)
            if img is None:
                raise FileNotFoundError(f"cannot read image {key}")
            if len(self._store) >= self.capacity:
                self._store.pop(next(iter(self._store)))
            self._store[key] = img
        return self._store[key]


_cache = _PixelCache()


def load_pixels(record: ImageRecord) -> np.ndarray:
    """Decoded BGR uint8 pixels for a record."""
    return _cache.get(record)


def load_voc(root_path: str | Path, split: str,
             known_labels: tuple[str, ...] = VOC_CLASSES) -> DatasetView:
    """Read a VOC-layout dataset split into an unfiltered view.

    VOC XML stores 1-based inclusive pixel coordinates; they are converted
    to the internal 0-based float convention by subtracting 1 from
    xmin/ymin.
    """
    root = Path(root_path)
    split_file = root / "ImageSets" / "Main" / f"{split}.txt"
    if not split_file.exists():
        raise FileNotFoundError(f"missing split list {split_file}")
    ids = [line.strip() for line in split_file.read_text().splitlines() if line.strip()]
    known = set(known_labels)
    records = []
    for image_id in ids:
        ann = root / "Annotations" / f"{image_id}.xml"
        if not ann.exists():
            raise FileNotFoundError(f"missing annotation for id {image_id}: {ann}")
        try:
            tree = ET.parse(ann)
        except ET.ParseError as exc:
            raise ValueError(f"malformed annotation {ann}: {exc}") from exc
        node = tree.getroot()
        size = node.find("size")
        width = int(size.findtext("width"))
        height = int(size.findtext("height"))
        boxes = []
        for obj in node.findall("object"):
            label = obj.findtext("name").strip().lower()
            if label not in known:
                raise ValueError(f"unknown label {label!r} in {ann}")
            difficult = obj.findtext("difficult", "0").strip() == "1"
            bb = obj.find("bndbox")
            x1 = float(bb.findtext("xmin")) - 1.0
            y1 = float(bb.findtext("ymin")) - 1.0
            x2 = float(bb.findtext("xmax"))
            y2 = float(bb.findtext("ymax"))
            x1 = min(max(x1, 0.0), width - 1.0)
            y1 = min(max(y1, 0.0), height - 1.0)
            x2 = min(max(x2, x1 + 1.0), float(width))
            y2 = min(max(y2, y1 + 1.0), float(height))
            boxes.append(AnnotatedBox(x1, y1, x2, y2, label, difficult))
        image_path = root / "JPEGImages" / f"{image_id}.jpg"
        records.append(ImageRecord(
            image_id=image_id, width=width, height=height,
            boxes=tuple(boxes),
            pixel_source=str(image_path) if image_path.exists() else None,
        ))
    return DatasetView(records=tuple(records), split=split)


def save_voc(view: DatasetView, root_path: str | Path, split: str,
             pixels: dict[str, np.ndarray] | None = None) -> None:
    """Persist a view in VOC layout (XML + split list, images if given)."""
    root = Path(root_path)
    (root / "Annotations").mkdir(parents=True, exist_ok=True)
    (root / "JPEGImages").mkdir(parents=True, exist_ok=True)
    (root / "ImageSets" / "Main").mkdir(parents=True, exist_ok=True)
    ids = []
    for rec in view.records:
        ids.append(rec.image_id)
        node = ET.Element("annotation")
        ET.SubElement(node, "filename").text = f"{rec.image_id}.jpg"
        size = ET.SubElement(node, "size")
        ET.SubElement(size, "width").text = str(rec.width)
        ET.SubElement(size, "height").text = str(rec.height)
        ET.SubElement(size, "depth").text = "3"
        for box in rec.boxes:
            obj = ET.SubElement(node, "object")
            ET.SubElement(obj, "name").text = box.label
            ET.SubElement(obj, "difficult").text = "1" if box.difficult else "0"
            bb = ET.SubElement(obj, "bndbox")
            # inverse of the parse-time 1-based conversion
            ET.SubElement(bb, "xmin").text = f"{box.x1 + 1.0:.0f}"
            ET.SubElement(bb, "ymin").text = f"{box.y1 + 1.0:.0f}"
            ET.SubElement(bb, "xmax").text = f"{box.x2:.0f}"
            ET.SubElement(bb, "ymax").text = f"{box.y2:.0f}"
        tree = ET.ElementTree(node)
        ET.indent(tree)
        tree.write(root / "Annotations" / f"{rec.image_id}.xml")
        if pixels is not None and rec.image_id in pixels:
            cv2.imwrite(str(root / "JPEGImages" / f"{rec.image_id}.png"), pixels[rec.image_id])
            # keep the canonical .jpg name expected by load_voc
            png = root / "JPEGImages" / f"{rec.image_id}.png"
            png.rename(root / "JPEGImages" / f"{rec.image_id}.jpg")
    (root / "ImageSets" / "Main" / f"{split}.txt").write_text(
        "\n".join(ids) + ("\n" if ids else ""))


def filter_for_task(view: DatasetView, task: TaskSpec) -> DatasetView:
    """Apply the per-task visibility filter.

    An image is kept iff it has at least one box in the task's visible
    classes; within kept images, boxes outside the visible set are dropped.
    This drop is the data ambiguity: real objects silently become
    background for the current stage.
    """
    visible = set(task.visible_classes)
    kept = []
    for rec in view.records:
        boxes = tuple(b for b in rec.boxes if b.label in visible)
        if boxes:
            kept.append(replace(rec, boxes=boxes))
    return DatasetView(records=tuple(kept), split=view.split, task=task)


# ---------------------------------------------------------------------------
# synthetic desk-scale dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapeRecipe:
    shape: str  # circle | square | triangle | star | cross | ring | hexagon | crescent
    color: tuple[int, int, int]  # BGR


# Leaf classes grouped under parent names so broad-class runs are
# meaningful at desk scale.  Colors are far apart so the stub oracle can
# recover the class from a crop.
SYNTH_RECIPES: dict[str, ShapeRecipe] = {
    "circle":   ShapeRecipe("circle",   (0, 0, 255)),
    "square":   ShapeRecipe("square",   (255, 0, 0)),
    "triangle": ShapeRecipe("triangle", (0, 255, 0)),
    "star":     ShapeRecipe("star",     (0, 255, 255)),
    "cross":    ShapeRecipe("cross",    (255, 0, 255)),
    "ring":     ShapeRecipe("ring",     (255, 255, 0)),
    "hexagon":  ShapeRecipe("hexagon",  (0, 0, 0)),
    "crescent": ShapeRecipe("crescent", (128, 128, 0)),
}

SYNTH_PARENTS: dict[str, list[str]] = {
    "polygon": ["square", "hexagon"],
    "round": ["circle", "crescent"],
}

SYNTH_BASE = ("circle", "square", "triangle", "star", "cross", "ring")
SYNTH_NOVEL = ("hexagon", "crescent")
SYNTH_BROAD = ("polygon", "round")

SYNTH_BACKGROUND = (235, 235, 235)


@dataclass(frozen=True)
class SyntheticConfig:
    num_images: int = 200
    image_size: int = 96
    boxes_per_image: int = 3
    seed: int = 7
    min_shape: int = 26
    max_shape: int = 52
    classes: tuple[str, ...] = SYNTH_BASE + SYNTH_NOVEL
    max_gt_iou: float = 0.3
    noise_sigma: float = 0.0
    color_jitter: int = 0  # per-instance uniform channel offset, +/- this
    class_weights: tuple[float, ...] | None = None  # sampling weights per class
    min_separation: float = 0.0  # minimum pixel gap between shape boxes
    require_presence: tuple[str, ...] | None = None  # first shape drawn from these


def _draw_shape(canvas: np.ndarray, recipe: ShapeRecipe,
                cx: int, cy: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one shape, return its binary mask."""
    mask = np.zeros(canvas.shape[:2], dtype=np.uint8)
    h = size // 2
    if recipe.shape == "circle":
        cv2.circle(mask, (cx, cy), h, 255, -1)
    elif recipe.shape == "square":
        cv2.rectangle(mask, (cx - h, cy - h), (cx + h, cy + h), 255, -1)
    elif recipe.shape == "triangle":
        pts = np.array([[cx, cy - h], [cx - h, cy + h], [cx + h, cy + h]])
        cv2.fillPoly(mask, [pts], 255)
    elif recipe.shape == "star":
        angles = np.linspace(-np.pi / 2, 1.5 * np.pi, 10, endpoint=False)
        radii = np.where(np.arange(10) % 2 == 0, h, h * 0.45)
        pts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
        cv2.fillPoly(mask, [pts.astype(np.int32)], 255)
    elif recipe.shape == "cross":
        w = max(3, h // 2)
        cv2.rectangle(mask, (cx - w, cy - h), (cx + w, cy + h), 255, -1)
        cv2.rectangle(mask, (cx - h, cy - w), (cx + h, cy + w), 255, -1)
    elif recipe.shape == "ring":
        cv2.circle(mask, (cx, cy), h, 255, -1)
        cv2.circle(mask, (cx, cy), max(2, h // 2), 0, -1)
    elif recipe.shape == "hexagon":
        angles = np.linspace(0, 2 * np.pi, 6, endpoint=False)
        pts = np.stack([cx + h * np.cos(angles), cy + h * np.sin(angles)], axis=1)
        cv2.fillPoly(mask, [pts.astype(np.int32)], 255)
    elif recipe.shape == "crescent":
        cv2.circle(mask, (cx, cy), h, 255, -1)
        cv2.circle(mask, (cx + h // 2, cy - h // 3), h, 0, -1)
    else:
        raise ValueError(f"unknown shape {recipe.shape!r}")
    canvas[mask > 0] = recipe.color
    return mask


def generate_synthetic(cfg: SyntheticConfig) -> tuple[DatasetView, dict[str, np.ndarray]]:
    """Render a deterministic shape dataset.

    Returns the annotated view plus the pixel buffers keyed by image id.
    Shapes within one image never overlap above ``max_gt_iou`` IoU.
    """
    if len(cfg.classes) < 2:
        raise ValueError("need at least 2 classes")
    if cfg.require_presence is not None:
        unknown = set(cfg.require_presence) - set(cfg.classes)
        if unknown:
            raise ValueError(f"require_presence not in classes: {sorted(unknown)}")
    rng = np.random.default_rng(cfg.seed)

    def separated(a, b):
        gap = cfg.min_separation
        return (a[2] + gap <= b[0] or b[2] + gap <= a[0]
                or a[3] + gap <= b[1] or b[3] + gap <= a[1])
    records = []
    pixels: dict[str, np.ndarray] = {}
    size = cfg.image_size
    if cfg.class_weights is not None:
        if len(cfg.class_weights) != len(cfg.classes):
            raise ValueError("class_weights length must match classes")
        weights = np.asarray(cfg.class_weights, dtype=np.float64)
        weights = weights / weights.sum()
    else:
        weights = None
    for i in range(cfg.num_images):
        image_id = f"syn{i:05d}"
        canvas = np.full((size, size, 3), SYNTH_BACKGROUND, dtype=np.uint8)
        n_boxes = int(rng.integers(1, cfg.boxes_per_image + 1))
        boxes: list[AnnotatedBox] = []
        for slot in range(n_boxes):
            placed = False
            for _attempt in range(60):
                if slot == 0 and cfg.require_presence is not None:
                    cls = str(rng.choice(list(cfg.require_presence)))
                else:
                    cls = str(rng.choice(list(cfg.classes), p=weights))
                s = int(rng.integers(cfg.min_shape, cfg.max_shape + 1))
                half = s // 2
                cx = int(rng.integers(half + 1, size - half - 1))
                cy = int(rng.integers(half + 1, size - half - 1))
                recipe = SYNTH_RECIPES[cls]
                if cfg.color_jitter > 0:
                    j = cfg.color_jitter
                    offs = rng.integers(-j, j + 1, size=3)
                    color = tuple(int(np.clip(c + o, 0, 255))
                                  for c, o in zip(recipe.color, offs))
                    recipe = ShapeRecipe(recipe.shape, color)
                mask = np.zeros((size, size), dtype=np.uint8)
                probe = np.zeros((size, size, 3), dtype=np.uint8)
                mask = _draw_shape(probe, recipe, cx, cy, s, rng)
                ys, xs = np.nonzero(mask)
                cand = (float(xs.min()), float(ys.min()),
                        float(xs.max() + 1), float(ys.max() + 1))
                ok = all(iou(cand, b.geometry()) < cfg.max_gt_iou for b in boxes)
                if ok and cfg.min_separation > 0:
                    ok = all(separated(cand, b.geometry()) for b in boxes)
                if ok:
                    _draw_shape(canvas, recipe, cx, cy, s, rng)
                    boxes.append(AnnotatedBox(*cand, label=cls))
                    placed = True
                    break
            if not placed and not boxes:
                raise RuntimeError(f"unsatisfiable layout for image {image_id}")
        if cfg.noise_sigma > 0:
            noise = rng.normal(0.0, cfg.noise_sigma, canvas.shape)
            canvas = np.clip(canvas.astype(np.float64) + noise, 0, 255).astype(np.uint8)
        records.append(ImageRecord(image_id=image_id, width=size, height=size,
                                   boxes=tuple(boxes)))
        pixels[image_id] = canvas
    return DatasetView(records=tuple(records), split="trainval"), pixels


def prepare_synthetic_dataset(root_path: str | Path, cfg: SyntheticConfig,
                              test_fraction: float = 0.3) -> None:
    """Generate and persist the synthetic set as VOC layout.

    Deterministically splits the generated images into trainval/test by
    index (every k-th image goes to test).
    """
    view, pixels = generate_synthetic(cfg)
    stride = max(2, round(1.0 / test_fraction))
    train_recs = tuple(r for i, r in enumerate(view.records) if i % stride != 0)
    test_recs = tuple(r for i, r in enumerate(view.records) if i % stride == 0)
    save_voc(DatasetView(train_recs, "trainval"), root_path, "trainval", pixels)
    save_voc(DatasetView(test_recs, "test"), root_path, "test", pixels)
