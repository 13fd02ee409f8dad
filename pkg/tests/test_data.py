from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from incdet.data import (SYNTH_BASE, SYNTH_NOVEL, SYNTH_PARENTS, SYNTH_RECIPES,
                         AnnotatedBox, DatasetView, ImageRecord,
                         SyntheticConfig, filter_for_task, generate_synthetic,
                         load_pixels, load_voc, prepare_synthetic_dataset,
                         save_voc)
from incdet.evaluation import iou
from incdet.registry import TaskSpec

_FIXTURE_XML = """<annotation>
  <filename>{img}.jpg</filename>
  <size><width>100</width><height>80</height><depth>3</depth></size>
  {objects}
</annotation>
"""

_OBJ = """<object>
    <name>{name}</name>
    <difficult>{difficult}</difficult>
    <bndbox><xmin>{x1}</xmin><ymin>{y1}</ymin><xmax>{x2}</xmax><ymax>{y2}</ymax></bndbox>
  </object>"""


def _write_fixture(root: Path):
    """Three hand-written VOC images: cow+sofa, sofa only, cow (difficult)."""
    (root / "Annotations").mkdir(parents=True)
    (root / "ImageSets" / "Main").mkdir(parents=True)
    objs = {
        "img1": [("cow", 0, 11, 21, 40, 60), ("sofa", 0, 1, 1, 30, 30)],
        "img2": [("sofa", 0, 5, 5, 50, 50)],
        "img3": [("cow", 1, 10, 10, 20, 20)],
    }
    for img, boxes in objs.items():
        body = "\n".join(_OBJ.format(name=n, difficult=d, x1=x1, y1=y1,
                                     x2=x2, y2=y2)
                         for n, d, x1, y1, x2, y2 in boxes)
        (root / "Annotations" / f"{img}.xml").write_text(
            _FIXTURE_XML.format(img=img, objects=body))
    (root / "ImageSets" / "Main" / "trainval.txt").write_text(
        "img1\nimg2\nimg3\n")
    (root / "ImageSets" / "Main" / "empty.txt").write_text("")


def test_load_voc_fixture(tmp_path):
    _write_fixture(tmp_path)
    view = load_voc(tmp_path, "trainval")
    assert len(view.records) == 3
    rec = view.records[0]
    assert rec.width == 100 and rec.height == 80
    # 1-based inclusive -> 0-based float: xmin 11 -> 10.0, xmax stays 40
    cow = rec.boxes[0]
    assert (cow.x1, cow.y1, cow.x2, cow.y2) == (10.0, 20.0, 40.0, 60.0)
    assert cow.label == "cow" and not cow.difficult
    assert view.records[2].boxes[0].difficult


def test_load_voc_empty_split(tmp_path):
    _write_fixture(tmp_path)
    assert load_voc(tmp_path, "empty").records == ()


def test_load_voc_unknown_label_named(tmp_path):
    _write_fixture(tmp_path)
    bad = tmp_path / "Annotations" / "img2.xml"
    bad.write_text(bad.read_text().replace("sofa", "waffle"))
    with pytest.raises(ValueError, match="waffle"):
        load_voc(tmp_path, "trainval")


def test_load_voc_missing_split_and_annotation(tmp_path):
    _write_fixture(tmp_path)
    with pytest.raises(FileNotFoundError, match="missing split"):
        load_voc(tmp_path, "nope")
    (tmp_path / "Annotations" / "img3.xml").unlink()
    with pytest.raises(FileNotFoundError, match="img3"):
        load_voc(tmp_path, "trainval")


def test_save_load_round_trip(tmp_path):
    _write_fixture(tmp_path / "src")
    view = load_voc(tmp_path / "src", "trainval")
    save_voc(view, tmp_path / "dst", "trainval")
    again = load_voc(tmp_path / "dst", "trainval")
    for a, b in zip(view.records, again.records):
        assert a.image_id == b.image_id
        assert a.boxes == b.boxes


def test_filter_for_task_ambiguity(tmp_path):
    _write_fixture(tmp_path)
    view = load_voc(tmp_path, "trainval")
    t1 = TaskSpec(task_id=1, visible_classes=("cow",),
                  label_space=("cow", "furniture"))
    out = filter_for_task(view, t1)
    # img2 (sofa only) removed; img1 keeps only the cow box
    ids = [r.image_id for r in out.records]
    assert ids == ["img1", "img3"]
    assert [b.label for b in out.records[0].boxes] == ["cow"]
    assert filter_for_task(DatasetView((), "trainval"), t1).records == ()


# -- synthetic ---------------------------------------------------------------

def test_synthetic_deterministic():
    cfg = SyntheticConfig(num_images=12, seed=7)
    v1, p1 = generate_synthetic(cfg)
    v2, p2 = generate_synthetic(cfg)
    assert v1.records == v2.records
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)


def test_synthetic_one_box_per_image():
    cfg = SyntheticConfig(num_images=10, boxes_per_image=1, seed=3)
    view, _ = generate_synthetic(cfg)
    assert all(len(r.boxes) == 1 for r in view.records)


def test_synthetic_low_overlap_brute_force():
    cfg = SyntheticConfig(num_images=30, seed=7)
    view, _ = generate_synthetic(cfg)
    for rec in view.records:
        geoms = [b.geometry() for b in rec.boxes]
        for i in range(len(geoms)):
            for j in range(i + 1, len(geoms)):
                assert iou(geoms[i], geoms[j]) < cfg.max_gt_iou


def test_synthetic_separation_and_presence():
    cfg = SyntheticConfig(num_images=40, seed=7, min_separation=4.0,
                          require_presence=SYNTH_BASE,
                          class_weights=(1,) * 6 + (0.4, 0.4))
    view, _ = generate_synthetic(cfg)
    base = set(SYNTH_BASE)
    for rec in view.records:
        assert any(b.label in base for b in rec.boxes)
        geoms = [b.geometry() for b in rec.boxes]
        for i in range(len(geoms)):
            for j in range(i + 1, len(geoms)):
                a, b = geoms[i], geoms[j]
                gap_x = max(a[0], b[0]) - min(a[2], b[2])
                gap_y = max(a[1], b[1]) - min(a[3], b[3])
                assert max(gap_x, gap_y) >= cfg.min_separation


def test_synthetic_bad_weights_and_presence():
    with pytest.raises(ValueError, match="class_weights"):
        generate_synthetic(SyntheticConfig(num_images=1, class_weights=(1.0,)))
    with pytest.raises(ValueError, match="require_presence"):
        generate_synthetic(SyntheticConfig(num_images=1,
                                           require_presence=("nonexistent",)))
    with pytest.raises(ValueError, match="classes"):
        generate_synthetic(SyntheticConfig(num_images=1, classes=("circle",)))


def test_synthetic_parent_plan_is_consistent():
    children = [c for kids in SYNTH_PARENTS.values() for c in kids]
    assert len(set(children)) == len(children)
    assert set(children) <= set(SYNTH_RECIPES)
    assert set(SYNTH_NOVEL) <= set(children)


def test_prepare_synthetic_round_trip(tmp_path):
    cfg = SyntheticConfig(num_images=20, seed=5)
    prepare_synthetic_dataset(tmp_path, cfg)
    known = SYNTH_BASE + SYNTH_NOVEL
    trainval = load_voc(tmp_path, "trainval", known_labels=known)
    test = load_voc(tmp_path, "test", known_labels=known)
    assert len(trainval.records) + len(test.records) == 20
    # pixels survive persistence losslessly (color-keyed oracle depends on it)
    view, pixels = generate_synthetic(cfg)
    rec = trainval.records[0]
    stored = load_pixels(rec)
    source = pixels[rec.image_id]
    assert np.array_equal(stored, source)


def test_load_pixels_missing_source():
    rec = ImageRecord("x", 10, 10, (), pixel_source=None)
    with pytest.raises(ValueError, match="pixel source"):
        load_pixels(rec)
