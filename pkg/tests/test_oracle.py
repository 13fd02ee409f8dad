import numpy as np
import pytest

from incdet.data import SYNTH_RECIPES, SyntheticConfig, generate_synthetic
from incdet.oracle import (OracleConfig, StubOracle, TextEmbeddingCache,
                           make_oracle, pad_and_clamp)


def _cos(a, b):
    return float(a @ b)


def test_stub_vectors_deterministic_across_instances(stub_oracle):
    other = StubOracle(stub_oracle.config)
    for name in ("circle", "square", "polygon", "round"):
        np.testing.assert_array_equal(stub_oracle.name_vector(name),
                                      other.name_vector(name))
        assert np.linalg.norm(stub_oracle.name_vector(name)) == pytest.approx(1.0)


def test_stub_seed_changes_vectors(stub_oracle):
    reseeded = StubOracle(
        OracleConfig(backend="stub", stub_seed=99,
                     stub_similarity_plan=stub_oracle.config.stub_similarity_plan,
                     stub_class_colors=stub_oracle.config.stub_class_colors))
    assert not np.allclose(stub_oracle.name_vector("circle"),
                           reseeded.name_vector("circle"))


def test_parent_closer_to_children_than_strangers(stub_oracle):
    plan = stub_oracle.config.stub_similarity_plan
    for parent, children in plan.items():
        p = stub_oracle.name_vector(parent)
        child_cos = min(_cos(p, stub_oracle.name_vector(c)) for c in children)
        others = [n for n in stub_oracle.config.stub_class_colors
                  if n not in children]
        stranger_cos = max(_cos(p, stub_oracle.name_vector(n)) for n in others)
        assert child_cos > stranger_cos
        # two independent 64-d children: the normalized mean sits near
        # cos 1/sqrt(2) from each
        assert child_cos > 0.5


def test_embed_texts_prompt_keyed(stub_oracle):
    rows = stub_oracle.embed_texts(["there is a circle in the scene",
                                    "there is a square in the scene"])
    np.testing.assert_allclose(rows[0], stub_oracle.name_vector("circle"))
    np.testing.assert_allclose(rows[1], stub_oracle.name_vector("square"))
    with pytest.raises(ValueError, match="empty prompt"):
        stub_oracle.embed_texts([])


def test_embed_texts_unknown_prompt_stable(stub_oracle):
    a = stub_oracle.embed_texts(["completely unrelated sentence"])
    b = stub_oracle.embed_texts(["completely unrelated sentence"])
    np.testing.assert_array_equal(a, b)
    assert np.linalg.norm(a[0]) == pytest.approx(1.0)


def test_pad_and_clamp_examples():
    # factor 1.0 leaves an interior box untouched
    assert pad_and_clamp((10, 10, 20, 20), 100, 100, 1.0) == (10, 10, 20, 20)
    # factor 2.0 doubles about the center and clamps to the image
    x1, y1, x2, y2 = pad_and_clamp((0, 0, 20, 20), 100, 100, 2.0)
    assert (x1, y1, x2, y2) == (0.0, 0.0, 30.0, 30.0)
    with pytest.raises(ValueError, match="zero-area"):
        pad_and_clamp((5, 5, 5, 9), 100, 100, 1.2)


def _planted_image(label, box=(20, 20, 60, 60)):
    recipe = SYNTH_RECIPES[label]
    img = np.full((96, 96, 3), 235, dtype=np.uint8)
    x1, y1, x2, y2 = box
    img[y1:y2, x1:x2] = recipe.color
    return img


def test_dominant_crop_matches_name_vector(stub_oracle):
    img = _planted_image("triangle")
    emb = stub_oracle.embed_image_region(img, (20, 20, 60, 60))
    cosines = {n: _cos(emb, stub_oracle.name_vector(n))
               for n in stub_oracle.config.stub_class_colors}
    assert max(cosines, key=cosines.get) == "triangle"
    assert cosines["triangle"] > 0.9


def test_background_crop_is_noise(stub_oracle):
    img = np.full((96, 96, 3), 235, dtype=np.uint8)
    emb = stub_oracle.embed_image_region(img, (20, 20, 60, 60))
    best = max(_cos(emb, stub_oracle.name_vector(n))
               for n in stub_oracle.config.stub_class_colors)
    assert best < 0.5


def test_score_region_softmax(stub_oracle):
    img = _planted_image("triangle")
    names = ["circle", "square", "triangle"]
    probs = stub_oracle.score_region(img, (20, 20, 60, 60), names)
    assert probs.shape == (3,)
    assert probs.sum() == pytest.approx(1.0)
    assert probs[2] > 0.9  # temperature 0.01 sharpens the correct class
    with pytest.raises(ValueError, match="at least 2"):
        stub_oracle.score_region(img, (20, 20, 60, 60), ["triangle"])


def test_score_region_on_generated_dataset(stub_oracle):
    view, pixels = generate_synthetic(SyntheticConfig(num_images=8, seed=7))
    names = sorted(stub_oracle.config.stub_class_colors)
    hits = total = 0
    for rec in view.records:
        for b in rec.boxes:
            probs = stub_oracle.score_region(pixels[rec.image_id],
                                             b.geometry(), names)
            hits += names[int(probs.argmax())] == b.label
            total += 1
    assert hits / total > 0.9


def test_text_embedding_cache_round_trip(tmp_path):
    path = tmp_path / "cache.tsv"
    cache = TextEmbeddingCache(path)
    vec = np.linspace(-1, 1, 8)
    assert cache.get("m", "p") is None
    cache.put("m", "p", vec)
    np.testing.assert_array_equal(cache.get("m", "p"), vec)
    # a fresh instance reads the persisted line back
    reloaded = TextEmbeddingCache(path)
    np.testing.assert_array_equal(reloaded.get("m", "p"), vec)
    assert reloaded.get("m", "other") is None
    assert reloaded.get("other-model", "p") is None


def test_make_oracle_dispatch(stub_oracle):
    assert isinstance(make_oracle(stub_oracle.config), StubOracle)
    with pytest.raises(ValueError, match="backend"):
        make_oracle(OracleConfig(backend="telepathy"))
