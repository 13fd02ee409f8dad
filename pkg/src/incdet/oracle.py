"""Vision-language embedding oracle: real backend plus deterministic stub.

The stub is the desk-scale workhorse: every class name maps to a seeded
unit vector, parent names map to the normalized mean of their children
(so a child crop ranks its parent high), and image crops are recognized
by their dominant rendered color.  All outputs are deterministic across
processes given (stub_seed, stub_similarity_plan).
"""

from __future__ import annotations

import base64
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

DEFAULT_PROMPT = "there is a {classname} in the scene"


class OracleUnavailableError(RuntimeError):
    pass


@dataclass(frozen=True)
class OracleConfig:
    backend: str = "stub"  # "stub" | "vlm"
    model_id: str = "openai/clip-vit-base-patch32"
    crop_pad_factor: float = 1.2
    score_temperature: float = 0.01  # logit scale 100
    prompt_template: str = DEFAULT_PROMPT
    stub_seed: int = 0
    stub_dim: int = 64
    stub_similarity_plan: dict[str, tuple[str, ...]] = field(default_factory=dict)
    stub_class_colors: dict[str, tuple[int, int, int]] = field(default_factory=dict)
    stub_background_color: tuple[int, int, int] = (235, 235, 235)


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("cannot normalize zero vector")
    return v / n


def _seeded_vector(key: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return _unit(rng.standard_normal(dim))


def pad_and_clamp(box, width: int, height: int, pad_factor: float):
    """Expand a box about its center, clamp to the image."""
    x1, y1, x2, y2 = box
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"zero-area box {box}")
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    w, h = (x2 - x1) * pad_factor, (y2 - y1) * pad_factor
    nx1 = max(0.0, cx - w / 2.0)
    ny1 = max(0.0, cy - h / 2.0)
    nx2 = min(float(width), cx + w / 2.0)
    ny2 = min(float(height), cy + h / 2.0)
    if nx2 - nx1 < 2.0 or ny2 - ny1 < 2.0:
        raise ValueError(f"degenerate crop after clamping: {box}")
    return nx1, ny1, nx2, ny2


def crop_region(image: np.ndarray, box, pad_factor: float) -> np.ndarray:
    h, w = image.shape[:2]
    x1, y1, x2, y2 = pad_and_clamp(box, w, h, pad_factor)
    return image[int(y1):int(np.ceil(y2)), int(x1):int(np.ceil(x2))]


class StubOracle:
    """Deterministic pixel-recipe oracle for the synthetic dataset."""

    def __init__(self, config: OracleConfig):
        self.config = config
        self.dim = config.stub_dim
        self._vectors: dict[str, np.ndarray] = {}
        # leaf vectors first, parents from their children
        leaves = set(config.stub_class_colors)
        for children in config.stub_similarity_plan.values():
            leaves.update(children)
        for name in sorted(leaves):
            self._vectors[name] = self._leaf_vector(name)
        for parent in sorted(config.stub_similarity_plan):
            children = config.stub_similarity_plan[parent]
            mean = np.mean([self._vectors.setdefault(c, self._leaf_vector(c))
                            for c in children], axis=0)
            noise = _seeded_vector(f"{config.stub_seed}:parentnoise:{parent}", self.dim)
            self._vectors[parent] = _unit(mean + 0.05 * noise)

    def _leaf_vector(self, name: str) -> np.ndarray:
        return _seeded_vector(f"{self.config.stub_seed}:name:{name}", self.dim)

    def name_vector(self, name: str) -> np.ndarray:
        if name not in self._vectors:
            self._vectors[name] = self._leaf_vector(name)
        return self._vectors[name]

    def _prompt_vector(self, prompt: str) -> np.ndarray:
        # longest known name appearing in the prompt wins; unknown prompts
        # hash to their own stable direction
        best = None
        for name in self._vectors:
            if name in prompt and (best is None or len(name) > len(best)):
                best = name
        if best is not None:
            return self._vectors[best]
        return _seeded_vector(f"{self.config.stub_seed}:prompt:{prompt}", self.dim)

    def embed_texts(self, prompts: list[str]) -> np.ndarray:
        if not prompts:
            raise ValueError("empty prompt list")
        return np.stack([self._prompt_vector(p) for p in prompts])

    def _dominant_class(self, crop: np.ndarray) -> str | None:
        bg = np.array(self.config.stub_background_color, dtype=np.float64)
        flat = crop.reshape(-1, 3).astype(np.float64)
        fg = flat[np.abs(flat - bg).sum(axis=1) > 80.0]
        if len(fg) < 0.18 * len(flat) or not self.config.stub_class_colors:
            return None
        names = sorted(self.config.stub_class_colors)
        palette = np.array([self.config.stub_class_colors[n] for n in names],
                           dtype=np.float64)
        # mode over nearest palette colors
        nearest = np.abs(fg[:, None, :] - palette[None, :, :]).sum(axis=2).argmin(axis=1)
        counts = np.bincount(nearest, minlength=len(names))
        winner = int(counts.argmax())
        mean_dist = np.abs(fg[nearest == winner] - palette[winner]).sum(axis=1).mean()
        if mean_dist > 150.0:
            return None
        return names[winner]

    def embed_image_region(self, image: np.ndarray, box,
                           config: OracleConfig | None = None) -> np.ndarray:
        cfg = config or self.config
        crop = crop_region(image, box, cfg.crop_pad_factor)
        cls = self._dominant_class(crop)
        digest = hashlib.sha256(crop.tobytes()).hexdigest()[:16]
        noise = _seeded_vector(f"{cfg.stub_seed}:crop:{digest}", self.dim)
        if cls is None:
            return noise
        return _unit(self._vectors[cls] + 0.05 * noise)

    def score_region(self, image: np.ndarray, box, class_names: list[str],
                     config: OracleConfig | None = None) -> np.ndarray:
        cfg = config or self.config
        if len(class_names) < 2:
            raise ValueError("need at least 2 class names")
        emb = self.embed_image_region(image, box, cfg)
        texts = self.embed_texts([cfg.prompt_template.format(classname=n)
                                  for n in class_names])
        cosines = texts @ emb
        logits = cosines / cfg.score_temperature
        logits -= logits.max()
        probs = np.exp(logits)
        return probs / probs.sum()


class ClipOracle:
    """Real vision-language backend (optional; needs model weights locally).

    Kept behind the same interface as the stub so the full-scale
    reproduction script can swap it in; desk-scale tests never touch it.
    """

    def __init__(self, config: OracleConfig, cache_path: str | None = None):
        try:
            import torch  # noqa: F401
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise OracleUnavailableError(f"vlm backend unavailable: {exc}") from exc
        try:
            self._model = CLIPModel.from_pretrained(config.model_id)
            self._processor = CLIPProcessor.from_pretrained(config.model_id)
        except Exception as exc:  # weights not present / no network
            raise OracleUnavailableError(f"cannot load {config.model_id}: {exc}") from exc
        self.config = config
        self.dim = self._model.config.projection_dim
        self._cache = TextEmbeddingCache(cache_path) if cache_path else None

    def embed_texts(self, prompts: list[str]) -> np.ndarray:
        import torch
        if not prompts:
            raise ValueError("empty prompt list")
        out = np.zeros((len(prompts), self.dim))
        missing = []
        for i, p in enumerate(prompts):
            cached = self._cache.get(self.config.model_id, p) if self._cache else None
            if cached is not None:
                out[i] = cached
            else:
                missing.append(i)
        if missing:
            inputs = self._processor(text=[prompts[i] for i in missing],
                                     return_tensors="pt", padding=True)
            with torch.no_grad():
                feats = self._model.get_text_features(**inputs).double().numpy()
            feats /= np.linalg.norm(feats, axis=1, keepdims=True)
            for j, i in enumerate(missing):
                out[i] = feats[j]
                if self._cache:
                    self._cache.put(self.config.model_id, prompts[i], feats[j])
        return out

    def embed_image_region(self, image: np.ndarray, box,
                           config: OracleConfig | None = None) -> np.ndarray:
        import torch
        cfg = config or self.config
        crop = crop_region(image, box, cfg.crop_pad_factor)
        rgb = cv2.cvtColor(crop, cv2.COLOR_BGR2RGB)
        inputs = self._processor(images=rgb, return_tensors="pt")
        with torch.no_grad():
            feat = self._model.get_image_features(**inputs).double().numpy()[0]
        return _unit(feat)

    def score_region(self, image: np.ndarray, box, class_names: list[str],
                     config: OracleConfig | None = None) -> np.ndarray:
        cfg = config or self.config
        if len(class_names) < 2:
            raise ValueError("need at least 2 class names")
        emb = self.embed_image_region(image, box, cfg)
        texts = self.embed_texts([cfg.prompt_template.format(classname=n)
                                  for n in class_names])
        logits = (texts @ emb) / cfg.score_temperature
        logits -= logits.max()
        probs = np.exp(logits)
        return probs / probs.sum()


class TextEmbeddingCache:
    """Line-delimited prompt-hash + base64-vector cache keyed by model id."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._store: dict[str, np.ndarray] = {}
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if not line.strip():
                    continue
                key, b64 = line.split("\t")
                self._store[key] = np.frombuffer(base64.b64decode(b64), dtype=np.float64)

    @staticmethod
    def _key(model_id: str, prompt: str) -> str:
        return hashlib.sha256(f"{model_id}\x00{prompt}".encode("utf-8")).hexdigest()

    def get(self, model_id: str, prompt: str) -> np.ndarray | None:
        return self._store.get(self._key(model_id, prompt))

    def put(self, model_id: str, prompt: str, vector: np.ndarray) -> None:
        key = self._key(model_id, prompt)
        self._store[key] = np.asarray(vector, dtype=np.float64)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(key + "\t" + base64.b64encode(self._store[key].tobytes()).decode() + "\n")


def make_oracle(config: OracleConfig, cache_path: str | None = None):
    if config.backend == "stub":
        return StubOracle(config)
    if config.backend == "vlm":
        return ClipOracle(config, cache_path)
    raise ValueError(f"unknown oracle backend {config.backend!r}")
