"""Text-embedding bank, broad/novel similarity accumulation, category
mapping and the mid-stage embedding swap."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .oracle import DEFAULT_PROMPT


@dataclass(frozen=True)
class PromptTemplate:
    template: str = DEFAULT_PROMPT

    def __post_init__(self):
        if self.template.count("{classname}") != 1:
            raise ValueError("template must contain exactly one {classname} slot")

    def format(self, name: str) -> str:
        return self.template.format(classname=name)


@dataclass(frozen=True)
class TextEmbeddingBank:
    names: tuple[str, ...]
    rows: np.ndarray  # (|names| + |extra_names|) x D, unit rows
    extra_names: tuple[str, ...] = ()

    @property
    def all_names(self) -> tuple[str, ...]:
        return self.names + self.extra_names

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def index(self, name: str) -> int:
        try:
            return self.all_names.index(name)
        except ValueError:
            raise ValueError(f"name {name!r} not in bank") from None

    def row(self, name: str) -> np.ndarray:
        return self.rows[self.index(name)]


def build_text_bank(names, template: PromptTemplate, oracle,
                    extra_names=()) -> TextEmbeddingBank:
    names = tuple(names)
    extra_names = tuple(extra_names)
    if len(set(names)) != len(names):
        raise ValueError("duplicate names")
    if set(names) & set(extra_names):
        raise ValueError("extra names collide with class names")
    prompts = [template.format(n) for n in names + extra_names]
    rows = np.asarray(oracle.embed_texts(prompts), dtype=np.float64)
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    rows.setflags(write=False)
    return TextEmbeddingBank(names=names, rows=rows, extra_names=extra_names)


def random_bank(names, dim: int, seed: int, extra_names=()) -> TextEmbeddingBank:
    """Non-semantic head rows (the no-text-alignment ablation): one seeded
    random unit vector per name, no correlation structure."""
    from .oracle import _seeded_vector
    names = tuple(names)
    extra_names = tuple(extra_names)
    rows = np.stack([_seeded_vector(f"{seed}:randrow:{n}", dim)
                     for n in names + extra_names])
    rows.setflags(write=False)
    return TextEmbeddingBank(names=names, rows=rows, extra_names=extra_names)


class MappingAccumulator:
    """Accumulates cosine similarity between observed novel-class visual
    embeddings and the broad text rows.  Kahan-compensated so the totals
    are order-independent to ~1e-9."""

    def __init__(self, novel_names, broad_names):
        self.novel_names = tuple(novel_names)
        self.broad_names = tuple(broad_names)
        n, b = len(self.novel_names), len(self.broad_names)
        self.sums = np.zeros((n, b))
        self._comp = np.zeros((n, b))
        self.counts = np.zeros(n, dtype=np.int64)
        self.iterations_seen = 0

    def add(self, novel_name: str, visual_embed: np.ndarray,
            bank: TextEmbeddingBank) -> None:
        i = self.novel_names.index(novel_name)
        visual_embed = np.asarray(visual_embed, dtype=np.float64)
        for j, broad in enumerate(self.broad_names):
            row = bank.row(broad)
            if row.shape != visual_embed.shape:
                raise ValueError("embedding dimension mismatch")
            value = float(row @ visual_embed)
            # Kahan step
            y = value - self._comp[i, j]
            t = self.sums[i, j] + y
            self._comp[i, j] = (t - self.sums[i, j]) - y
            self.sums[i, j] = t
        self.counts[i] += 1

    def mean_matrix(self) -> np.ndarray:
        counts = np.maximum(self.counts[:, None], 1)
        return self.sums / counts


@dataclass(frozen=True)
class CategoryMapping:
    pairs: tuple[tuple[str, str], ...]  # (novel_name, broad_name), one-to-one

    def __post_init__(self):
        novels = [n for n, _ in self.pairs]
        broads = [b for _, b in self.pairs]
        if len(set(novels)) != len(novels) or len(set(broads)) != len(broads):
            raise ValueError("mapping is not one-to-one")

    def broad_for(self, novel: str) -> str:
        for n, b in self.pairs:
            if n == novel:
                return b
        raise KeyError(novel)


def assign_mapping(mean: np.ndarray, novel_names, broad_names) -> CategoryMapping:
    """Optimal one-to-one assignment maximizing total mean similarity.

    Ties between equal-value assignments break lexicographically by
    (novel index, broad index): a vanishing preference bonus makes the
    lexicographically smallest optimum unique before the solver runs.
    """
    mean = np.asarray(mean, dtype=np.float64)
    n, b = mean.shape
    pref = np.zeros_like(mean)
    for i in range(n):
        for j in range(b):
            pref[i, j] = (b - j) / float((b + 1) ** (i + 1))
    scale = max(1.0, np.abs(mean).max())
    perturbed = mean + 1e-12 * scale * pref
    rows, cols = linear_sum_assignment(-perturbed)
    pairs = tuple((novel_names[i], broad_names[j]) for i, j in zip(rows, cols))
    return CategoryMapping(pairs=pairs)


def brute_force_mapping(mean: np.ndarray, novel_names, broad_names) -> CategoryMapping:
    """Exhaustive reference: enumerate every bijection, keep the best sum,
    break exact ties by the lexicographically smallest column tuple."""
    mean = np.asarray(mean, dtype=np.float64)
    n = mean.shape[0]
    best = None
    best_sum = -np.inf
    for perm in itertools.permutations(range(mean.shape[1]), n):
        total = sum(mean[i, perm[i]] for i in range(n))
        if total > best_sum or (total == best_sum and perm < best):
            best_sum = total
            best = perm
    pairs = tuple((novel_names[i], broad_names[best[i]]) for i in range(n))
    return CategoryMapping(pairs=pairs)


def finalize_mapping(acc: MappingAccumulator,
                     min_observations: int = 20) -> CategoryMapping:
    under = [acc.novel_names[i] for i in range(len(acc.novel_names))
             if acc.counts[i] < min_observations]
    if under:
        raise ValueError(f"under-observed novel classes: {under}")
    return assign_mapping(acc.mean_matrix(), acc.novel_names, acc.broad_names)


def swap_embeddings(bank: TextEmbeddingBank, mapping: CategoryMapping,
                    template: PromptTemplate, oracle) -> TextEmbeddingBank:
    """Replace each broad row, in place, with its mapped novel name's text
    embedding.  Base rows stay bit-identical; indices keep their learned
    head alignment."""
    if not mapping.pairs:
        return bank
    rows = bank.rows.copy()
    names = list(bank.all_names)
    for novel, broad in mapping.pairs:
        idx = bank.index(broad)  # raises if absent
        vec = np.asarray(oracle.embed_texts([template.format(novel)]),
                         dtype=np.float64)[0]
        rows[idx] = vec / np.linalg.norm(vec)
        names[idx] = novel
    rows.setflags(write=False)
    split = len(bank.names)
    return TextEmbeddingBank(names=tuple(names[:split]), rows=rows,
                             extra_names=tuple(names[split:]))
