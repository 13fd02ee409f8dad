"""Shared fixtures: stub oracle, synthetic datasets, cached training runs.

Full two-stage runs are expensive (~12 s each), so every test that needs
one goes through the session-scoped caches below.
"""

from dataclasses import replace

import numpy as np
import pytest

from incdet.data import SYNTH_PARENTS, SYNTH_RECIPES, prepare_synthetic_dataset
from incdet.oracle import OracleConfig, StubOracle
from incdet.runner import RunConfig, run_experiment, synthetic_default_config
from incdet.trainer import Toggles

AB_SEEDS = (7, 8, 9)


@pytest.fixture(scope="session")
def stub_oracle() -> StubOracle:
    cfg = OracleConfig(
        backend="stub",
        stub_similarity_plan={k: tuple(v) for k, v in SYNTH_PARENTS.items()},
        stub_class_colors={n: r.color for n, r in SYNTH_RECIPES.items()},
        stub_seed=7,
    )
    return StubOracle(cfg)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Factory: seed -> prepared synthetic dataset root (cached)."""
    roots = {}

    def get(seed: int) -> str:
        if seed not in roots:
            root = tmp_path_factory.mktemp(f"synth{seed}")
            cfg = synthetic_default_config(data_root=str(root), seed=seed)
            prepare_synthetic_dataset(root, cfg.synthetic)
            roots[seed] = str(root)
        return roots[seed]

    return get


@pytest.fixture(scope="session")
def run_config(synth_root, tmp_path_factory):
    """Factory: (seed, toggles) -> RunConfig over the shared dataset."""

    def get(seed: int, toggles: Toggles) -> RunConfig:
        tag = f"{seed}_{int(toggles.text)}{int(toggles.broad)}{int(toggles.image)}"
        out = tmp_path_factory.mktemp(f"run{tag}")
        cfg = synthetic_default_config(out_dir=str(out),
                                       data_root=synth_root(seed), seed=seed)
        return replace(cfg, toggles=toggles)

    return get


@pytest.fixture(scope="session")
def cached_run(run_config):
    """Factory: (seed, toggles) -> RunArtifacts, computed once per combo."""
    cache = {}

    def get(seed: int, toggles: Toggles):
        key = (seed, toggles)
        if key not in cache:
            cache[key] = run_experiment(run_config(seed, toggles))
        return cache[key]

    return get


@pytest.fixture(scope="session")
def full_toggles() -> Toggles:
    return Toggles(text=True, broad=True, image=True)


@pytest.fixture(scope="session")
def baseline_toggles() -> Toggles:
    """Distill-only baseline: all method toggles off."""
    return Toggles(text=False, broad=False, image=False)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
