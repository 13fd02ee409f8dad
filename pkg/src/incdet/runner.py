"""Experiment orchestration: full two-stage runs, ablation grids, and the
distillation-weight sweep, driven by a YAML run config."""

from __future__ import annotations

import shutil
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import data as datamod
from . import detector as det
from . import evaluation as evalmod
from . import miner as mining
from . import trainer as trainmod
from .data import (SYNTH_BASE, SYNTH_BROAD, SYNTH_NOVEL, SYNTH_PARENTS,
                   SYNTH_RECIPES, DatasetView, SyntheticConfig, filter_for_task,
                   load_pixels, load_voc, prepare_synthetic_dataset)
from .detector import DistillConfig
from .evaluation import APReport, DetectionResult, map_report, write_detections
from .miner import MinerConfig
from .oracle import OracleConfig, make_oracle
from .registry import IncrementalSchedule, build_schedule
from .text_space import PromptTemplate, TextEmbeddingBank, build_text_bank
from .trainer import (TaskResult, Toggles, TrainConfig, run_task_1, run_task_2,
                      save_checkpoint)


class RunError(RuntimeError):
    def __init__(self, tag: str, message: str):
        super().__init__(f"{tag}: {message}")
        self.tag = tag


@dataclass(frozen=True)
class RunConfig:
    setting: str = "synthetic"
    data_root: str = "data/synthetic"
    out_dir: str = "runs/default"
    seed: int = 7
    broad_names: tuple[str, ...] = SYNTH_BROAD
    base_names: tuple[str, ...] = SYNTH_BASE     # synthetic setting only
    novel_names: tuple[str, ...] = SYNTH_NOVEL   # synthetic setting only
    toggles: Toggles = field(default_factory=Toggles)
    train: TrainConfig = field(default_factory=TrainConfig)
    miner: MinerConfig = field(default_factory=MinerConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    ap_mode: str = "voc07"
    score_threshold: float = 0.05
    prompt_template: str = PromptTemplate().template

    def to_dict(self) -> dict:
        d = asdict(self)
        d["oracle"]["stub_similarity_plan"] = {
            k: list(v) for k, v in self.oracle.stub_similarity_plan.items()}
        d["oracle"]["stub_class_colors"] = {
            k: list(v) for k, v in self.oracle.stub_class_colors.items()}
        return d

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        d = dict(d)
        try:
            if "toggles" in d:
                d["toggles"] = Toggles(**d["toggles"])
            if "train" in d:
                t = dict(d["train"])
                if "distill" in t:
                    dist = dict(t["distill"])
                    dist["targets"] = tuple(dist.get("targets", ("backbone", "roi")))
                    t["distill"] = DistillConfig(**dist)
                if "extra_names" in t:
                    t["extra_names"] = tuple(t["extra_names"])
                d["train"] = TrainConfig(**t)
            if "miner" in d:
                d["miner"] = MinerConfig(**d["miner"])
            if "oracle" in d:
                o = dict(d["oracle"])
                o["stub_similarity_plan"] = {
                    k: tuple(v) for k, v in o.get("stub_similarity_plan", {}).items()}
                o["stub_class_colors"] = {
                    k: tuple(v) for k, v in o.get("stub_class_colors", {}).items()}
                if "stub_background_color" in o:
                    o["stub_background_color"] = tuple(o["stub_background_color"])
                d["oracle"] = OracleConfig(**o)
            if "synthetic" in d:
                s = dict(d["synthetic"])
                for key in ("classes", "class_weights", "require_presence"):
                    if s.get(key) is not None:
                        s[key] = tuple(s[key])
                d["synthetic"] = SyntheticConfig(**s)
            for key in ("broad_names", "base_names", "novel_names"):
                if key in d:
                    d[key] = tuple(d[key])
            return RunConfig(**d)
        except (TypeError, ValueError) as exc:
            raise RunError("E_CONFIG", str(exc)) from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @staticmethod
    def load(path: str | Path) -> "RunConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise RunError("E_CONFIG", f"cannot read config {path}: {exc}") from exc
        return RunConfig.from_dict(raw)


def synthetic_default_config(out_dir: str = "runs/default",
                             data_root: str = "data/synthetic",
                             seed: int = 7) -> RunConfig:
    oracle = OracleConfig(
        backend="stub",
        stub_similarity_plan={k: tuple(v) for k, v in SYNTH_PARENTS.items()},
        stub_class_colors={n: r.color for n, r in SYNTH_RECIPES.items()},
        stub_seed=seed,
    )
    return RunConfig(
        setting="synthetic", data_root=data_root, out_dir=out_dir, seed=seed,
        oracle=oracle,
        miner=MinerConfig(min_side=20.0),
        # distill_scale rebalances the 0.2 feature-distillation weight against
        # the logit_scale=100 CE term at desk scale; without it the CE
        # gradients drown the anti-forgetting signal entirely
        train=TrainConfig(seed=seed, distill_scale=1000.0),
        synthetic=SyntheticConfig(
            seed=seed, noise_sigma=8.0, color_jitter=30,
            class_weights=(1.0,) * 6 + (0.4, 0.4),
            min_separation=4.0, require_presence=SYNTH_BASE,
        ),
    )


def build_schedule_from_config(cfg: RunConfig) -> IncrementalSchedule:
    if cfg.setting == "synthetic":
        return build_schedule("synthetic", cfg.broad_names,
                              base_names=cfg.base_names,
                              novel_names=cfg.novel_names)
    return build_schedule(cfg.setting, cfg.broad_names)


def _anchor_cache():
    cache: dict[tuple[int, int], np.ndarray] = {}

    def get(w: int, h: int) -> np.ndarray:
        if (w, h) not in cache:
            cache[(w, h)] = det.build_anchors(w, h)
        return cache[(w, h)]
    return get


def eval_bank_for_stage(stage: int, cfg: RunConfig,
                        schedule: IncrementalSchedule, oracle,
                        result: TaskResult) -> TextEmbeddingBank:
    """Bank used for reporting.

    Stage 1 with text alignment adds zero-shot novel rows next to the
    trained base rows; without it the head can only emit trained names,
    so novel AP is structurally zero.  Stage 2 reports with the trained
    task-2 bank (extra distractor rows are never emitted).
    """
    registry = schedule.registry
    template = PromptTemplate(cfg.prompt_template)
    if stage == 1:
        if cfg.toggles.text:
            return build_text_bank(registry.base_names + registry.novel_names,
                                   template, oracle,
                                   extra_names=result.bank.extra_names)
        rows = np.stack([result.bank.row(n) for n in registry.base_names])
        rows.setflags(write=False)
        return TextEmbeddingBank(names=registry.base_names, rows=rows)
    return result.bank


def evaluate_stage(result: TaskResult, bank: TextEmbeddingBank,
                   test_view: DatasetView, schedule: IncrementalSchedule,
                   stage: str, cfg: RunConfig,
                   pixels_fn=load_pixels) -> tuple[APReport, list[DetectionResult]]:
    registry = schedule.registry
    emit = set(registry.base_names) | set(registry.novel_names)
    anchors_for = _anchor_cache()
    dets: list[DetectionResult] = []
    gts: dict[str, list[tuple[tuple, str, bool]]] = {}
    for rec in test_view.records:
        image = pixels_fn(rec)
        dets.extend(det.infer(image, bank, result.state, image_id=rec.image_id,
                              score_threshold=cfg.score_threshold,
                              anchors=anchors_for(rec.width, rec.height),
                              emit_names=emit))
        gts[rec.image_id] = [(b.geometry(), b.label, b.difficult)
                             for b in rec.boxes]
    report = map_report(dets, gts, registry, stage, ap_mode=cfg.ap_mode)
    return report, dets


@dataclass
class RunArtifacts:
    report_t1: APReport
    report_t2: APReport
    out_dir: Path


def run_experiment(cfg: RunConfig, write_artifacts: bool = True) -> RunArtifacts:
    """Execute prepare-check, task 1, task 2 and both evaluations."""
    data_root = Path(cfg.data_root)
    if not data_root.exists():
        raise RunError("E_DATA_ROOT", f"data root {data_root} does not exist")
    schedule = build_schedule_from_config(cfg)
    registry = schedule.registry
    known = registry.base_names + registry.novel_names
    try:
        trainval = load_voc(data_root, "trainval", known_labels=known)
        test = load_voc(data_root, "test", known_labels=known)
    except (OSError, ValueError) as exc:
        raise RunError("E_DATA_ROOT", str(exc)) from exc

    oracle = make_oracle(cfg.oracle)
    template = PromptTemplate(cfg.prompt_template)
    t1_view = filter_for_task(trainval, schedule.tasks[0])
    t2_view = filter_for_task(trainval, schedule.tasks[1])

    task1 = run_task_1(schedule, t1_view, oracle, cfg.train, cfg.miner,
                       toggles=cfg.toggles, template=template)
    bank1 = eval_bank_for_stage(1, cfg, schedule, oracle, task1)
    report1, dets1 = evaluate_stage(task1, bank1, test, schedule, "T1", cfg)

    task2 = run_task_2(task1, schedule, t2_view, t1_view, oracle, cfg.train,
                       toggles=cfg.toggles, template=template)
    bank2 = eval_bank_for_stage(2, cfg, schedule, oracle, task2)
    report2, dets2 = evaluate_stage(task2, bank2, test, schedule, "T2", cfg)

    out_dir = Path(cfg.out_dir)
    if write_artifacts:
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(out_dir / "config.yaml")
        save_checkpoint(out_dir / "checkpoint_t1.npz", task1,
                        {"stage": "T1", "setting": cfg.setting, "seed": cfg.seed})
        save_checkpoint(out_dir / "checkpoint_t2.npz", task2,
                        {"stage": "T2", "setting": cfg.setting, "seed": cfg.seed})
        mining.persist(task1.store, out_dir / "pseudo_store.txt")
        (out_dir / "metrics_t1.log").write_text("\n".join(task1.metrics) + "\n")
        (out_dir / "metrics_t2.log").write_text("\n".join(task2.metrics) + "\n")
        (out_dir / "report_t1.json").write_text(report1.to_json())
        (out_dir / "report_t2.json").write_text(report2.to_json())
        (out_dir / "report_t1.txt").write_text(report1.to_table())
        (out_dir / "report_t2.txt").write_text(report2.to_table())
        write_detections(dets1, out_dir / "dets_t1.txt")
        write_detections(dets2, out_dir / "dets_t2.txt")
    return RunArtifacts(report_t1=report1, report_t2=report2, out_dir=out_dir)


ABLATION_ROWS: tuple[tuple[str, ...], ...] = (
    ("text",),
    ("text", "broad"),
    ("image",),
    ("text", "broad", "image"),
)


def toggles_from_row(row: tuple[str, ...]) -> Toggles:
    unknown = set(row) - {"text", "broad", "image"}
    if unknown:
        raise RunError("E_CONFIG", f"unknown toggles {sorted(unknown)}")
    return Toggles(text="text" in row, broad="broad" in row, image="image" in row)


def _ablation_cell(sub: RunConfig) -> dict[str, float]:
    art = run_experiment(sub)
    return {
        "t1_base": art.report_t1.map_base, "t1_novel": art.report_t1.map_novel,
        "t1_all": art.report_t1.map_all,
        "t2_base": art.report_t2.map_base, "t2_novel": art.report_t2.map_novel,
        "t2_all": art.report_t2.map_all,
    }


def run_ablation(cfg: RunConfig, rows=ABLATION_ROWS,
                 parallel: int = 1) -> dict[str, dict[str, float]]:
    """Run each toggle combination; returns row label -> metric columns.

    ``parallel`` > 1 executes the independent configurations in worker
    processes (no shared mutable state between runs).
    """
    if not rows:
        raise RunError("E_CONFIG", "nothing to ablate: empty toggle list")
    labels, subs = [], []
    for row in rows:
        label = "+".join(row) if row else "none"
        labels.append(label)
        subs.append(replace(cfg, toggles=toggles_from_row(row),
                            out_dir=str(Path(cfg.out_dir) / f"ablate_{label}")))
    if parallel > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            cells = list(pool.map(_ablation_cell, subs))
    else:
        cells = [_ablation_cell(sub) for sub in subs]
    return dict(zip(labels, cells))


def format_ablation_table(table: dict[str, dict[str, float]]) -> str:
    cols = ["t1_base", "t1_novel", "t1_all", "t2_base", "t2_novel", "t2_all"]
    width = max(len(k) for k in table)
    lines = ["  ".join([" " * width] + [f"{c:>9}" for c in cols])]
    for label, row in table.items():
        lines.append("  ".join([f"{label:<{width}}"]
                               + [f"{row[c] * 100:9.2f}" for c in cols]))
    return "\n".join(lines) + "\n"


def _sweep_cell(sub: RunConfig) -> dict[str, float]:
    art = run_experiment(sub)
    return {
        "t1_base": art.report_t1.map_base, "t1_novel": art.report_t1.map_novel,
        "t2_base": art.report_t2.map_base, "t2_novel": art.report_t2.map_novel,
    }


def run_distill_sweep(cfg: RunConfig, weights: list[float],
                      default_weight: float = 0.2,
                      parallel: int = 1) -> dict[float, dict[str, float]]:
    unique = list(dict.fromkeys(weights))
    if len(unique) < len(weights):
        import logging
        logging.getLogger(__name__).warning("duplicate sweep weights deduplicated")
    if len(unique) < 2:
        raise RunError("E_CONFIG", "need at least 2 distinct distillation weights")
    subs = [replace(
        cfg,
        train=replace(cfg.train, distill=replace(cfg.train.distill, weight=w)),
        out_dir=str(Path(cfg.out_dir) / f"sweep_w{w:g}")) for w in unique]
    if parallel > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            cells = list(pool.map(_sweep_cell, subs))
    else:
        cells = [_sweep_cell(sub) for sub in subs]
    curves: dict[float, dict[str, float]] = {}
    for w, cell in zip(unique, cells):
        curves[w] = dict(cell, default=1.0 if w == default_weight else 0.0)
    return curves
