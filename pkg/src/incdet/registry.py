"""Class universe and the two-task incremental schedule.

A run is described by a :class:`ClassRegistry` (base / novel / broad names)
plus an :class:`IncrementalSchedule` of exactly two :class:`TaskSpec`s.
Task 1 trains on base annotations with a label space of base + broad names;
task 2 trains on novel annotations with a label space of base + novel names.
"""

from __future__ import annotations

from dataclasses import dataclass

# PASCAL VOC 2007 category names, frozen in alphabetical order.  The three
# stock settings split this list at 10, 15 and 19.
VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle",
    "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person",
    "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)

_SETTING_SPLITS = {"10+10": 10, "15+5": 15, "19+1": 19}

KNOWN_SETTINGS = tuple(_SETTING_SPLITS) + ("synthetic",)

# Documented default broad set for 15+5; the other VOC settings require
# broad names in the run config.
DEFAULT_BROAD_15_5 = ("plant", "animal", "furniture", "vehicle", "machine")


def normalize_name(name: str) -> str:
    return name.strip().lower()


@dataclass(frozen=True)
class ClassRegistry:
    base_names: tuple[str, ...]
    novel_names: tuple[str, ...]
    broad_names: tuple[str, ...]
    setting_id: str

    @property
    def all_names(self) -> tuple[str, ...]:
        return self.base_names + self.novel_names


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    visible_classes: tuple[str, ...]
    label_space: tuple[str, ...]


@dataclass(frozen=True)
class IncrementalSchedule:
    registry: ClassRegistry
    tasks: tuple[TaskSpec, ...]


def validate_registry(registry: ClassRegistry) -> list[str]:
    """Return the list of violated invariants (empty means valid).

    Reports, never raises.
    """
    violations: list[str] = []
    groups = {
        "base": registry.base_names,
        "novel": registry.novel_names,
        "broad": registry.broad_names,
    }
    for label, names in groups.items():
        for n in names:
            if not n or normalize_name(n) != n:
                violations.append(f"{label} name {n!r} is empty or not normalized")
        if len(set(names)) != len(names):
            violations.append(f"duplicate names within {label} set")
    pairs = [("base", "novel"), ("base", "broad"), ("novel", "broad")]
    for a, b in pairs:
        overlap = set(groups[a]) & set(groups[b])
        if overlap:
            violations.append(f"{a}/{b} overlap: {sorted(overlap)}")
    if len(registry.broad_names) != len(registry.novel_names):
        violations.append(
            f"broad count {len(registry.broad_names)} != novel count "
            f"{len(registry.novel_names)}"
        )
    if registry.setting_id not in KNOWN_SETTINGS:
        violations.append(f"unknown setting {registry.setting_id!r}")
    return violations


def build_schedule(
    setting_id: str,
    broad_names: list[str] | tuple[str, ...],
    base_names: list[str] | tuple[str, ...] | None = None,
    novel_names: list[str] | tuple[str, ...] | None = None,
) -> IncrementalSchedule:
    """Build the two-task schedule for a setting.

    For the VOC settings the base/novel split is fixed by the setting id;
    for "synthetic" both name lists must be supplied.
    """
    if setting_id in _SETTING_SPLITS:
        split = _SETTING_SPLITS[setting_id]
        base = VOC_CLASSES[:split]
        novel = VOC_CLASSES[split:]
    elif setting_id == "synthetic":
        if base_names is None or novel_names is None:
            raise ValueError("synthetic setting requires base_names and novel_names")
        base = tuple(normalize_name(n) for n in base_names)
        novel = tuple(normalize_name(n) for n in novel_names)
    else:
        raise ValueError(f"unknown setting {setting_id!r}")

    broad = tuple(normalize_name(n) for n in broad_names)
    registry = ClassRegistry(
        base_names=tuple(base),
        novel_names=tuple(novel),
        broad_names=broad,
        setting_id=setting_id,
    )
    violations = validate_registry(registry)
    if violations:
        raise ValueError("invalid registry: " + "; ".join(violations))

    t1 = TaskSpec(task_id=1, visible_classes=registry.base_names,
                  label_space=registry.base_names + registry.broad_names)
    t2 = TaskSpec(task_id=2, visible_classes=registry.novel_names,
                  label_space=registry.base_names + registry.novel_names)
    return IncrementalSchedule(registry=registry, tasks=(t1, t2))


def label_index(label_space: tuple[str, ...] | list[str], name: str) -> int:
    """Stable 0-based index of a name in a label space.

    Background is not part of any label space; the detection head appends
    its own background row.
    """
    try:
        return tuple(label_space).index(name)
    except ValueError:
        raise ValueError(f"label {name!r} not in label space") from None
