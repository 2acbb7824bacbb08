"""Seeded synthetic scenes with task-conditioned rank annotations, and their file IO.

A :class:`RankTable` says, for every (affordance, context, category), which
priority level an object of that category gets under the task. Level 1 is the
highest priority; :data:`IRRELEVANT` marks objects that do not serve the task.
Objects sharing a level under a task form one functional group.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

IRRELEVANT = 8
MAX_LEVEL = 7


class DatasetError(ValueError):
    """Malformed or invariant-violating dataset content."""


@dataclass(frozen=True)
class TaskSpec:
    affordance_id: int
    context_id: int
    affordance_tokens: tuple[int, ...]
    context_tokens: tuple[int, ...]


def vocab_size(n_affordances: int, contexts_per_affordance: int) -> int:
    return 1 + n_affordances + n_affordances * contexts_per_affordance


def make_task(affordance: int, context: int, n_affordances: int, contexts_per_affordance: int) -> TaskSpec:
    """Token layout: 0 is reserved, then one token per affordance verb, then one per context word.

    The context phrase repeats the verb ("contain" + "water"), so both
    sequences draw on the same embedding rows.
    """
    if not 0 <= affordance < n_affordances:
        raise ValueError(f"affordance {affordance} outside [0, {n_affordances})")
    if not 0 <= context < contexts_per_affordance:
        raise ValueError(f"context {context} outside [0, {contexts_per_affordance})")
    verb = 1 + affordance
    word = 1 + n_affordances + affordance * contexts_per_affordance + context
    return TaskSpec(affordance, context, (verb,), (verb, word))


@dataclass
class RankTable:
    n_affordances: int
    contexts_per_affordance: int
    n_categories: int
    ranks: dict[tuple[int, int, int], int]

    def lookup(self, task: TaskSpec | tuple[int, int], category: int) -> int:
        a, c = (task.affordance_id, task.context_id) if isinstance(task, TaskSpec) else task
        if not 0 <= a < self.n_affordances:
            raise KeyError(f"unknown affordance id {a}")
        if not 0 <= c < self.contexts_per_affordance:
            raise KeyError(f"unknown context id {c} for affordance {a}")
        return self.ranks.get((a, c, int(category)), IRRELEVANT)

    def relevant_categories(self, affordance: int) -> list[int]:
        return sorted(
            k for k in range(self.n_categories) if self.ranks.get((affordance, 0, k), IRRELEVANT) != IRRELEVANT
        )

    def to_json(self) -> dict[str, int]:
        out = {}
        for a in range(self.n_affordances):
            for c in range(self.contexts_per_affordance):
                for k in range(self.n_categories):
                    out[f"{a}:{c}:{k}"] = self.lookup((a, c), k)
        return out

    @classmethod
    def from_json(cls, mapping: dict[str, int]) -> "RankTable":
        keys = [tuple(int(p) for p in key.split(":")) for key in mapping]
        if not keys:
            raise DatasetError("empty rank table")
        n_a = max(k[0] for k in keys) + 1
        n_c = max(k[1] for k in keys) + 1
        n_k = max(k[2] for k in keys) + 1
        ranks = {}
        for key, level in mapping.items():
            a, c, k = (int(p) for p in key.split(":"))
            if int(level) != IRRELEVANT:
                ranks[(a, c, k)] = int(level)
        return cls(n_a, n_c, n_k, ranks)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "RankTable":
        return cls.from_json(json.loads(Path(path).read_text()))

    def inverted_pairs(self, affordance: int, c0: int = 0, c1: int = 1) -> list[tuple[int, int]]:
        """Category pairs (x, y) ranked x above y under ``c0`` and y above x under ``c1``."""
        rel = self.relevant_categories(affordance)
        out = []
        for x, y in itertools.permutations(rel, 2):
            rx0, ry0 = self.lookup((affordance, c0), x), self.lookup((affordance, c0), y)
            rx1, ry1 = self.lookup((affordance, c1), x), self.lookup((affordance, c1), y)
            if rx0 < ry0 and rx1 > ry1:
                out.append((x, y))
        return out


def _random_levels(rng: np.random.Generator, n: int, max_level: int) -> list[int]:
    """Surjection of ``n`` categories onto levels 1..L with 2 <= L <= min(n, max_level)."""
    top = min(n, max_level)
    n_levels = int(rng.integers(2, top + 1))
    levels = list(range(1, n_levels + 1)) + [int(v) for v in rng.integers(1, n_levels + 1, n - n_levels)]
    rng.shuffle(levels)
    return levels


def build_rank_table(
    seed: int,
    n_affordances: int,
    contexts_per_affordance: int,
    n_categories: int,
    relevant_range: tuple[int, int] = (3, 5),
    max_level: int = MAX_LEVEL,
) -> RankTable:
    """Draw a rank table in which contexts of each affordance disagree.

    For every affordance some pair of its contexts strictly inverts the order
    of at least one category pair, which also implies the contexts differ.
    """
    if contexts_per_affordance < 2:
        raise ValueError("contexts_per_affordance must be >= 2")
    lo, hi = relevant_range
    lo = max(lo, 2)
    if n_categories < lo:
        raise ValueError(
            f"need at least {lo} relevant categories per affordance but only {n_categories} categories exist"
        )
    hi = min(max(hi, lo), n_categories)
    rng = np.random.default_rng(seed)
    ranks: dict[tuple[int, int, int], int] = {}
    for a in range(n_affordances):
        n_rel = int(rng.integers(lo, hi + 1))
        cats = sorted(int(k) for k in rng.choice(n_categories, n_rel, replace=False))
        for _ in range(1000):
            per_ctx = [_random_levels(rng, n_rel, max_level) for _ in range(contexts_per_affordance)]
            if _has_inversion(per_ctx):
                break
        else:  # pragma: no cover - vanishingly unlikely with n_rel >= 2
            raise RuntimeError("could not draw disagreeing contexts")
        for c, levels in enumerate(per_ctx):
            for k, lvl in zip(cats, levels):
                ranks[(a, c, k)] = lvl
    return RankTable(n_affordances, contexts_per_affordance, n_categories, ranks)


def _has_inversion(per_ctx: Sequence[Sequence[int]]) -> bool:
    for u, v in itertools.combinations(per_ctx, 2):
        for i, j in itertools.combinations(range(len(u)), 2):
            if (u[i] - u[j]) * (v[i] - v[j]) < 0:
                return True
    return False


@dataclass(frozen=True)
class SceneObject:
    bbox: tuple[float, float, float, float]  # cx, cy, w, h in [0, 1]
    category: int


@dataclass
class TaskAnnotation:
    affordance: int
    context: int
    ranks: list[int]
    relevant: list[bool]


@dataclass
class SceneSample:
    scene_id: str
    seed: int
    objects: list[SceneObject]
    tasks: list[TaskAnnotation] = field(default_factory=list)

    def boxes(self) -> np.ndarray:
        return np.array([o.bbox for o in self.objects], dtype=np.float64).reshape(-1, 4)

    def categories(self) -> list[int]:
        return [o.category for o in self.objects]

    def to_record(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "seed": int(self.seed),
            "objects": [{"bbox": [float(v) for v in o.bbox], "category": int(o.category)} for o in self.objects],
            "tasks": [
                {
                    "affordance": t.affordance,
                    "context": t.context,
                    "ranks": [int(r) for r in t.ranks],
                    "relevant": [bool(r) for r in t.relevant],
                }
                for t in self.tasks
            ],
        }


@dataclass
class SceneConfig:
    min_objects: int = 3
    max_objects: int = 6
    min_size: float = 0.10
    max_size: float = 0.22
    min_sep: float = 0.16
    max_tries: int = 2000
    tasks_per_scene: int = 4
    anchor_relevant: int = 2  # relevant objects planted before the random fill

    def validate(self) -> None:
        if not 2 <= self.min_objects <= self.max_objects:
            raise ValueError(f"need 2 <= min_objects <= max_objects, got {self.min_objects}, {self.max_objects}")
        if not 0 < self.min_size <= self.max_size <= 1:
            raise ValueError("object sizes must satisfy 0 < min_size <= max_size <= 1")


def _task_levels(table: RankTable, a: int, c: int, cats: Sequence[int]) -> list[int]:
    return [table.lookup((a, c), k) for k in cats]


def _valid_levels(levels: Iterable[int]) -> bool:
    return len({lv for lv in levels if lv != IRRELEVANT}) >= 2


def generate_scene(seed: int, table: RankTable, cfg: SceneConfig | None = None, scene_id: str | None = None) -> SceneSample:
    cfg = cfg or SceneConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))

    # plant a pair of relevant categories at different levels for some task
    anchor_a = int(rng.integers(table.n_affordances))
    anchor_c = int(rng.integers(table.contexts_per_affordance))
    rel = table.relevant_categories(anchor_a)
    cats: list[int] = []
    for _ in range(100):
        pick = [int(k) for k in rng.choice(rel, min(cfg.anchor_relevant, len(rel), n_obj), replace=False)]
        if _valid_levels(_task_levels(table, anchor_a, anchor_c, pick)):
            cats = pick
            break
    if not cats:
        raise DatasetError(f"affordance {anchor_a} cannot produce two distinct rank levels")
    while len(cats) < n_obj:
        cats.append(int(rng.integers(table.n_categories)))
    order = rng.permutation(n_obj)
    cats = [cats[i] for i in order]

    boxes = []
    tries = 0
    while len(boxes) < n_obj:
        tries += 1
        if tries > cfg.max_tries:
            raise DatasetError(
                f"object placement exceeded max_tries={cfg.max_tries} under min_sep={cfg.min_sep} "
                f"with {n_obj} objects"
            )
        w, h = rng.uniform(cfg.min_size, cfg.max_size, 2)
        cx = rng.uniform(w / 2, 1 - w / 2)
        cy = rng.uniform(h / 2, 1 - h / 2)
        if all((cx - b[0]) ** 2 + (cy - b[1]) ** 2 >= cfg.min_sep**2 for b in boxes):
            boxes.append((float(cx), float(cy), float(w), float(h)))
    objects = [SceneObject(b, k) for b, k in zip(boxes, cats)]

    valid = []
    for a in range(table.n_affordances):
        for c in range(table.contexts_per_affordance):
            levels = _task_levels(table, a, c, cats)
            if _valid_levels(levels):
                valid.append((a, c, levels))
    if len(valid) > cfg.tasks_per_scene:
        keep = sorted(rng.choice(len(valid), cfg.tasks_per_scene, replace=False))
        # the planted task always survives
        anchor = next(i for i, v in enumerate(valid) if v[:2] == (anchor_a, anchor_c))
        if anchor not in keep:
            keep[int(rng.integers(len(keep)))] = anchor
            keep = sorted(set(keep))
        valid = [valid[i] for i in keep]
    tasks = [TaskAnnotation(a, c, levels, [lv != IRRELEVANT for lv in levels]) for a, c, levels in valid]
    return SceneSample(scene_id or f"scene-{seed}", int(seed), objects, tasks)


def scene_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1, dtype=np.uint64)[0])


def generate_dataset(seed: int, n: int, table: RankTable, cfg: SceneConfig | None = None) -> list[SceneSample]:
    return [generate_scene(scene_seed(seed, i), table, cfg, scene_id=f"s{seed}-{i:05d}") for i in range(n)]


# -- validation and IO ------------------------------------------------------


def validate_sample(s: SceneSample) -> None:
    if len(s.objects) < 2:
        raise DatasetError(f"{s.scene_id}: fewer than two objects")
    for o in s.objects:
        cx, cy, w, h = o.bbox
        if not (w > 0 and h > 0 and 0 <= cx <= 1 and 0 <= cy <= 1):
            raise DatasetError(f"{s.scene_id}: invalid box {o.bbox}")
    for t in s.tasks:
        if len(t.ranks) != len(s.objects) or len(t.relevant) != len(s.objects):
            raise DatasetError(f"{s.scene_id}: task ({t.affordance},{t.context}) does not cover every object")
        for r, flag in zip(t.ranks, t.relevant):
            if not 1 <= r <= IRRELEVANT or flag != (r <= MAX_LEVEL):
                raise DatasetError(f"{s.scene_id}: bad rank/relevance pair ({r}, {flag})")
        if not _valid_levels(t.ranks):
            raise DatasetError(
                f"{s.scene_id}: task ({t.affordance},{t.context}) has a single rank level among relevant objects"
            )


def validate_dataset(samples: Iterable[SceneSample]) -> None:
    for s in samples:
        validate_sample(s)


def save_dataset(samples: Iterable[SceneSample], path: str | Path) -> None:
    ordered = sorted(samples, key=lambda s: s.scene_id)
    with open(path, "w", encoding="utf-8") as fh:
        for s in ordered:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")


def _parse_record(rec: dict, lineno: int) -> SceneSample:
    def need(obj: dict, key: str, where: str):
        if key not in obj:
            raise DatasetError(f"line {lineno}: missing field {key!r} in {where}")
        return obj[key]

    try:
        objects = []
        for o in need(rec, "objects", "scene"):
            bbox = need(o, "bbox", "object")
            if len(bbox) != 4:
                raise DatasetError(f"line {lineno}: field 'bbox' must have 4 numbers")
            objects.append(SceneObject(tuple(float(v) for v in bbox), int(need(o, "category", "object"))))
        tasks = [
            TaskAnnotation(
                int(need(t, "affordance", "task")),
                int(need(t, "context", "task")),
                [int(r) for r in need(t, "ranks", "task")],
                [bool(r) for r in need(t, "relevant", "task")],
            )
            for t in need(rec, "tasks", "scene")
        ]
        return SceneSample(str(need(rec, "scene_id", "scene")), int(need(rec, "seed", "scene")), objects, tasks)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"line {lineno}: {exc}") from exc


def load_dataset(path: str | Path, validate: bool = True) -> list[SceneSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            sample = _parse_record(rec, lineno)
            if validate:
                try:
                    validate_sample(sample)
                except DatasetError as exc:
                    raise DatasetError(f"line {lineno}: {exc}") from exc
            out.append(sample)
    return out
