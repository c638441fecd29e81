"""Benchmark item generation and scoring for option-based image QA.

Measurement tasks are discretized into contiguous half-open value bins, one
of which contains the ground truth; classification tasks become either a
multiple-choice question over the class inventory or a balanced yes/no
question. Scoring reports per-family accuracy and macro-F1 plus overall
aggregates.
"""

import json
import random
from dataclasses import dataclass, field

from .core import TaskKind, Unit
from .errors import MissingLabel, UnknownItemId

# half-open bin widths per measurement family
BIN_INTERVALS = {
    TaskKind.HC: 10.0,
    TaskKind.AC: 10.0,
    TaskKind.AOP: 10.0,
    TaskKind.STOMACH_SEG: 1.0,
    TaskKind.GA: 2.0,
}

PLANE_CLASSES = ("head", "abdomen", "femur", "thorax")
BRAIN_CLASSES = ("trans-thalamic", "trans-ventricular", "trans-cerebellar")

# (family id, task, item style, option count)
TASK_FAMILIES = (
    (1, TaskKind.AC, "interval", 4),
    (2, TaskKind.AOP, "interval", 2),
    (3, TaskKind.BRAIN_SUBPLANE, "binary", 2),
    (4, TaskKind.BRAIN_SUBPLANE, "choice", 3),
    (5, TaskKind.STANDARD_PLANE, "binary", 2),
    (6, TaskKind.STANDARD_PLANE, "choice", 4),
    (7, TaskKind.GA, "interval", 2),
    (8, TaskKind.GA, "interval", 3),
    (9, TaskKind.HC, "interval", 4),
    (10, TaskKind.STOMACH_SEG, "interval", 4),
)

QUESTION_TEXT = {
    TaskKind.AC: "What is the abdominal circumference?",
    TaskKind.AOP: "What is the angle of progression?",
    TaskKind.GA: "What is the gestational age in weeks?",
    TaskKind.HC: "What is the head circumference?",
    TaskKind.STOMACH_SEG: "What is the stomach area?",
    TaskKind.BRAIN_SUBPLANE: "Which cranial plane is shown?",
    TaskKind.STANDARD_PLANE: "Which standard plane best describes this image?",
}

CLASS_INVENTORY = {
    TaskKind.STANDARD_PLANE: PLANE_CLASSES,
    TaskKind.BRAIN_SUBPLANE: BRAIN_CLASSES,
}

_PLANE_WORD = {TaskKind.STANDARD_PLANE: "plane", TaskKind.BRAIN_SUBPLANE: "plane"}


@dataclass(frozen=True)
class LabeledCase:
    """Ground truth for one image: a class label or a measured value."""

    image_id: str
    task: TaskKind
    label: str | None = None
    value: float | None = None
    unit: Unit | None = None


@dataclass(frozen=True)
class BenchItem:
    item_id: str
    image_id: str
    task_id: int
    question: str
    options: tuple
    answer: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "options", tuple(tuple(o) for o in self.options))
        keys = [k for k, _ in self.options]
        if self.answer not in keys:
            raise ValueError(f"answer {self.answer!r} not among option keys {keys}")

    def to_dict(self) -> dict:
        d = {
            "id": self.item_id,
            "image": self.image_id,
            "task_id": self.task_id,
            "question": self.question,
            "options": [{"key": k, "text": t} for k, t in self.options],
            "answer": self.answer,
        }
        if self.meta:
            d["meta"] = self.meta
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchItem":
        return cls(
            item_id=d["id"],
            image_id=d["image"],
            task_id=d["task_id"],
            question=d["question"],
            options=tuple((o["key"], o["text"]) for o in d["options"]),
            answer=d["answer"],
            meta=d.get("meta", {}),
        )


def _format_bound(x: float) -> str:
    return f"{x:g}"


def _unit_text(unit: Unit) -> str:
    return unit.value


def discretize_measurement(value: float, interval: float, n_options: int,
                           unit: Unit, rng: random.Random):
    """Contiguous half-open bins around the truth, seeded bin placement.

    The correct bin is [floor(v / i) * i, +i); its position among the
    `n_options` bins is random but the window never extends below zero.
    Returns (options, correct_key).
    """
    if value < 0:
        raise ValueError("measurements are non-negative")
    if interval <= 0 or n_options < 2:
        raise ValueError("need a positive interval and at least two options")
    correct_lo = (value // interval) * interval
    position = rng.randrange(n_options)
    start = correct_lo - position * interval
    if start < 0:
        start = 0.0
    position = round((correct_lo - start) / interval)
    options = []
    for i in range(n_options):
        lo = start + i * interval
        hi = lo + interval
        key = chr(ord("A") + i)
        options.append((key, f"{_format_bound(lo)}–{_format_bound(hi)} {_unit_text(unit)}"))
    return options, chr(ord("A") + position)


def _choice_item(case: LabeledCase, family_id: int, n_options: int,
                 rng: random.Random, item_id: str) -> BenchItem:
    classes = CLASS_INVENTORY[case.task]
    if case.label is None or case.label not in classes:
        raise MissingLabel(f"case {case.image_id!r} lacks a known {case.task.value} label")
    if n_options != len(classes):
        raise ValueError(f"{case.task.value} choice items carry {len(classes)} options")
    order = list(classes)
    rng.shuffle(order)
    options = tuple((chr(ord("A") + i), text) for i, text in enumerate(order))
    answer = options[order.index(case.label)][0]
    return BenchItem(item_id=item_id, image_id=case.image_id, task_id=family_id,
                     question=QUESTION_TEXT[case.task], options=options, answer=answer,
                     meta={"label": case.label})


def _binary_item(case: LabeledCase, family_id: int, positive: bool,
                 rng: random.Random, item_id: str) -> BenchItem:
    classes = CLASS_INVENTORY[case.task]
    if case.label is None or case.label not in classes:
        raise MissingLabel(f"case {case.image_id!r} lacks a known {case.task.value} label")
    if positive:
        subject = case.label
    else:
        foils = [c for c in classes if c != case.label]
        subject = foils[rng.randrange(len(foils))]
    question = f"Does this scan represent the {subject} {_PLANE_WORD[case.task]}?"
    options = (("A", "Yes"), ("B", "No"))
    answer = "A" if subject == case.label else "B"
    return BenchItem(item_id=item_id, image_id=case.image_id, task_id=family_id,
                     question=question, options=options, answer=answer,
                     meta={"label": case.label, "subject": subject})


def _interval_item(case: LabeledCase, family_id: int, n_options: int,
                   rng: random.Random, item_id: str) -> BenchItem:
    if case.value is None or case.unit is None:
        raise MissingLabel(f"case {case.image_id!r} lacks a measured value")
    options, answer = discretize_measurement(
        case.value, BIN_INTERVALS[case.task], n_options, case.unit, rng)
    return BenchItem(item_id=item_id, image_id=case.image_id, task_id=family_id,
                     question=QUESTION_TEXT[case.task], options=options, answer=answer,
                     meta={"value": case.value, "unit": case.unit.value})


def generate_vqa_items(cases, seed: int = 0, families=TASK_FAMILIES) -> list:
    """Expand labeled cases into benchmark items, one per matching family.

    Yes/no families are balanced: exactly half the items of each (rounded
    up) are positive, assigned by a seeded permutation of the case order.
    """
    rng = random.Random(seed)
    items = []
    counter = 0
    for family_id, task, style, n_options in families:
        family_cases = [c for c in cases if c.task is task]
        positives = set()
        if style == "binary":
            order = list(range(len(family_cases)))
            rng.shuffle(order)
            positives = set(order[: (len(order) + 1) // 2])
        for idx, case in enumerate(family_cases):
            counter += 1
            item_id = f"q-{counter:04d}"
            if style == "interval":
                items.append(_interval_item(case, family_id, n_options, rng, item_id))
            elif style == "choice":
                items.append(_choice_item(case, family_id, n_options, rng, item_id))
            else:
                items.append(_binary_item(case, family_id, idx in positives, rng, item_id))
    return items


def write_items_jsonl(items, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item.to_dict(), ensure_ascii=False) + "\n")


def read_items_jsonl(path: str) -> list:
    items = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                items.append(BenchItem.from_dict(json.loads(line)))
    return items


def _macro_f1(truths, preds) -> float:
    classes = sorted(set(truths))
    f1s = []
    for cls in classes:
        tp = sum(1 for t, p in zip(truths, preds) if t == cls and p == cls)
        fp = sum(1 for t, p in zip(truths, preds) if t != cls and p == cls)
        fn = sum(1 for t, p in zip(truths, preds) if t == cls and p != cls)
        denom = 2 * tp + fp + fn
        f1s.append(0.0 if denom == 0 else 2 * tp / denom)
    return sum(f1s) / len(f1s) if f1s else 0.0


def score_run(items, predictions) -> dict:
    """Per-family accuracy and macro-F1, with both overall conventions.

    `predictions` maps item ids to option keys (or is a list of
    {"item_id", "key"} records). Unknown ids raise; items without a
    prediction count as wrong and are listed under "missing".
    """
    if not items:
        raise ValueError("nothing to score")
    by_id = {item.item_id: item for item in items}
    if not isinstance(predictions, dict):
        predictions = {p["item_id"]: p["key"] for p in predictions}
    for item_id in predictions:
        if item_id not in by_id:
            raise UnknownItemId(f"prediction references unknown item {item_id!r}")

    missing = sorted(i.item_id for i in items if i.item_id not in predictions)
    per_task = {}
    family_ids = sorted({item.task_id for item in items})
    for family_id in family_ids:
        family_items = [i for i in items if i.task_id == family_id]
        truths = [i.answer for i in family_items]
        preds = [predictions.get(i.item_id, "") for i in family_items]
        correct = sum(1 for t, p in zip(truths, preds) if t == p)
        per_task[family_id] = {
            "n": len(family_items),
            "accuracy": correct / len(family_items),
            "macro_f1": _macro_f1(truths, preds),
        }
    total = len(items)
    total_correct = sum(per_task[f]["accuracy"] * per_task[f]["n"] for f in family_ids)
    return {
        "per_task": per_task,
        "overall_accuracy": sum(per_task[f]["accuracy"] for f in family_ids) / len(family_ids),
        "overall_macro_f1": sum(per_task[f]["macro_f1"] for f in family_ids) / len(family_ids),
        "overall_accuracy_item_weighted": total_correct / total,
        "n_items": total,
        "n_missing": len(missing),
        "missing": missing,
    }
