"""Heuristic baselines, the accuracy metric, result tables, and synthetic scenes.

The synthetic generator places ground truth independently of box geometry,
so every geometry-only heuristic sits at chance (the mean of 1/N over the
set) while a model that reads the features and context objects can solve it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import (
    BoundingBox,
    CommonsenseType,
    ContextObject,
    DataError,
    Description,
    GroundingLabel,
    ImageRecord,
    PersonBox,
    PersonLink,
    Prediction,
    Sample,
    Word,
)
from .geometry import iou

# ---------------------------------------------------------------------------
# heuristic baselines


@dataclass
class Assignment:
    """One chosen person index per link id."""

    choices: dict[int, int]


def _stable_rng(seed: int, tag: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{tag}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def baseline_random(sample: Sample, seed: int = 0) -> Assignment:
    rng = _stable_rng(seed, sample.sample_id)
    n = sample.image.n_persons
    return Assignment({link: int(rng.integers(n)) for link in sample.description.link_ids})


def _assign_in_order(link_ids: Sequence[int], ordered_boxes: Sequence[int]) -> Assignment:
    # Links beyond the candidate count wrap around cyclically.
    return Assignment({
        link: ordered_boxes[i % len(ordered_boxes)] for i, link in enumerate(link_ids)
    })


def baseline_big_to_small(sample: Sample) -> Assignment:
    """Links in description order onto boxes sorted by decreasing area."""
    persons = sample.image.persons
    order = sorted(range(len(persons)), key=lambda i: (-persons[i].box.area, i))
    return _assign_in_order(sample.description.link_ids, order)


def baseline_left_to_right(sample: Sample, top_k_only: bool = False) -> Assignment:
    """Links onto boxes sorted by upper-left corner (x1, then y1, then index).

    With ``top_k_only`` the candidate set is first cut to the k largest boxes
    by area, where k is the number of links in the description.
    """
    persons = sample.image.persons
    candidates = list(range(len(persons)))
    link_ids = sample.description.link_ids
    if top_k_only:
        by_area = sorted(candidates, key=lambda i: (-persons[i].box.area, i))
        candidates = by_area[:max(1, min(len(link_ids), len(candidates)))]
    candidates.sort(key=lambda i: (persons[i].box.x1, persons[i].box.y1, i))
    return _assign_in_order(link_ids, candidates)


BASELINES = {
    "random": lambda sample, seed: baseline_random(sample, seed),
    "big_to_small": lambda sample, seed: baseline_big_to_small(sample),
    "left_to_right": lambda sample, seed: baseline_left_to_right(sample),
    "left_to_right_biggest": lambda sample, seed: baseline_left_to_right(sample, top_k_only=True),
}


def run_baseline(name: str, samples: Sequence[Sample], seed: int = 0) -> list[Assignment]:
    if name not in BASELINES:
        raise DataError(f"unknown baseline {name!r}; choose from {sorted(BASELINES)}")
    fn = BASELINES[name]
    return [fn(s, seed) for s in samples]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Bucket:
    correct: int = 0
    total: int = 0

    @property
    def accuracy(self) -> float | None:
        return self.correct / self.total if self.total else None

    def to_json(self) -> dict:
        return {"correct": self.correct, "total": self.total, "accuracy": self.accuracy}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Bucket":
        return cls(correct=int(obj["correct"]), total=int(obj["total"]))


@dataclass
class EvalReport:
    overall: Bucket = field(default_factory=Bucket)
    by_type: dict[str, Bucket] = field(default_factory=dict)
    by_n: dict[int, Bucket] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "overall": self.overall.to_json(),
            "by_type": {k: v.to_json() for k, v in sorted(self.by_type.items())},
            "by_n": {str(k): v.to_json() for k, v in sorted(self.by_n.items())},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "EvalReport":
        return cls(
            overall=Bucket.from_json(obj["overall"]),
            by_type={k: Bucket.from_json(v) for k, v in obj["by_type"].items()},
            by_n={int(k): Bucket.from_json(v) for k, v in obj["by_n"].items()},
        )


def _choices_of(prediction: "Assignment | Prediction | Mapping[int, int]") -> Mapping[int, int]:
    if isinstance(prediction, Assignment):
        return prediction.choices
    if isinstance(prediction, Prediction):
        return prediction.chosen
    return prediction


def evaluate(predictions: Sequence["Assignment | Prediction | Mapping[int, int]"],
             samples: Sequence[Sample]) -> EvalReport:
    """Link-level accuracy with commonsense-type and person-count breakdowns."""
    if len(predictions) != len(samples):
        raise DataError(f"{len(predictions)} predictions for {len(samples)} samples")
    report = EvalReport()
    for pred, sample in zip(predictions, samples):
        choices = _choices_of(pred)
        n = sample.image.n_persons
        tname = sample.commonsense_type.value
        type_bucket = report.by_type.setdefault(tname, Bucket())
        n_bucket = report.by_n.setdefault(n, Bucket())
        for link_id, gt in sample.labels.pairs.items():
            if link_id not in choices:
                raise DataError(f"{sample.sample_id}: no prediction for link {link_id}")
            hit = int(choices[link_id] == gt)
            for bucket in (report.overall, type_bucket, n_bucket):
                bucket.correct += hit
                bucket.total += 1
    return report


def expected_chance(samples: Sequence[Sample]) -> float:
    """Link-weighted mean of 1/N: accuracy of any geometry-blind assignment."""
    num = sum(len(s.labels) / s.image.n_persons for s in samples)
    den = sum(len(s.labels) for s in samples)
    return num / den


# ---------------------------------------------------------------------------
# result tables


def render_table(named_reports: Sequence[tuple[str, EvalReport]]) -> tuple[str, list[dict]]:
    """Aligned text table plus a JSON-ready payload, rows in the given order."""
    if not named_reports:
        raise DataError("render_table needs at least one report")
    type_names = sorted({t for _, r in named_reports for t in r.by_type})
    headers = ["model", "accuracy", "correct", "total"] + [f"acc[{t}]" for t in type_names]
    rows = []
    payload = []
    for name, report in named_reports:
        acc = report.overall.accuracy
        row = [name,
               f"{acc:.4f}" if acc is not None else "-",
               str(report.overall.correct), str(report.overall.total)]
        for t in type_names:
            bucket = report.by_type.get(t)
            row.append(f"{bucket.accuracy:.4f}" if bucket and bucket.accuracy is not None else "-")
        rows.append(row)
        payload.append({"name": name, "report": report.to_json()})
    widths = [max(len(headers[i]), *(len(r[i]) for r in rows)) for i in range(len(headers))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*headers), fmt.format(*["-" * w for w in widths])]
    lines += [fmt.format(*row) for row in rows]
    return "\n".join(lines), payload


# ---------------------------------------------------------------------------
# synthetic scenes


ATTRIBUTES = ("red", "blue", "green", "yellow", "purple", "orange", "silver", "golden")
OBJECT_CLASSES = ("dog", "cup", "guitar", "ball", "book", "hat", "bag", "phone")

# feature layout: [0] person flag, [1:1+A] attribute one-hot,
# [1+A:1+A+C] object-class one-hot, remainder noise-only
_ATTR_OFFSET = 1
_CLASS_OFFSET = _ATTR_OFFSET + len(ATTRIBUTES)
MIN_D_VIS = _CLASS_OFFSET + len(OBJECT_CLASSES)


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int
    max_persons: int = 5
    d_vis: int = 32
    context_rate: float = 0.5
    seed: int = 0
    width: int = 640
    height: int = 480
    t1: float = 0.3
    t2: float = 0.1
    noise: float = 0.05
    # pooled-ROI behavior: an object overlapping a person leaves a faint
    # class imprint on that person's feature vector (crops overlap);
    # imprint_rate < 1 would leave some scenes readable only through the
    # object tokens
    imprint: float = 0.4
    imprint_rate: float = 1.0

    def __post_init__(self) -> None:
        if not 2 <= self.max_persons <= 10:
            raise ValueError("max_persons must lie in [2, 10]")
        if self.d_vis < MIN_D_VIS:
            raise ValueError(f"d_vis must be >= {MIN_D_VIS}")
        if not 0.0 <= self.context_rate <= 1.0:
            raise ValueError("context_rate must lie in [0, 1]")


def _disjoint(box: BoundingBox, others: Sequence[BoundingBox]) -> bool:
    return all(iou(box, other) == 0.0 for other in others)


def _place_persons(rng: np.random.Generator, cfg: SynthConfig, n: int) -> list[BoundingBox]:
    boxes: list[BoundingBox] = []
    for _ in range(n):
        for _attempt in range(200):
            w = float(rng.uniform(80, 150))
            h = float(rng.uniform(100, 180))
            x1 = float(rng.uniform(0, cfg.width - w))
            y1 = float(rng.uniform(0, cfg.height - h))
            box = BoundingBox(x1, y1, x1 + w, y1 + h)
            if _disjoint(box, boxes):
                boxes.append(box)
                break
        else:
            raise DataError("could not place disjoint person boxes after 200 attempts")
    return boxes


def _inner_box(rng: np.random.Generator, outer: BoundingBox) -> BoundingBox:
    # A concentric sub-box with area ratio s^2 in (t1, ~0.72]; being fully
    # inside the (disjoint) person box keeps IoU with every other person at 0.
    s = float(rng.uniform(0.65, 0.85))
    w = outer.width * s
    h = outer.height * s
    cx = outer.x1 + outer.width / 2 + float(rng.uniform(-0.05, 0.05)) * outer.width
    cy = outer.y1 + outer.height / 2 + float(rng.uniform(-0.05, 0.05)) * outer.height
    x1 = min(max(cx - w / 2, outer.x1), outer.x2 - w)
    y1 = min(max(cy - h / 2, outer.y1), outer.y2 - h)
    return BoundingBox(x1, y1, x1 + w, y1 + h)


def _background_box(rng: np.random.Generator, cfg: SynthConfig) -> BoundingBox:
    # Small enough that IoU against any person box stays below the selection
    # threshold (decoys are scene clutter, not context tied to a person).
    w = float(rng.uniform(24, 40))
    h = float(rng.uniform(24, 40))
    x1 = float(rng.uniform(0, cfg.width - w))
    y1 = float(rng.uniform(0, cfg.height - h))
    return BoundingBox(x1, y1, x1 + w, y1 + h)


def _person_feature(rng: np.random.Generator, cfg: SynthConfig, attr_idx: int) -> np.ndarray:
    vec = rng.normal(0.0, cfg.noise, cfg.d_vis)
    vec[0] += 1.0
    vec[_ATTR_OFFSET + attr_idx] += 1.0
    return vec.astype(np.float32)


def _object_feature(rng: np.random.Generator, cfg: SynthConfig, class_idx: int) -> np.ndarray:
    vec = rng.normal(0.0, cfg.noise, cfg.d_vis)
    vec[_CLASS_OFFSET + class_idx] += 1.0
    return vec.astype(np.float32)


def synth_generate(config: SynthConfig) -> list[Sample]:
    """Deterministic synthetic grounding scenes.

    Attribute scenes: the target person's color attribute is unique in the
    image and is named in the description.  Context scenes: the description
    names an object class; the single object of that class sits inside the
    target person's box (IoU above t1 with the target, 0 with everyone
    else), and person features are uninformative about the answer.
    """
    rng = np.random.default_rng(config.seed)
    samples: list[Sample] = []
    for i in range(config.n_samples):
        n = int(rng.integers(2, config.max_persons + 1))
        boxes = _place_persons(rng, config, n)
        gt = int(rng.integers(n))
        context_driven = bool(rng.random() < config.context_rate)

        if context_driven:
            attr_ids = [int(a) for a in rng.integers(0, len(ATTRIBUTES), n)]
        else:
            gt_attr = int(rng.integers(len(ATTRIBUTES)))
            rest = [a for a in range(len(ATTRIBUTES)) if a != gt_attr]
            attr_ids = [int(rng.choice(rest)) for _ in range(n)]
            attr_ids[gt] = gt_attr
        persons = [
            PersonBox(index=j, box=boxes[j], feature=_person_feature(rng, config, attr_ids[j]))
            for j in range(n)
        ]

        objects: list[ContextObject] = []
        cue_class = None
        if context_driven:
            cue_class = int(rng.integers(len(OBJECT_CLASSES)))
            objects.append(ContextObject(
                box=_inner_box(rng, boxes[gt]),
                feature=_object_feature(rng, config, cue_class),
                objectness=float(rng.uniform(0.2, 1.0)),
                class_name=OBJECT_CLASSES[cue_class]))
        n_decoys = int(rng.integers(1, 4))
        for _ in range(n_decoys):
            # decoys never reuse the cue class, so the described object
            # stays unique and the answer unambiguous
            allowed = [c for c in range(len(OBJECT_CLASSES)) if c != cue_class]
            cls_idx = int(rng.choice(allowed))
            objects.append(ContextObject(
                box=_background_box(rng, config),
                feature=_object_feature(rng, config, cls_idx),
                objectness=float(rng.uniform(0.2, 1.0)),
                class_name=OBJECT_CLASSES[cls_idx]))

        # region crops overlap, so an object sitting on a person usually
        # bleeds a faint trace of its class into that person's pooled feature
        if float(rng.random()) < config.imprint_rate:
            for obj in objects:
                cls_idx = OBJECT_CLASSES.index(obj.class_name)
                for person in persons:
                    if iou(obj.box, person.box) > config.t1:
                        person.feature[_CLASS_OFFSET + cls_idx] += config.imprint

        if context_driven:
            tokens = [PersonLink(1), Word("next"), Word("to"), Word("the"),
                      Word(OBJECT_CLASSES[cue_class]), Word("feels"), Word("upset")]
            ctype = CommonsenseType.SPATIAL
        else:
            tokens = [PersonLink(1), Word("who"), Word("is"),
                      Word(ATTRIBUTES[attr_ids[gt]]), Word("will"), Word("leave")]
            ctype = CommonsenseType.ATTRIBUTE

        samples.append(Sample(
            sample_id=f"synth-{i:06d}",
            image=ImageRecord(image_id=f"img-{i:06d}", width=config.width,
                              height=config.height, persons=persons,
                              context_objects=objects),
            description=Description(tokens),
            labels=GroundingLabel({1: gt}),
            commonsense_type=ctype,
        ))
    return samples
