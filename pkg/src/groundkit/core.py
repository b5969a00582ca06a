"""Domain types, dataset invariants, and the on-disk dataset formats.

A dataset lives in two files:

- ``<name>.jsonl`` -- UTF-8 JSON lines.  Line 1 is a header object
  ``{"format_version", "d_vis", "objectness_threshold", "max_context_objects"}``;
  every following line is one sample.
- ``<name>.cgf`` -- the companion binary feature file (little-endian).
  Layout: magic ``CGF1``, ``u32 d_vis``, then per region in file order:
  ``u32`` byte length of sample_id, sample_id bytes, ``u32`` region ordinal,
  ``d_vis`` float32 values.  Region ordinals enumerate persons first, then
  context objects, in their stored order.

Feature vectors are float32 and round-trip bitwise; everything numeric in the
JSON side is plain floats/ints.  All records are read-only after load.
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

FORMAT_VERSION = 1
FEATURE_MAGIC = b"CGF1"
DEFAULT_OBJECTNESS_THRESHOLD = 0.2
DEFAULT_MAX_CONTEXT_OBJECTS = 100

MIN_PERSONS = 2
MAX_PERSONS = 10


class DataError(Exception):
    """Malformed files, invariant violations, or inconsistent records."""


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise DataError(message)


# ---------------------------------------------------------------------------
# geometry-bearing records


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel space; coordinates are half-open reals."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        _require(all(np.isfinite(c) for c in coords), f"non-finite box coordinate in {coords}")
        _require(min(coords) >= 0, f"negative box coordinate in {coords}")
        _require(self.x2 > self.x1, f"degenerate box: x2 <= x1 ({self.x1}, {self.x2})")
        _require(self.y2 > self.y1, f"degenerate box: y2 <= y1 ({self.y1}, {self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass
class PersonBox:
    """A candidate person region: its box plus the precomputed feature row."""

    index: int
    box: BoundingBox
    feature: np.ndarray

    def __post_init__(self) -> None:
        self.feature = np.asarray(self.feature, dtype=np.float32)
        _require(self.feature.ndim == 1, "person feature must be a 1-d vector")


@dataclass
class ContextObject:
    """An extra detected region with objectness score and detector class."""

    box: BoundingBox
    feature: np.ndarray
    objectness: float
    class_name: str

    def __post_init__(self) -> None:
        self.feature = np.asarray(self.feature, dtype=np.float32)
        _require(self.feature.ndim == 1, "object feature must be a 1-d vector")
        _require(0.0 <= self.objectness <= 1.0, f"objectness {self.objectness} outside [0, 1]")
        _require(bool(self.class_name), "context object needs a class name")


@dataclass
class ImageRecord:
    image_id: str
    width: int
    height: int
    persons: list[PersonBox]
    context_objects: list[ContextObject] = field(default_factory=list)

    @property
    def n_persons(self) -> int:
        return len(self.persons)

    def validate(self, header: "DatasetHeader | None" = None) -> None:
        _require(self.width > 0 and self.height > 0, f"{self.image_id}: non-positive image size")
        _require(bool(self.persons), f"{self.image_id}: image has no person boxes")
        for pos, person in enumerate(self.persons):
            _require(person.index == pos,
                     f"{self.image_id}: person indices not consecutive at position {pos}")
            _check_box_inside(person.box, self.width, self.height, self.image_id)
        for obj in self.context_objects:
            _check_box_inside(obj.box, self.width, self.height, self.image_id)
        if header is not None:
            for obj in self.context_objects:
                _require(obj.objectness >= header.objectness_threshold,
                         f"{self.image_id}: objectness {obj.objectness} below declared "
                         f"threshold {header.objectness_threshold}")
            _require(len(self.context_objects) <= header.max_context_objects,
                     f"{self.image_id}: {len(self.context_objects)} context objects exceed "
                     f"declared cap {header.max_context_objects}")


def _check_box_inside(box: BoundingBox, width: float, height: float, owner: str) -> None:
    _require(box.x2 <= width, f"{owner}: box x2={box.x2} exceeds image width {width}")
    _require(box.y2 <= height, f"{owner}: box y2={box.y2} exceeds image height {height}")


# ---------------------------------------------------------------------------
# text tokens


@dataclass(frozen=True)
class Word:
    text: str

    def __post_init__(self) -> None:
        _require(bool(self.text), "empty word token")


@dataclass(frozen=True)
class PersonLink:
    link_id: int


@dataclass(frozen=True)
class ObjectLink:
    """Raw object-region mention; only legal in pre-pipeline records."""

    region_id: int
    class_name: str


Token = Union[Word, PersonLink, ObjectLink]


@dataclass
class Description:
    tokens: list[Token]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def link_ids(self) -> list[int]:
        """Distinct person-link ids in order of first appearance."""
        seen: list[int] = []
        for tok in self.tokens:
            if isinstance(tok, PersonLink) and tok.link_id not in seen:
                seen.append(tok.link_id)
        return seen

    @property
    def num_links(self) -> int:
        return len(self.link_ids)

    def has_object_links(self) -> bool:
        return any(isinstance(t, ObjectLink) for t in self.tokens)

    def words(self) -> list[str]:
        return [t.text for t in self.tokens if isinstance(t, Word)]


def has_tied_links(tokens: Sequence[Token]) -> bool:
    """True when two person links are joined by a bare "and"/"or".

    Such links are syntactically exchangeable, which makes the grounding
    labels ambiguous, so finished samples must not contain the pattern.
    """
    for i in range(len(tokens) - 2):
        a, b, c = tokens[i], tokens[i + 1], tokens[i + 2]
        if (isinstance(a, PersonLink) and isinstance(c, PersonLink)
                and isinstance(b, Word) and b.text.lower() in ("and", "or")):
            return True
    return False


@dataclass
class GroundingLabel:
    """Map from person-link id to the ground-truth person index."""

    pairs: dict[int, int]

    def __getitem__(self, link_id: int) -> int:
        return self.pairs[link_id]

    def __len__(self) -> int:
        return len(self.pairs)


class CommonsenseType(str, Enum):
    CAUSAL = "causal"
    ACTIVITY = "activity"
    TEMPORAL = "temporal"
    MENTAL = "mental"
    SPATIAL = "spatial"
    ATTRIBUTE = "attribute"
    OTHER = "other"


@dataclass
class Sample:
    sample_id: str
    image: ImageRecord
    description: Description
    labels: GroundingLabel
    commonsense_type: CommonsenseType

    def validate(self, header: "DatasetHeader | None" = None, strict: bool = True) -> None:
        """Check structural invariants; with ``strict`` also the pipeline filters.

        Structural problems (bad boxes, label out of range, missing labels)
        always raise.  Filter-level conditions (person count bounds, tied
        links, no links at all) only raise in strict mode, so that pre-filter
        material can still be moved through the pipeline.
        """
        sid = self.sample_id
        self.image.validate(header)
        n = self.image.n_persons
        link_ids = self.description.link_ids
        _require(set(self.labels.pairs) == set(link_ids),
                 f"{sid}: labels {sorted(self.labels.pairs)} do not match "
                 f"description links {link_ids}")
        for link_id, idx in self.labels.pairs.items():
            _require(0 <= idx < n, f"{sid}: label out of range (link {link_id} -> {idx}, N={n})")
        if header is not None:
            for person in self.image.persons:
                _require(person.feature.shape == (header.d_vis,),
                         f"{sid}: person {person.index} feature length "
                         f"{person.feature.shape[0]} != d_vis {header.d_vis}")
            for pos, obj in enumerate(self.image.context_objects):
                _require(obj.feature.shape == (header.d_vis,),
                         f"{sid}: context object {pos} feature length "
                         f"{obj.feature.shape[0]} != d_vis {header.d_vis}")
        if strict:
            _require(not self.description.has_object_links(),
                     f"{sid}: finished sample still contains object links")
            _require(len(link_ids) >= 1, f"{sid}: no person link in description")
            _require(MIN_PERSONS <= n <= MAX_PERSONS,
                     f"{sid}: person count {n} outside [{MIN_PERSONS}, {MAX_PERSONS}]")
            _require(not has_tied_links(self.description.tokens), f"{sid}: tied person links")


@dataclass
class Prediction:
    """Per-link score vector over the N candidate persons plus the argmax."""

    scores: dict[int, np.ndarray]
    chosen: dict[int, int]

    @classmethod
    def from_scores(cls, scores: Mapping[int, np.ndarray]) -> "Prediction":
        # np.argmax returns the first maximum, which is the lowest index.
        chosen = {link: int(np.argmax(vec)) for link, vec in scores.items()}
        return cls(scores=dict(scores), chosen=chosen)


# ---------------------------------------------------------------------------
# serialization


@dataclass(frozen=True)
class DatasetHeader:
    d_vis: int
    objectness_threshold: float = DEFAULT_OBJECTNESS_THRESHOLD
    max_context_objects: int = DEFAULT_MAX_CONTEXT_OBJECTS
    format_version: int = FORMAT_VERSION


def feature_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".cgf")


def token_to_json(token: Token) -> object:
    if isinstance(token, Word):
        return token.text
    if isinstance(token, PersonLink):
        return {"person": token.link_id}
    return {"object": token.region_id, "class": token.class_name}


def token_from_json(obj: object, where: str) -> Token:
    if isinstance(obj, str):
        return Word(obj)
    if isinstance(obj, dict):
        if "person" in obj:
            return PersonLink(int(obj["person"]))
        if "object" in obj:
            return ObjectLink(int(obj["object"]), str(obj.get("class", "")))
    raise DataError(f"{where}: unrecognized token {obj!r}")


def image_to_json(image: ImageRecord) -> dict:
    return {
        "image_id": image.image_id,
        "width": image.width,
        "height": image.height,
        "persons": [
            {"x1": p.box.x1, "y1": p.box.y1, "x2": p.box.x2, "y2": p.box.y2}
            for p in image.persons
        ],
        "context_objects": [
            {"x1": o.box.x1, "y1": o.box.y1, "x2": o.box.x2, "y2": o.box.y2,
             "objectness": o.objectness, "class_name": o.class_name}
            for o in image.context_objects
        ],
    }


def image_from_json(obj: dict, features: list[np.ndarray], where: str) -> ImageRecord:
    try:
        persons_raw = obj["persons"]
        objects_raw = obj.get("context_objects", [])
        n_regions = len(persons_raw) + len(objects_raw)
        _require(len(features) == n_regions,
                 f"{where}: {n_regions} regions but {len(features)} feature rows")
        persons = [
            PersonBox(index=i,
                      box=BoundingBox(b["x1"], b["y1"], b["x2"], b["y2"]),
                      feature=features[i])
            for i, b in enumerate(persons_raw)
        ]
        objects = [
            ContextObject(box=BoundingBox(b["x1"], b["y1"], b["x2"], b["y2"]),
                          feature=features[len(persons_raw) + j],
                          objectness=float(b["objectness"]),
                          class_name=str(b["class_name"]))
            for j, b in enumerate(objects_raw)
        ]
        return ImageRecord(image_id=str(obj["image_id"]), width=int(obj["width"]),
                           height=int(obj["height"]), persons=persons,
                           context_objects=objects)
    except KeyError as exc:
        raise DataError(f"{where}: missing image field {exc}") from None


def sample_to_json(sample: Sample) -> dict:
    return {
        "sample_id": sample.sample_id,
        "image": image_to_json(sample.image),
        "tokens": [token_to_json(t) for t in sample.description.tokens],
        "labels": {str(k): v for k, v in sorted(sample.labels.pairs.items())},
        "commonsense_type": sample.commonsense_type.value,
    }


def sample_from_json(obj: dict, features: list[np.ndarray], where: str) -> Sample:
    try:
        image = image_from_json(obj["image"], features, where)
        tokens = [token_from_json(t, where) for t in obj["tokens"]]
        labels = {int(k): int(v) for k, v in obj["labels"].items()}
        ctype = CommonsenseType(obj["commonsense_type"])
    except KeyError as exc:
        raise DataError(f"{where}: missing sample field {exc}") from None
    except ValueError as exc:
        raise DataError(f"{where}: {exc}") from None
    return Sample(sample_id=str(obj["sample_id"]), image=image,
                  description=Description(tokens), labels=GroundingLabel(labels),
                  commonsense_type=ctype)


def _json_line(obj: dict) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def sample_features(sample: Sample) -> list[np.ndarray]:
    """Feature rows in region-ordinal order: persons first, then objects."""
    rows = [p.feature for p in sample.image.persons]
    rows += [o.feature for o in sample.image.context_objects]
    return rows


def write_feature_file(path: str | Path,
                       d_vis: int,
                       rows: Iterable[tuple[str, int, np.ndarray]]) -> None:
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", d_vis))
        for sample_id, ordinal, vec in rows:
            vec = np.ascontiguousarray(vec, dtype="<f4")
            if vec.shape != (d_vis,):
                raise DataError(f"{sample_id}: feature row of length {vec.shape[0]}, "
                                f"expected d_vis={d_vis}")
            sid = sample_id.encode("utf-8")
            fh.write(struct.pack("<I", len(sid)))
            fh.write(sid)
            fh.write(struct.pack("<I", ordinal))
            fh.write(vec.tobytes())


def read_feature_file(path: str | Path) -> tuple[int, dict[str, dict[int, np.ndarray]]]:
    """Return (d_vis, {sample_id: {ordinal: float32 vector}})."""
    blob = Path(path).read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: bad feature-file magic {blob[:4]!r}")
    off = 4
    try:
        (d_vis,) = struct.unpack_from("<I", blob, off)
        off += 4
        table: dict[str, dict[int, np.ndarray]] = {}
        while off < len(blob):
            (sid_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            sid = blob[off:off + sid_len].decode("utf-8")
            off += sid_len
            (ordinal,) = struct.unpack_from("<I", blob, off)
            off += 4
            vec = np.frombuffer(blob, dtype="<f4", count=d_vis, offset=off).copy()
            if vec.shape != (d_vis,):
                raise DataError(f"{path}: truncated feature row for {sid}")
            off += 4 * d_vis
            table.setdefault(sid, {})[ordinal] = vec
    except (struct.error, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: corrupt feature file ({exc})") from None
    return d_vis, table


def write_dataset(samples: Sequence[Sample], path: str | Path,
                  header: DatasetHeader | None = None) -> None:
    """Write samples plus their companion feature file.

    Every sample is validated before anything touches the disk; an invalid
    input therefore leaves no partial output behind.
    """
    if header is None:
        d_vis = len(samples[0].image.persons[0].feature) if samples else 0
        header = DatasetHeader(d_vis=d_vis)
    for sample in samples:
        sample.validate(header)

    path = Path(path)
    lines = [_json_line({
        "format_version": header.format_version,
        "d_vis": header.d_vis,
        "objectness_threshold": header.objectness_threshold,
        "max_context_objects": header.max_context_objects,
    })]
    lines += [_json_line(sample_to_json(s)) for s in samples]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    def rows():
        for s in samples:
            for ordinal, vec in enumerate(sample_features(s)):
                yield s.sample_id, ordinal, vec

    write_feature_file(feature_path(path), header.d_vis, rows())


def read_header(path: str | Path) -> DatasetHeader:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    return _parse_header(first, path)


def _parse_header(line: str, path: str | Path) -> DatasetHeader:
    try:
        obj = json.loads(line)
        return DatasetHeader(d_vis=int(obj["d_vis"]),
                             objectness_threshold=float(obj["objectness_threshold"]),
                             max_context_objects=int(obj["max_context_objects"]),
                             format_version=int(obj["format_version"]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}:1: bad dataset header ({exc})") from None


def read_dataset(path: str | Path, strict: bool = True) -> list[Sample]:
    """Load a dataset; raises DataError naming the offending line or sample.

    ``strict=False`` skips the pipeline-filter invariants so that pre-filter
    material can be loaded for the ``filter`` stage; structural invariants
    (boxes, labels in range, feature dimensions) are always enforced.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such dataset file")
    fpath = feature_path(path)
    if not fpath.exists():
        raise DataError(f"{fpath}: companion feature file missing")
    feat_d_vis, table = read_feature_file(fpath)

    samples: list[Sample] = []
    with open(path, encoding="utf-8") as fh:
        header: DatasetHeader | None = None
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            if header is None:
                header = _parse_header(line, path)
                _require(header.d_vis == feat_d_vis,
                         f"{path}: header d_vis {header.d_vis} != feature file "
                         f"d_vis {feat_d_vis}")
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            where = f"{path}:{lineno}"
            sid = str(obj.get("sample_id", f"<line {lineno}>"))
            per_sample = table.get(sid, {})
            n_regions = len(per_sample)
            _require(set(per_sample) == set(range(n_regions)),
                     f"{where}: feature ordinals for {sid} are not consecutive")
            features = [per_sample[i] for i in range(n_regions)]
            sample = sample_from_json(obj, features, where)
            sample.validate(header, strict=strict)
            samples.append(sample)
    _require(header is not None, f"{path}: empty file, missing header")
    return samples


# ---------------------------------------------------------------------------
# statistics


@dataclass
class DatasetStats:
    n_samples: int
    n_images: int
    n_links: int
    mean_tokens: float | None
    mean_persons_per_image: float | None
    mean_links_per_description: float | None
    type_histogram: dict[str, int]

    def to_json(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_images": self.n_images,
            "n_links": self.n_links,
            "mean_tokens": self.mean_tokens,
            "mean_persons_per_image": self.mean_persons_per_image,
            "mean_links_per_description": self.mean_links_per_description,
            "type_histogram": dict(sorted(self.type_histogram.items())),
        }


def dataset_stats(samples: Sequence[Sample]) -> DatasetStats:
    """Corpus-level counts; permutation-invariant over the sample list."""
    hist = Counter(s.commonsense_type.value for s in samples)
    images: dict[str, int] = {}
    for s in samples:
        images.setdefault(s.image.image_id, s.image.n_persons)
    n_links = sum(len(s.labels) for s in samples)
    n = len(samples)
    return DatasetStats(
        n_samples=n,
        n_images=len(images),
        n_links=n_links,
        mean_tokens=(sum(len(s.description) for s in samples) / n) if n else None,
        mean_persons_per_image=(sum(images.values()) / len(images)) if images else None,
        mean_links_per_description=(n_links / n) if n else None,
        type_histogram=dict(hist),
    )
