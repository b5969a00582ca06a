"""Dataset construction: declarative QA-to-statement rewriting plus filters.

Rules are written in a small text DSL, one rule per block::

    rule why_person priority 90 type causal
    match: why <AUX> <PERSON> <REST...> ?
    emit: <PERSON> <AUX> <REST...> because <ANSWER>

Pattern atoms: a bare word matches that literal (case-insensitive);
``<PERSON>`` matches one person-link token; ``<AUX>`` matches an auxiliary
verb from a closed list; ``<REST...>`` greedily captures a span of one or
more tokens.  A digit suffix (``<REST2...>``, ``<PERSON2>``) names a second
capture of the same kind.  Templates splice captured atoms by name plus
``<ANSWER>``, the full correct-answer token list.

Matching tries rules in descending priority (file order breaks ties) and
the first match wins, so a rule set is a deterministic function.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

from .core import (
    CommonsenseType,
    DataError,
    Description,
    GroundingLabel,
    ImageRecord,
    MAX_PERSONS,
    MIN_PERSONS,
    ObjectLink,
    PersonLink,
    Sample,
    Token,
    Word,
    has_tied_links,
    image_from_json,
    image_to_json,
    read_feature_file,
    sample_features,
    token_from_json,
    token_to_json,
    write_feature_file,
    feature_path,
    _json_line,
    _parse_header,
    DatasetHeader,
)

AUX_WORDS = ("is", "are", "was", "were", "will", "would", "does", "did", "can", "could")
INTERROGATIVES = ("what", "whose", "how", "where", "who", "which", "why")


# ---------------------------------------------------------------------------
# rule representation and the DSL


@dataclass(frozen=True)
class PatternAtom:
    kind: str                  # "word" | "person" | "aux" | "rest"
    name: str                  # capture name, or the literal for words


@dataclass(frozen=True)
class TemplateItem:
    kind: str                  # "word" | "ref" | "answer"
    value: str


@dataclass(frozen=True)
class Rule:
    rule_id: str
    priority: int
    commonsense_type: CommonsenseType
    pattern: tuple[PatternAtom, ...]
    template: tuple[TemplateItem, ...]

    @property
    def question_type(self) -> str:
        first = self.pattern[0]
        if first.kind == "word" and first.name in INTERROGATIVES:
            return first.name
        return "other"


@dataclass
class RuleSet:
    rules: list[Rule]

    def __post_init__(self) -> None:
        ids = [r.rule_id for r in self.rules]
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise DataError(f"duplicate rule ids: {sorted(dupes)}")
        # descending priority; file order breaks ties
        self._ordered = sorted(range(len(self.rules)),
                               key=lambda i: (-self.rules[i].priority, i))
        self.by_id = {r.rule_id: r for r in self.rules}

    def ordered(self) -> list[Rule]:
        return [self.rules[i] for i in self._ordered]

    @property
    def type_mapping(self) -> dict[str, CommonsenseType]:
        return {r.rule_id: r.commonsense_type for r in self.rules}


_ATOM_RE = re.compile(r"<([A-Z]+)(\d*)(\.\.\.)?>$")


def _parse_pattern_atom(text: str, where: str) -> PatternAtom:
    m = _ATOM_RE.match(text)
    if not m:
        return PatternAtom("word", text.lower())
    base, suffix, dots = m.groups()
    name = base + suffix
    if base == "PERSON" and not dots:
        return PatternAtom("person", name)
    if base == "AUX" and not dots:
        return PatternAtom("aux", name)
    if base == "REST" and dots:
        return PatternAtom("rest", name)
    raise DataError(f"{where}: unknown pattern atom {text!r}")


def _parse_template_item(text: str, captures: set[str], where: str) -> TemplateItem:
    m = _ATOM_RE.match(text)
    if not m:
        return TemplateItem("word", text)
    base, suffix, dots = m.groups()
    name = base + suffix
    if base == "ANSWER" and not dots:
        return TemplateItem("answer", "ANSWER")
    if name in captures:
        return TemplateItem("ref", name)
    raise DataError(f"{where}: template placeholder <{name}> names no captured atom")


def parse_rules(text: str, origin: str = "<rules>") -> RuleSet:
    rules: list[Rule] = []
    header: Optional[tuple[str, int, CommonsenseType]] = None
    pattern: Optional[tuple[PatternAtom, ...]] = None
    header_re = re.compile(r"^rule\s+(\S+)\s+priority\s+(-?\d+)\s+type\s+(\S+)$")

    def finish(lineno: int) -> None:
        nonlocal header, pattern
        if header is None:
            return
        if pattern is None:
            raise DataError(f"{origin}:{lineno}: rule {header[0]!r} has no match: line")
        raise DataError(f"{origin}:{lineno}: rule {header[0]!r} has no emit: line")

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{origin}:{lineno}"
        if line.startswith("rule "):
            finish(lineno)
            m = header_re.match(line)
            if not m:
                raise DataError(f"{where}: expected 'rule <id> priority <n> type <type>'")
            rid, prio, tname = m.groups()
            try:
                ctype = CommonsenseType(tname.lower())
            except ValueError:
                raise DataError(f"{where}: unknown commonsense type {tname!r}") from None
            header = (rid, int(prio), ctype)
            pattern = None
        elif line.startswith("match:"):
            if header is None:
                raise DataError(f"{where}: match: before any rule header")
            atoms = tuple(_parse_pattern_atom(t, where) for t in line[6:].split())
            if not atoms:
                raise DataError(f"{where}: empty pattern")
            pattern = atoms
        elif line.startswith("emit:"):
            if header is None or pattern is None:
                raise DataError(f"{where}: emit: before rule header and match:")
            captures = {a.name for a in pattern if a.kind != "word"}
            template = tuple(_parse_template_item(t, captures, where)
                             for t in line[5:].split())
            rules.append(Rule(rule_id=header[0], priority=header[1],
                              commonsense_type=header[2], pattern=pattern,
                              template=template))
            header = None
            pattern = None
        else:
            raise DataError(f"{where}: unrecognized line {line!r}")
    finish(len(text.splitlines()) + 1)
    return RuleSet(rules)


def load_rules(path: str | Path) -> RuleSet:
    return parse_rules(Path(path).read_text(encoding="utf-8"), origin=str(path))


DEFAULT_RULES_TEXT = """\
# Default question-to-statement rewrite rules.  More specific patterns carry
# higher priority; the generic catch-alls sit at the bottom.

rule why_person priority 90 type causal
match: why <AUX> <PERSON> <REST...> ?
emit: <PERSON> <AUX> <REST...> because <ANSWER>

rule why_did_person priority 89 type causal
match: why did <PERSON> <REST...> ?
emit: <PERSON> <REST...> because <ANSWER>

rule what_doing priority 85 type activity
match: what <AUX> <PERSON> doing ?
emit: <ANSWER>

rule what_feeling priority 84 type mental
match: what <AUX> <PERSON> feeling ?
emit: <PERSON> <AUX> feeling <ANSWER>

rule what_happen_next priority 83 type temporal
match: what will happen <REST...> ?
emit: <ANSWER>

rule what_will_do priority 82 type temporal
match: what will <PERSON> do <REST...> ?
emit: <PERSON> will <ANSWER>

rule what_person priority 70 type activity
match: what <AUX> <PERSON> <REST...> ?
emit: <PERSON> <AUX> <REST...> <ANSWER>

rule what_generic priority 40 type other
match: what <REST...> ?
emit: <ANSWER>

rule whose_generic priority 65 type attribute
match: whose <REST...> ?
emit: <ANSWER>

rule how_feeling priority 75 type mental
match: how <AUX> <PERSON> feeling ?
emit: <PERSON> <AUX> feeling <ANSWER>

rule how_person priority 62 type other
match: how <AUX> <PERSON> <REST...> ?
emit: <PERSON> <AUX> <REST...> <ANSWER>

rule where_person priority 72 type spatial
match: where <AUX> <PERSON> <REST...> ?
emit: <PERSON> <AUX> <REST...> <ANSWER>

rule where_generic priority 58 type spatial
match: where <AUX> <REST...> ?
emit: <REST...> <AUX> <ANSWER>

rule who_aux priority 68 type other
match: who <AUX> <REST...> ?
emit: <ANSWER> <AUX> <REST...>

rule which_generic priority 55 type attribute
match: which <REST...> ?
emit: <ANSWER>
"""


def default_rules() -> RuleSet:
    return parse_rules(DEFAULT_RULES_TEXT, origin="<default-rules>")


# ---------------------------------------------------------------------------
# matching and transformation


@dataclass
class QAPair:
    sample_id: str
    image: ImageRecord
    question: list[Token]
    answers: list[list[Token]]
    correct_index: int
    labels: dict[int, int]

    def __post_init__(self) -> None:
        if len(self.answers) != 4:
            raise DataError(f"{self.sample_id}: expected 4 answers, got {len(self.answers)}")
        if not 0 <= self.correct_index < 4:
            raise DataError(f"{self.sample_id}: correct_index {self.correct_index} invalid")
        if not self.question:
            raise DataError(f"{self.sample_id}: empty question")

    @property
    def correct_answer(self) -> list[Token]:
        return self.answers[self.correct_index]


def _atom_matches(atom: PatternAtom, token: Token) -> bool:
    if atom.kind == "word":
        return isinstance(token, Word) and token.text.lower() == atom.name
    if atom.kind == "person":
        return isinstance(token, PersonLink)
    if atom.kind == "aux":
        return isinstance(token, Word) and token.text.lower() in AUX_WORDS
    raise AssertionError(atom.kind)


def match_pattern(pattern: Sequence[PatternAtom],
                  tokens: Sequence[Token]) -> Optional[dict[str, list[Token]]]:
    """Backtracking matcher; wildcards are greedy (longest span first)."""

    def rec(pi: int, ti: int, captures: dict[str, list[Token]]):
        if pi == len(pattern):
            return captures if ti == len(tokens) else None
        atom = pattern[pi]
        if atom.kind == "rest":
            # longest span first, at least one token
            for end in range(len(tokens), ti, -1):
                captures[atom.name] = list(tokens[ti:end])
                result = rec(pi + 1, end, captures)
                if result is not None:
                    return result
            captures.pop(atom.name, None)
            return None
        if ti < len(tokens) and _atom_matches(atom, tokens[ti]):
            if atom.kind != "word":
                captures[atom.name] = [tokens[ti]]
            return rec(pi + 1, ti + 1, captures)
        return None

    return rec(0, 0, {})


def match_rule(qa: QAPair, rules: RuleSet) -> Optional[str]:
    """Id of the highest-priority rule whose pattern matches the question."""
    for rule in rules.ordered():
        if match_pattern(rule.pattern, qa.question) is not None:
            return rule.rule_id
    return None


def transform(qa: QAPair, rule: Rule) -> list[Token]:
    """Rewrite the question plus correct answer into a statement."""
    captures = match_pattern(rule.pattern, qa.question)
    if captures is None:
        raise DataError(f"{qa.sample_id}: rule {rule.rule_id!r} does not match")
    out: list[Token] = []
    for item in rule.template:
        if item.kind == "word":
            out.append(Word(item.value))
        elif item.kind == "answer":
            out.extend(qa.correct_answer)
        else:
            if item.value not in captures:
                raise DataError(f"{qa.sample_id}: unbound placeholder <{item.value}> "
                                f"in rule {rule.rule_id!r}")
            out.extend(captures[item.value])
    return out


def replace_object_links(tokens: Sequence[Token]) -> list[Token]:
    """Turn every object-region link into its detector class name."""
    out: list[Token] = []
    for token in tokens:
        if isinstance(token, ObjectLink):
            if not token.class_name:
                raise DataError(f"object link {token.region_id} has no class name")
            out.append(Word(token.class_name))
        else:
            out.append(token)
    return out


# ---------------------------------------------------------------------------
# filters


class DropReason(str, Enum):
    NO_PERSON_LINK = "no_person_link"
    NO_CANDIDATE = "no_candidate"
    SINGLE_CANDIDATE = "single_candidate"
    TOO_MANY_PERSONS = "too_many_persons"
    TIED_LINKS = "tied_links"


@dataclass(frozen=True)
class FilterVerdict:
    keep: bool
    reason: Optional[DropReason] = None

    @classmethod
    def kept(cls) -> "FilterVerdict":
        return cls(True, None)

    @classmethod
    def dropped(cls, reason: DropReason) -> "FilterVerdict":
        return cls(False, reason)


def filter_sample(sample: Sample) -> FilterVerdict:
    """First triggered drop reason, in fixed order; Keep when none fires."""
    n = sample.image.n_persons
    if sample.description.num_links < 1:
        return FilterVerdict.dropped(DropReason.NO_PERSON_LINK)
    if n < 1:
        return FilterVerdict.dropped(DropReason.NO_CANDIDATE)
    if n < MIN_PERSONS:
        return FilterVerdict.dropped(DropReason.SINGLE_CANDIDATE)
    if n > MAX_PERSONS:
        return FilterVerdict.dropped(DropReason.TOO_MANY_PERSONS)
    if has_tied_links(sample.description.tokens):
        return FilterVerdict.dropped(DropReason.TIED_LINKS)
    return FilterVerdict.kept()


def classify_commonsense(rule_id: str,
                         mapping: dict[str, CommonsenseType]) -> CommonsenseType:
    if rule_id not in mapping:
        raise DataError(f"unknown rule id {rule_id!r}")
    return mapping[rule_id]


# ---------------------------------------------------------------------------
# coverage and the full pipeline


@dataclass
class CoverageReport:
    total: int
    matched: int
    per_question_type: dict[str, int]
    unmatched_ids: list[str]

    @property
    def matched_fraction(self) -> Optional[float]:
        return self.matched / self.total if self.total else None

    def to_json(self) -> dict:
        return {"total": self.total, "matched": self.matched,
                "matched_fraction": self.matched_fraction,
                "per_question_type": dict(sorted(self.per_question_type.items())),
                "unmatched_ids": list(self.unmatched_ids)}


def coverage_report(corpus: Sequence[QAPair], rules: RuleSet) -> CoverageReport:
    per_type: dict[str, int] = {}
    unmatched: list[str] = []
    for qa in corpus:
        rid = match_rule(qa, rules)
        if rid is None:
            unmatched.append(qa.sample_id)
        else:
            qtype = rules.by_id[rid].question_type
            per_type[qtype] = per_type.get(qtype, 0) + 1
    return CoverageReport(total=len(corpus), matched=len(corpus) - len(unmatched),
                          per_question_type=per_type, unmatched_ids=unmatched)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    validation: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        total = self.train + self.validation + self.test
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions sum to {total}, expected 1")
        if min(self.train, self.validation, self.test) < 0:
            raise ValueError("split fractions must be non-negative")


def _split_of(sample_id: str, spec: SplitSpec) -> str:
    digest = hashlib.sha256(f"{spec.seed}:{sample_id}".encode("utf-8")).digest()
    u = int.from_bytes(digest[:8], "little") / 2.0 ** 64
    if u < spec.train:
        return "train"
    if u < spec.train + spec.validation:
        return "validation"
    return "test"


@dataclass
class PipelineReport:
    total: int = 0
    matched: int = 0
    unmatched_ids: list[str] = field(default_factory=list)
    per_question_type: dict[str, int] = field(default_factory=dict)
    drops: dict[str, int] = field(default_factory=dict)
    drop_ids: dict[str, str] = field(default_factory=dict)
    kept: int = 0
    split_sizes: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "total": self.total, "matched": self.matched, "kept": self.kept,
            "unmatched_ids": list(self.unmatched_ids),
            "per_question_type": dict(sorted(self.per_question_type.items())),
            "drops": dict(sorted(self.drops.items())),
            "drop_ids": dict(sorted(self.drop_ids.items())),
            "split_sizes": dict(sorted(self.split_sizes.items())),
        }


@dataclass
class PipelineResult:
    train: list[Sample]
    validation: list[Sample]
    test: list[Sample]
    report: PipelineReport


def run_pipeline(corpus: Sequence[QAPair], rules: RuleSet,
                 split: SplitSpec) -> PipelineResult:
    """match -> transform -> object-link replacement -> filter -> tag -> split.

    Pure function of (corpus, rules, split seed): samples land in splits by a
    seeded hash of their id and each split is emitted in sample-id order.
    """
    report = PipelineReport(total=len(corpus))
    mapping = rules.type_mapping
    splits: dict[str, list[Sample]] = {"train": [], "validation": [], "test": []}
    for qa in corpus:
        rid = match_rule(qa, rules)
        if rid is None:
            report.unmatched_ids.append(qa.sample_id)
            continue
        rule = rules.by_id[rid]
        report.matched += 1
        qtype = rule.question_type
        report.per_question_type[qtype] = report.per_question_type.get(qtype, 0) + 1

        tokens = replace_object_links(transform(qa, rule))
        description = Description(tokens)
        labels = {}
        for link_id in description.link_ids:
            if link_id not in qa.labels:
                raise DataError(f"{qa.sample_id}: no grounding label for link {link_id}")
            labels[link_id] = qa.labels[link_id]
        sample = Sample(sample_id=qa.sample_id, image=qa.image,
                        description=description, labels=GroundingLabel(labels),
                        commonsense_type=classify_commonsense(rid, mapping))
        verdict = filter_sample(sample)
        if not verdict.keep:
            reason = verdict.reason.value
            report.drops[reason] = report.drops.get(reason, 0) + 1
            report.drop_ids[qa.sample_id] = reason
            continue
        sample.validate(strict=True)
        report.kept += 1
        splits[_split_of(qa.sample_id, split)].append(sample)
    for name, bucket in splits.items():
        bucket.sort(key=lambda s: s.sample_id)
        report.split_sizes[name] = len(bucket)
    return PipelineResult(train=splits["train"], validation=splits["validation"],
                          test=splits["test"], report=report)


# ---------------------------------------------------------------------------
# QA corpus files (dataset format plus question/answers/correct_index)


def write_qa_corpus(corpus: Sequence[QAPair], path: str | Path,
                    header: DatasetHeader | None = None) -> None:
    if header is None:
        d_vis = len(corpus[0].image.persons[0].feature) if corpus else 0
        header = DatasetHeader(d_vis=d_vis)
    path = Path(path)
    lines = [_json_line({
        "format_version": header.format_version,
        "d_vis": header.d_vis,
        "objectness_threshold": header.objectness_threshold,
        "max_context_objects": header.max_context_objects,
    })]
    for qa in corpus:
        lines.append(_json_line({
            "sample_id": qa.sample_id,
            "image": image_to_json(qa.image),
            "question": [token_to_json(t) for t in qa.question],
            "answers": [[token_to_json(t) for t in ans] for ans in qa.answers],
            "correct_index": qa.correct_index,
            "labels": {str(k): v for k, v in sorted(qa.labels.items())},
        }))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    def rows():
        for qa in corpus:
            feats = [p.feature for p in qa.image.persons]
            feats += [o.feature for o in qa.image.context_objects]
            for ordinal, vec in enumerate(feats):
                yield qa.sample_id, ordinal, vec

    write_feature_file(feature_path(path), header.d_vis, rows())


def read_qa_corpus(path: str | Path) -> list[QAPair]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such QA corpus file")
    fpath = feature_path(path)
    if not fpath.exists():
        raise DataError(f"{fpath}: companion feature file missing")
    feat_d_vis, table = read_feature_file(fpath)
    corpus: list[QAPair] = []
    with open(path, encoding="utf-8") as fh:
        header: DatasetHeader | None = None
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            if header is None:
                header = _parse_header(line, path)
                if header.d_vis != feat_d_vis:
                    raise DataError(f"{path}: header d_vis {header.d_vis} != feature "
                                    f"file d_vis {feat_d_vis}")
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: malformed JSON ({exc.msg})") from None
            sid = str(obj.get("sample_id", f"<line {lineno}>"))
            per_sample = table.get(sid, {})
            features = [per_sample[i] for i in range(len(per_sample))]
            try:
                image = image_from_json(obj["image"], features, where)
                question = [token_from_json(t, where) for t in obj["question"]]
                answers = [[token_from_json(t, where) for t in ans]
                           for ans in obj["answers"]]
                labels = {int(k): int(v) for k, v in obj["labels"].items()}
                qa = QAPair(sample_id=sid, image=image, question=question,
                            answers=answers, correct_index=int(obj["correct_index"]),
                            labels=labels)
            except KeyError as exc:
                raise DataError(f"{where}: missing field {exc}") from None
            for vec in features:
                if vec.shape != (header.d_vis,):
                    raise DataError(f"{where}: feature length {vec.shape[0]} != "
                                    f"d_vis {header.d_vis}")
            corpus.append(qa)
    if header is None:
        raise DataError(f"{path}: empty file, missing header")
    return corpus
