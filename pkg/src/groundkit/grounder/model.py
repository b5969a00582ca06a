"""The grounding model.

Input layout per sample is one flat sequence: substituted text tokens first,
then one token per candidate person, then one per context object.  Person
links are replaced by neutral first names drawn deterministically per
(sample_id, seed); each link is represented by the first word token of its
substituted name.  Region tokens are LN(feature projection + location
projection) and carry no position embedding; text tokens are
LN(word embedding + position embedding).

Scoring is bilinear between final-layer link features and final-layer person
features; the auxiliary contrastive objective reads an earlier hidden layer
and pulls a link toward its ground-truth person plus that person's
IoU-selected context objects, away from the other persons, with the positive
terms weighted by IoU against the ground-truth box.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .. import numcore as nc
from ..core import DataError, Description, PersonLink, Prediction, Sample, Word
from ..geometry import iou, location_feature
from ..numcore.encoder import EncoderConfig, layer_from_last

UNK_TOKEN = "<unk>"

DEFAULT_NEUTRAL_NAMES = (
    "james", "mary", "john", "patricia", "robert", "jennifer", "michael",
    "linda", "david", "elizabeth", "william", "barbara", "richard", "susan",
    "joseph", "jessica",
)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 256
    d_vis: int = 32
    tau: float = 0.07
    t1: float = 0.3
    t2: float = 0.1
    lam: float = 1.0
    contrast_layer: int = 3
    neutral_names: tuple[str, ...] = DEFAULT_NEUTRAL_NAMES
    seed: int = 0
    normalize_similarity: bool = False
    use_context_objects: bool = True
    max_text_len: int = 64

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if not (0.0 <= self.t1 <= 1.0 and 0.0 <= self.t2 <= 1.0):
            raise ValueError("IoU thresholds must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("contrastive weight must be >= 0")
        if not 1 <= self.contrast_layer <= self.n_layers:
            raise ValueError(f"contrast_layer {self.contrast_layer} outside "
                             f"1..{self.n_layers}")
        if len(self.neutral_names) < 10:
            raise ValueError("neutral name pool needs at least 10 names")

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(d_model=self.d_model, n_heads=self.n_heads,
                             n_layers=self.n_layers, d_ff=self.d_ff, seed=self.seed)

    def to_file(self, path: str | Path) -> None:
        lines = []
        for key, value in sorted(self.to_dict().items()):
            lines.append(f"{key} = {value}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def to_dict(self) -> dict[str, object]:
        return {
            "d_model": self.d_model, "n_heads": self.n_heads,
            "n_layers": self.n_layers, "d_ff": self.d_ff, "d_vis": self.d_vis,
            "tau": self.tau, "t1": self.t1, "t2": self.t2, "lambda": self.lam,
            "contrast_layer": self.contrast_layer,
            "neutral_names": ",".join(self.neutral_names), "seed": self.seed,
            "normalize_similarity": self.normalize_similarity,
            "use_context_objects": self.use_context_objects,
            "max_text_len": self.max_text_len,
        }

    @classmethod
    def from_file(cls, path: str | Path) -> "ModelConfig":
        values = parse_config_file(path)
        known = {
            "d_model": int, "n_heads": int, "n_layers": int, "d_ff": int,
            "d_vis": int, "tau": float, "t1": float, "t2": float,
            "lambda": float, "contrast_layer": int, "neutral_names": str,
            "seed": int, "normalize_similarity": _parse_bool,
            "use_context_objects": _parse_bool, "max_text_len": int,
        }
        kwargs: dict[str, object] = {}
        for key, conv in known.items():
            if key not in values:
                continue
            attr = "lam" if key == "lambda" else key
            try:
                kwargs[attr] = conv(values[key])
            except ValueError as exc:
                raise DataError(f"{path}: bad value for {key!r} ({exc})") from None
        if "neutral_names" in kwargs:
            names = tuple(n.strip() for n in str(kwargs["neutral_names"]).split(",") if n.strip())
            kwargs["neutral_names"] = names
        try:
            return cls(**kwargs)  # type: ignore[arg-type]
        except (TypeError, ValueError) as exc:
            raise DataError(f"{path}: invalid model config ({exc})") from None


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


# ---------------------------------------------------------------------------
# neutral-name substitution


def _stable_rng(seed: int, tag: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{tag}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def substitute_neutral_names(description: Description,
                             pool: Sequence[str],
                             seed: int,
                             sample_id: str = "") -> tuple[list[str], dict[int, int]]:
    """Replace person links with distinct neutral names.

    Returns the lowercase word list and a map from link id to the position of
    the first word of its substituted name.  The draw is without replacement
    and deterministic per (sample_id, seed); a repeated link id reuses its
    name, and its map entry points at the first occurrence.
    """
    link_ids = description.link_ids
    if len(link_ids) > len(pool):
        raise DataError(f"{sample_id or 'sample'}: {len(link_ids)} links exceed "
                        f"name pool of {len(pool)}")
    rng = _stable_rng(seed, sample_id)
    order = rng.permutation(len(pool))
    assigned = {link: str(pool[order[i]]).lower() for i, link in enumerate(link_ids)}

    words: list[str] = []
    positions: dict[int, int] = {}
    for token in description.tokens:
        if isinstance(token, PersonLink):
            if token.link_id not in positions:
                positions[token.link_id] = len(words)
            words.extend(assigned[token.link_id].split())
        elif isinstance(token, Word):
            words.append(token.text.lower())
        else:
            raise DataError(f"{sample_id or 'sample'}: object link present at embed time")
    return words, positions


# ---------------------------------------------------------------------------
# encoded sample and contrastive sets


@dataclass
class EncodedSample:
    """One sample pushed through embedding (and optionally the encoder)."""

    sequence: nc.Tensor
    link_positions: dict[int, int]
    person_positions: list[int]
    object_positions: list[int]
    words: list[str]
    hidden: list[nc.Tensor] = field(default_factory=list)

    @property
    def final(self) -> nc.Tensor:
        return self.hidden[-1]


@dataclass
class LinkContrast:
    link_id: int
    gt_person: int
    context_objects: list[int]
    weights: np.ndarray          # over positives: GT person first (weight 1.0)
    negatives: list[int]         # person indices other than the GT


@dataclass
class ContrastiveSets:
    per_link: list[LinkContrast]


def select_context_objects(sample: Sample, t1: float, t2: float) -> ContrastiveSets:
    """Pick, per link, the context objects tied to its ground-truth person.

    An object qualifies when its IoU with the GT person box exceeds ``t1``
    while its best IoU against every other person box stays below ``t2``.
    Positives are the GT person (weight 1) plus the qualifying objects
    (weight = IoU against the GT box); negatives are the other persons.
    """
    persons = sample.image.persons
    per_link: list[LinkContrast] = []
    for link_id in sample.description.link_ids:
        gt = sample.labels[link_id]
        gt_box = persons[gt].box
        others = [p.index for p in persons if p.index != gt]
        chosen: list[int] = []
        weights = [1.0]
        for idx, obj in enumerate(sample.image.context_objects):
            overlap_gt = iou(obj.box, gt_box)
            if overlap_gt <= t1:
                continue
            worst = max((iou(obj.box, persons[j].box) for j in others), default=0.0)
            if worst >= t2:
                continue
            chosen.append(idx)
            weights.append(overlap_gt)
        per_link.append(LinkContrast(link_id=link_id, gt_person=gt,
                                     context_objects=chosen,
                                     weights=np.asarray(weights, dtype=np.float64),
                                     negatives=others))
    return ContrastiveSets(per_link)


# ---------------------------------------------------------------------------
# losses


def loss_cls(q: nc.Tensor, labels: Sequence[int]) -> nc.Tensor:
    """Mean cross-entropy of each logit row against its labeled column."""
    if q.data.ndim != 2 or len(labels) != q.data.shape[0]:
        raise nc.NumericError(f"logits {q.data.shape} do not match {len(labels)} labels")
    logp = nc.log_softmax(q, axis=1)
    return nc.neg(nc.mean_all(nc.take_per_row(logp, list(labels))))


def contrastive_loss_from_features(feats: nc.Tensor,
                                   link_pos: int,
                                   positive_pos: Sequence[int],
                                   negative_pos: Sequence[int],
                                   weights: np.ndarray,
                                   tau: float,
                                   normalize: bool = False) -> nc.Tensor:
    """One link's contrastive term on a given feature matrix.

    Similarities are dot products between the link row and every candidate
    row (positives first, then negatives); the log-softmax over the full
    candidate set is read at each positive and combined with weight
    ``weights[p] / n_positives``.
    """
    if tau <= 0:
        raise nc.NumericError(f"temperature must be positive, got {tau}")
    if normalize:
        feats = nc.l2_normalize_rows(feats)
    anchor = nc.row_vector(feats, link_pos)
    cand = nc.gather_rows(feats, list(positive_pos) + list(negative_pos))
    sims = nc.matvec(cand, anchor)
    scaled = nc.scale(sims, 1.0 / tau)
    logp = nc.log_softmax(scaled, axis=0)
    pos_logp = nc.slice_rows(logp, 0, len(positive_pos))
    w = np.asarray(weights, dtype=np.float64) / len(positive_pos)
    return nc.neg(nc.dot_const(pos_logp, w))


def loss_con(encoded: EncodedSample, sets: ContrastiveSets, tau: float,
             contrast_layer: int, normalize: bool = False) -> nc.Tensor:
    """IoU-weighted context contrastive loss, averaged over links."""
    feats = layer_from_last(encoded.hidden, contrast_layer)
    terms: list[nc.Tensor] = []
    for lc in sets.per_link:
        pos = [encoded.person_positions[lc.gt_person]]
        pos += [encoded.object_positions[c] for c in lc.context_objects]
        neg = [encoded.person_positions[j] for j in lc.negatives]
        terms.append(contrastive_loss_from_features(
            feats, encoded.link_positions[lc.link_id], pos, neg,
            lc.weights, tau, normalize=normalize))
    total = terms[0]
    for t in terms[1:]:
        total = nc.add(total, t)
    return nc.scale(total, 1.0 / len(terms))


# ---------------------------------------------------------------------------
# the model


class GroundingModel:
    """Parameters plus vocabulary for the grounding network."""

    def __init__(self, config: ModelConfig, params: dict[str, nc.Tensor],
                 vocab: dict[str, int]):
        self.config = config
        self.params = params
        self.vocab = vocab

    # -- construction ------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, vocab: Mapping[str, int],
             dtype=np.float32) -> "GroundingModel":
        rng = np.random.default_rng(config.seed)
        params = nc.init_encoder_params(config.encoder, rng, prefix="enc", dtype=dtype)
        d = config.d_model

        def w(name, shape):
            params[name] = nc.Tensor(rng.normal(0.0, 0.02, shape).astype(dtype))

        def zeros(name, shape):
            params[name] = nc.Tensor(np.zeros(shape, dtype=dtype))

        def ones(name, shape):
            params[name] = nc.Tensor(np.ones(shape, dtype=dtype))

        w("embed.word", (len(vocab), d))
        w("embed.pos", (config.max_text_len, d))
        w("embed.feat.w", (config.d_vis, d))
        zeros("embed.feat.b", (d,))
        w("embed.loc.w", (7, d))
        zeros("embed.loc.b", (d,))
        ones("embed.text_ln.gain", (d,))
        zeros("embed.text_ln.bias", (d,))
        ones("embed.region_ln.gain", (d,))
        zeros("embed.region_ln.bias", (d,))
        w("cls.w1", (d, d))
        w("cls.w2", (d, d))
        return cls(config, params, dict(vocab))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(p.data.shape) for name, p in self.params.items()}

    # -- forward -----------------------------------------------------------

    def _word_ids(self, words: Sequence[str]) -> list[int]:
        unk = self.vocab.get(UNK_TOKEN, 0)
        return [self.vocab.get(w, unk) for w in words]

    def embed_sample(self, sample: Sample) -> EncodedSample:
        cfg = self.config
        words, link_positions = substitute_neutral_names(
            sample.description, cfg.neutral_names, cfg.seed, sample.sample_id)
        if len(words) > cfg.max_text_len:
            raise DataError(f"{sample.sample_id}: {len(words)} text tokens exceed "
                            f"max_text_len {cfg.max_text_len}")
        p = self.params
        ids = self._word_ids(words)
        text = nc.layer_norm(
            nc.add(nc.gather_rows(p["embed.word"], ids),
                   nc.slice_rows(p["embed.pos"], 0, len(ids))),
            p["embed.text_ln.gain"], p["embed.text_ln.bias"])

        regions = list(sample.image.persons)
        objects = list(sample.image.context_objects) if cfg.use_context_objects else []
        feats = np.stack([r.feature for r in regions + objects]).astype(p["embed.feat.w"].dtype)
        if feats.shape[1] != cfg.d_vis:
            raise DataError(f"{sample.sample_id}: feature dim {feats.shape[1]} != "
                            f"d_vis {cfg.d_vis}")
        locs = np.stack([
            location_feature(r.box, sample.image.width, sample.image.height)
            for r in regions + objects
        ]).astype(p["embed.feat.w"].dtype)
        region = nc.layer_norm(
            nc.add(nc.linear(nc.Tensor(feats), p["embed.feat.w"], p["embed.feat.b"]),
                   nc.linear(nc.Tensor(locs), p["embed.loc.w"], p["embed.loc.b"])),
            p["embed.region_ln.gain"], p["embed.region_ln.bias"])

        sequence = nc.concat_rows([text, region])
        n_text = len(ids)
        n_persons = len(regions)
        return EncodedSample(
            sequence=sequence,
            link_positions=link_positions,
            person_positions=[n_text + i for i in range(n_persons)],
            object_positions=[n_text + n_persons + j for j in range(len(objects))],
            words=words,
        )

    def forward(self, sample: Sample) -> EncodedSample:
        encoded = self.embed_sample(sample)
        encoded.hidden = nc.encode(encoded.sequence, self.config.encoder,
                                   self.params, prefix="enc")
        return encoded

    def class_logits(self, encoded: EncodedSample) -> tuple[nc.Tensor, list[int]]:
        """Bilinear link-vs-person scores on final-layer features.

        Returns the [k, N] logit tensor plus the link-id order of its rows;
        context objects never enter the classifier.
        """
        link_ids = sorted(encoded.link_positions)
        q = classification_logits(
            encoded, self.params["cls.w1"], self.params["cls.w2"], link_ids)
        return q, link_ids

    # -- losses / inference -------------------------------------------------

    def sample_loss(self, sample: Sample, lam: float | None = None) -> nc.Tensor:
        cfg = self.config
        lam = cfg.lam if lam is None else lam
        encoded = self.forward(sample)
        q, link_ids = self.class_logits(encoded)
        labels = [sample.labels[link] for link in link_ids]
        cls_term = loss_cls(q, labels)
        if lam == 0.0:
            return cls_term
        sets = select_context_objects(sample, cfg.t1, cfg.t2)
        if not cfg.use_context_objects:
            # objects are absent from the input sequence, so the positive set
            # shrinks to the ground-truth person alone
            for lc in sets.per_link:
                lc.context_objects = []
                lc.weights = lc.weights[:1]
        con_term = loss_con(encoded, sets, cfg.tau, cfg.contrast_layer,
                            normalize=cfg.normalize_similarity)
        return nc.add(cls_term, nc.scale(con_term, lam))

    def predict_sample(self, sample: Sample) -> Prediction:
        encoded = self.forward(sample)
        q, link_ids = self.class_logits(encoded)
        scores = {link: q.data[i].copy() for i, link in enumerate(link_ids)}
        return Prediction.from_scores(scores)


def classification_logits(encoded: EncodedSample, w1: nc.Tensor, w2: nc.Tensor,
                          link_ids: Sequence[int] | None = None) -> nc.Tensor:
    """[k, N] bilinear scores between link tokens and person regions."""
    if link_ids is None:
        link_ids = sorted(encoded.link_positions)
    t = nc.gather_rows(encoded.final, [encoded.link_positions[l] for l in link_ids])
    r = nc.gather_rows(encoded.final, encoded.person_positions)
    return nc.matmul(nc.matmul(t, w1), nc.transpose(nc.matmul(r, w2)))


def loss_total(model: GroundingModel, sample: Sample,
               lam: float | None = None) -> nc.Tensor:
    return model.sample_loss(sample, lam=lam)


def predict(model: GroundingModel, sample: Sample) -> Prediction:
    return model.predict_sample(sample)
