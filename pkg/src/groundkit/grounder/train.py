"""Deterministic training loop with token-budget batching.

Batches are formed by accumulating shuffled samples until the next one would
push the summed sequence length past the token budget (a batch always takes
at least one sample).  Per-sample gradients accumulate in a fixed order and
are averaged before the optimizer step, so a seed pins the whole run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import numcore as nc
from ..core import Sample
from .model import GroundingModel, ModelConfig, UNK_TOKEN, substitute_neutral_names

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSchedule:
    steps: int = 300
    lr: float = 6e-5
    token_budget: int = 4000
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.token_budget < 1:
            raise ValueError("token budget must be >= 1")


@dataclass
class TrainResult:
    model: GroundingModel
    losses: list[float] = field(default_factory=list)


def build_vocab(samples: Sequence[Sample], pool: Sequence[str]) -> dict[str, int]:
    """Sorted corpus vocabulary plus the neutral-name pool; id 0 is <unk>."""
    words: set[str] = set()
    for name in pool:
        words.update(str(name).lower().split())
    for sample in samples:
        for w in sample.description.words():
            words.add(w.lower())
    vocab = {UNK_TOKEN: 0}
    for i, w in enumerate(sorted(words), start=1):
        vocab[w] = i
    return vocab


def sequence_length(sample: Sample, config: ModelConfig) -> int:
    words, _ = substitute_neutral_names(sample.description, config.neutral_names,
                                        config.seed, sample.sample_id)
    n_regions = sample.image.n_persons
    if config.use_context_objects:
        n_regions += len(sample.image.context_objects)
    return len(words) + n_regions


def make_batches(order: Sequence[int], lengths: Sequence[int],
                 token_budget: int) -> list[list[int]]:
    batches: list[list[int]] = []
    current: list[int] = []
    used = 0
    for idx in order:
        n = lengths[idx]
        if current and used + n > token_budget:
            batches.append(current)
            current = []
            used = 0
        current.append(idx)
        used += n
    if current:
        batches.append(current)
    return batches


def train(dataset: Sequence[Sample],
          config: ModelConfig,
          schedule: TrainSchedule,
          lam: float | None = None,
          on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train a fresh model; deterministic given (dataset, config, schedule)."""
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    vocab = build_vocab(dataset, config.neutral_names)
    model = GroundingModel.init(config, vocab, dtype=np.float32)
    state = nc.init_adam_state(model.params)
    lengths = [sequence_length(s, config) for s in dataset]
    rng = np.random.default_rng(config.seed)

    losses: list[float] = []
    step = 0
    while step < schedule.steps:
        order = rng.permutation(len(dataset))
        for batch in make_batches(order, lengths, schedule.token_budget):
            for p in model.params.values():
                p.zero_grad()
            total = 0.0
            for idx in batch:
                with nc.Graph() as graph:
                    loss = model.sample_loss(dataset[idx], lam=lam)
                    graph.backward(loss)
                total += float(loss.data)
            if not np.isfinite(total):
                raise nc.NumericError(f"non-finite loss at step {step}")
            inv = 1.0 / len(batch)
            for p in model.params.values():
                if p.grad is not None:
                    p.grad = p.grad * inv
            nc.optimizer_step(model.params, state, lr=schedule.lr,
                              betas=(schedule.beta1, schedule.beta2),
                              eps=schedule.adam_eps,
                              weight_decay=schedule.weight_decay)
            mean_loss = total * inv
            losses.append(mean_loss)
            if on_step is not None:
                on_step(step, mean_loss)
            step += 1
            if step >= schedule.steps:
                break
    return TrainResult(model=model, losses=losses)
