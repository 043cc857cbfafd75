"""Unstructured pruning: scoring rules, mask selection and iterative prune/fine-tune."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import ops
from .netlib.model import Model
from .tensor import backward


class ScoringRule(str, enum.Enum):
    GLOBAL_MAGNITUDE = "global_magnitude"
    LAYERWISE_MAGNITUDE = "layerwise_magnitude"
    GLOBAL_GRADIENT_MAGNITUDE = "global_gradient_magnitude"
    LAYERWISE_GRADIENT_MAGNITUDE = "layerwise_gradient_magnitude"
    RANDOM = "random"

    @property
    def needs_batch(self) -> bool:
        return self in (ScoringRule.GLOBAL_GRADIENT_MAGNITUDE, ScoringRule.LAYERWISE_GRADIENT_MAGNITUDE)

    @property
    def scope(self) -> str:
        if self in (ScoringRule.LAYERWISE_MAGNITUDE, ScoringRule.LAYERWISE_GRADIENT_MAGNITUDE):
            return "layerwise"
        return "global"


SCOPES = ("global", "layerwise")


@dataclass
class PruneConfig:
    rule: ScoringRule = ScoringRule.LAYERWISE_MAGNITUDE
    target_cr: float = 8.0
    iterations: int = 4
    fine_tune_epochs: int = 10
    scoring_batch_size: int = 32
    seed: int = 0
    excluded: tuple[str, ...] = ()

    def __post_init__(self):
        self.rule = ScoringRule(self.rule)
        self.excluded = tuple(self.excluded)
        if not self.target_cr >= 1:
            raise ValueError(f"target_cr must be >= 1, got {self.target_cr}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.fine_tune_epochs < 0:
            raise ValueError(f"fine_tune_epochs must be >= 0, got {self.fine_tune_epochs}")
        if self.scoring_batch_size < 1:
            raise ValueError("scoring_batch_size must be >= 1")


@dataclass
class PruneIteration:
    iteration: int
    target_keep_fraction: float
    keep_fraction: float
    sparsity: dict[str, float]
    train_loss: Optional[float] = None
    train_accuracy: Optional[float] = None


@dataclass
class PruneHistory:
    rule: str
    target_cr: float
    iterations: list[PruneIteration] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"rule": self.rule, "target_cr": self.target_cr, "iterations": [asdict(it) for it in self.iterations]}


def prunable_names(model: Model, excluded: Sequence[str] = ()) -> list[str]:
    return [n for n in model.prunable_names() if n not in set(excluded)]


# --------------------------------------------------------------------- scoring


def weight_gradients(model: Model, batch) -> dict[str, np.ndarray]:
    """Gradient of the batch classification loss w.r.t. every weight (eval mode, no side effects)."""
    x, y = batch
    mode = model.mode
    model.eval()
    model.zero_grad()
    try:
        loss = ops.cross_entropy_with_softmax(model.forward(x), y)
        backward(loss)
        return {n: p.grad.copy() for n, p in model.params.items() if p.grad is not None}
    finally:
        model.zero_grad()
        model.mode = mode


def score(
    model: Model,
    rule,
    batch=None,
    seed: int = 0,
    names: Optional[Sequence[str]] = None,
) -> dict[str, np.ndarray]:
    """Per-weight importance; lower scores are pruned first.

    Already-masked weights score +inf so they are never re-selected.
    """
    rule = ScoringRule(rule)
    names = list(names) if names is not None else model.prunable_names()
    if rule.needs_batch and batch is None:
        raise ValueError(f"{rule.value} scoring needs a batch of inputs")
    grads = weight_gradients(model, batch) if rule.needs_batch else None
    rng = np.random.default_rng(seed) if rule is ScoringRule.RANDOM else None
    scores = {}
    for name in names:
        w = model.params[name].data.astype(np.float64)
        if rule is ScoringRule.RANDOM:
            s = rng.random(w.shape)
        elif rule.needs_batch:
            s = np.abs(w * grads[name])
        else:
            s = np.abs(w)
        scores[name] = np.where(model.masks[name], s, np.inf)
    return scores


# ------------------------------------------------------------------- selection


def _select_counts(scores: Mapping[str, np.ndarray], masks: Mapping[str, np.ndarray], counts, scope: str) -> dict[str, np.ndarray]:
    new_masks = {n: masks[n].copy() for n in scores}
    if scope == "global":
        names = list(scores)
        flat = np.concatenate([scores[n].reshape(-1) for n in names]) if names else np.zeros(0)
        # stable sort: ties fall to declaration order, then flat index
        order = np.argsort(flat, kind="stable")[: int(counts)]
        offsets = np.cumsum([0] + [scores[n].size for n in names])
        for i, n in enumerate(names):
            local = order[(order >= offsets[i]) & (order < offsets[i + 1])] - offsets[i]
            new_masks[n].reshape(-1)[local] = False
    else:
        for n, s in scores.items():
            order = np.argsort(s.reshape(-1), kind="stable")[: int(counts[n])]
            new_masks[n].reshape(-1)[order] = False
    return new_masks


def select(
    scores: Mapping[str, np.ndarray],
    fraction: float,
    scope: str,
    masks: Optional[Mapping[str, np.ndarray]] = None,
) -> dict[str, np.ndarray]:
    """Prune ``floor(fraction * n)`` of the currently unmasked weights.

    ``n`` counts unmasked weights over all tensors (global scope) or per tensor
    (layerwise).  Returns updated masks; the inputs are not modified.
    """
    if not 0 <= fraction <= 1:
        raise ValueError(f"prune fraction must be in [0, 1], got {fraction}")
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    if masks is None:
        masks = {n: np.isfinite(s) for n, s in scores.items()}
    unmasked = {n: int(masks[n].sum()) for n in scores}
    if scope == "global":
        counts = math.floor(fraction * sum(unmasked.values()))
    else:
        counts = {n: math.floor(fraction * k) for n, k in unmasked.items()}
    return _select_counts(scores, masks, counts, scope)


def apply_masks(model: Model, masks: Mapping[str, np.ndarray]) -> None:
    """Install masks and zero the masked weights in place (M ⊙ W)."""
    for name, mask in masks.items():
        model.masks[name] = mask
        model.params[name].data[~mask] = 0.0


# ------------------------------------------------------------ compression ratio


@dataclass
class CompressionRatio:
    cr_params: float
    cr_all: float
    prunable: int
    nonzero_prunable: int


def compression_ratio(model: Model) -> CompressionRatio:
    """Prunable weights over nonzero prunable weights, plus the all-parameter variant.

    A fully pruned model reports ``inf``.
    """
    names = set(model.prunable_names())
    prunable = sum(model.params[n].size for n in names)
    nonzero = sum(int(np.count_nonzero(model.effective_weight(n))) for n in names)
    others = sum(p.size for n, p in model.params.items() if n not in names)
    cr_params = math.inf if nonzero == 0 else prunable / nonzero
    cr_all = math.inf if nonzero + others == 0 else (prunable + others) / (nonzero + others)
    return CompressionRatio(cr_params, cr_all, prunable, nonzero)


# --------------------------------------------------------------- the full loop


def keep_schedule(n: int, target_cr: float, iterations: int) -> list[int]:
    """Weights kept after each iteration: ``n - floor((1 - cr^(-i/N)) * n)``."""
    return [n - math.floor((1 - target_cr ** (-i / iterations)) * n) for i in range(1, iterations + 1)]


def _scoring_batch(train_data, size: int, seed: int):
    x, y = train_data
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(x), size=min(size, len(x)), replace=False))
    return x[idx], y[idx]


def prune_iterative(model: Model, config: PruneConfig, train_data, fine_tune=None):
    """Score, prune and fine-tune ``config.iterations`` times on a geometric keep schedule.

    ``fine_tune(model, epochs)`` runs masked training and may return
    ``(loss, accuracy)``; pass ``None`` to skip fine-tuning.  ``model`` is
    modified in place and returned with its :class:`PruneHistory`.
    """
    names = prunable_names(model, config.excluded)
    rule = config.rule
    scope = rule.scope
    batch = _scoring_batch(train_data, config.scoring_batch_size, config.seed) if rule.needs_batch else None
    if scope == "global":
        schedule = keep_schedule(sum(model.masks[n].sum() for n in names), config.target_cr, config.iterations)
    else:
        per = {n: keep_schedule(int(model.masks[n].sum()), config.target_cr, config.iterations) for n in names}
    original = {n: model.params[n].size for n in names}
    history = PruneHistory(rule.value, config.target_cr)
    for i in range(config.iterations):
        scores = score(model, rule, batch=batch, seed=config.seed + i, names=names)
        current = {n: model.masks[n] for n in names}
        if scope == "global":
            counts = max(0, int(sum(m.sum() for m in current.values())) - schedule[i])
        else:
            counts = {n: max(0, int(current[n].sum()) - per[n][i]) for n in names}
        apply_masks(model, _select_counts(scores, current, counts, scope))
        loss = acc = None
        if fine_tune is not None and config.fine_tune_epochs > 0:
            result = fine_tune(model, config.fine_tune_epochs)
            if result is not None:
                loss, acc = result
        kept = sum(int(model.masks[n].sum()) for n in names)
        history.iterations.append(
            PruneIteration(
                iteration=i + 1,
                target_keep_fraction=config.target_cr ** (-(i + 1) / config.iterations),
                keep_fraction=kept / sum(original.values()),
                sparsity={n: 1 - float(model.masks[n].sum()) / original[n] for n in names},
                train_loss=loss,
                train_accuracy=acc,
            )
        )
    return model, history
