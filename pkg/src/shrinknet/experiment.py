"""Glue between data, training, pruning and verification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .netlib import ARCHITECTURES, Model, build, forward_embed
from .pruning import PruneConfig, prune_iterative
from .synthdata import Dataset, holdout_stacks, split_subject_independent, to_stacks
from .training import KDConfig, TrainConfig, distill, fine_tuner, train_plain
from .verification import DEFAULT_FMR_TARGETS, evaluate, gen_protocol


@dataclass
class Splits:
    """Subject-independent train/eval split plus a closed-set validation holdout."""

    train: Dataset
    eval: Dataset
    fit: tuple[np.ndarray, np.ndarray]
    val: tuple[np.ndarray, np.ndarray]

    @property
    def train_subjects(self) -> list[int]:
        return self.train.subjects

    @property
    def num_classes(self) -> int:
        return len(self.train_subjects)


def make_splits(dataset: Dataset, train_fraction: float = 50 / 70, seed: int = 0) -> Splits:
    train, _ = split_subject_independent(dataset, train_fraction, seed)
    return splits_from_subjects(dataset, train.subjects, seed)


def splits_from_subjects(dataset: Dataset, train_subjects: Sequence[int], seed: int = 0) -> Splits:
    """Rebuild :class:`Splits` from a stored list of training subject ids."""
    train_subjects = sorted(train_subjects)
    eval_subjects = [s for s in dataset.subjects if s not in set(train_subjects)]
    if not train_subjects or not eval_subjects:
        raise ValueError("both the training and the evaluation subject lists must be nonempty")
    train = dataset.select_subjects(train_subjects)
    eval_ = dataset.select_subjects(eval_subjects)
    fit_ds, val_ds = holdout_stacks(train, seed)
    subjects = train.subjects
    return Splits(
        train=train,
        eval=eval_,
        fit=(fit_ds.images, fit_ds.class_labels(subjects)),
        val=(val_ds.images, val_ds.class_labels(subjects)),
    )


def build_arch(arch: str, splits_or_classes, input_shape=(32, 32, 1), embedding_dim: int = 64, seed: int = 0) -> Model:
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    n_classes = splits_or_classes.num_classes if isinstance(splits_or_classes, Splits) else int(splits_or_classes)
    spec = ARCHITECTURES[arch](input_shape=tuple(input_shape), embedding_dim=embedding_dim, num_classes=n_classes)
    return build(spec, seed=seed)


def verify(model: Model, eval_ds: Dataset, training_subjects: Sequence[int] = (), targets=DEFAULT_FMR_TARGETS):
    """Embed eval stacks, run the matching protocol, and compute metrics."""
    model.eval()
    stacks = to_stacks(eval_ds, lambda x: forward_embed(model, x))
    scores = gen_protocol(stacks, training_subjects)
    return scores, evaluate(scores, targets)


def train_model(arch: str, splits: Splits, cfg: TrainConfig, embedding_dim: int = 64, seed: Optional[int] = None):
    model = build_arch(arch, splits, splits.train.images.shape[1:], embedding_dim, cfg.seed if seed is None else seed)
    return train_plain(model, splits.fit, splits.val, cfg)


def distill_student(teacher: Model, arch: str, splits: Splits, cfg: KDConfig, embedding_dim: int = 64):
    student = build_arch(arch, splits, splits.train.images.shape[1:], embedding_dim, cfg.seed)
    return distill(teacher, student, splits.fit, splits.val, cfg)


def prune_model(model: Model, splits: Splits, cfg: PruneConfig, ft_cfg: TrainConfig):
    """Copy ``model`` and run iterative pruning with masked fine-tuning on the fit split."""
    pruned = model.copy()
    return prune_iterative(pruned, cfg, splits.fit, fine_tune=fine_tuner(splits.fit, ft_cfg))
