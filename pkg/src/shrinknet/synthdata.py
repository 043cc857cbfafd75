"""Seeded synthetic identity images with sessions, lighting conditions and stacks.

Each subject has a prototype made of random 2-D Gaussian bumps.  A sample is

    clip(brightness[condition] * prototype + session_shift[subject, session] + noise, 0, 1)

and every random draw comes from a generator keyed on (seed, subject, ...), so
subjects can be generated in any order with identical results.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_BRIGHTNESS = (1.0, 0.7, 0.4)  # daylight, office light, dark


@dataclass
class DatasetSpec:
    n_subjects: int = 70
    sessions: int = 2
    stacks_per_session: int = 2
    stack_size: int = 5
    height: int = 32
    width: int = 32
    channels: int = 1
    n_conditions: int = 3
    brightness: Optional[tuple[float, ...]] = None
    prototype_complexity: int = 6
    session_shift_scale: float = 0.2
    pixel_noise_scale: float = 0.1
    mirror: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("n_subjects", "sessions", "stacks_per_session", "stack_size", "height", "width", "channels", "n_conditions", "prototype_complexity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.session_shift_scale < 0 or self.pixel_noise_scale < 0:
            raise ValueError("noise scales must be >= 0")
        if self.brightness is None:
            self.brightness = DEFAULT_BRIGHTNESS if self.n_conditions == 3 else tuple(np.linspace(1.0, 0.4, self.n_conditions).tolist())
        self.brightness = tuple(float(b) for b in self.brightness)
        if len(self.brightness) != self.n_conditions:
            raise ValueError(f"brightness has {len(self.brightness)} entries for {self.n_conditions} conditions")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    @property
    def total_samples(self) -> int:
        return self.n_subjects * self.sessions * self.stacks_per_session * self.stack_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["brightness"] = list(self.brightness)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


@dataclass(frozen=True)
class Sample:
    subject_id: int
    session_id: int
    condition_id: int
    stack_id: int
    index_in_stack: int
    image: np.ndarray


@dataclass
class Dataset:
    """Images (N, H, W, C) in [0, 1] with per-sample label arrays."""

    images: np.ndarray
    subject: np.ndarray
    session: np.ndarray
    condition: np.ndarray
    stack: np.ndarray
    index: np.ndarray
    spec: Optional[DatasetSpec] = None

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield Sample(int(self.subject[i]), int(self.session[i]), int(self.condition[i]), int(self.stack[i]), int(self.index[i]), self.images[i])

    @property
    def subjects(self) -> list[int]:
        return sorted(set(self.subject.tolist()))

    def subset(self, keep: np.ndarray) -> "Dataset":
        return Dataset(self.images[keep], self.subject[keep], self.session[keep], self.condition[keep], self.stack[keep], self.index[keep], self.spec)

    def select_subjects(self, subjects: Sequence[int]) -> "Dataset":
        return self.subset(np.isin(self.subject, list(subjects)))

    def class_labels(self, subjects: Optional[Sequence[int]] = None) -> np.ndarray:
        """Contiguous class indices 0..K-1 over the sorted subject ids."""
        subjects = sorted(subjects) if subjects is not None else self.subjects
        lookup = {s: i for i, s in enumerate(subjects)}
        return np.array([lookup[s] for s in self.subject.tolist()], dtype=np.int64)


def _bumps(rng: np.random.Generator, count: int, h: int, w: int, signed: bool) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    field_ = np.zeros((h, w))
    for _ in range(count):
        cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
        sigma = rng.uniform(0.06, 0.15) * min(h, w)
        amp = rng.uniform(0.5, 1.0)
        if signed:
            amp *= rng.choice((-1.0, 1.0))
        field_ += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    peak = np.abs(field_).max()
    return field_ / peak if peak > 0 else field_


def _subject_samples(spec: DatasetSpec, subject: int):
    h, w, c = spec.image_shape
    proto_rng = np.random.default_rng([spec.seed, subject, 0])
    prototype = np.stack([_bumps(proto_rng, spec.prototype_complexity, h, w, signed=False) for _ in range(c)], axis=-1)
    rows = []
    for session in range(spec.sessions):
        shift_rng = np.random.default_rng([spec.seed, subject, 1, session])
        shift = spec.session_shift_scale * np.stack(
            [_bumps(shift_rng, spec.prototype_complexity // 2 + 1, h, w, signed=True) for _ in range(c)], axis=-1
        )
        for stack in range(spec.stacks_per_session):
            stack_rng = np.random.default_rng([spec.seed, subject, 2, session, stack])
            condition = int(stack_rng.integers(spec.n_conditions))
            base = spec.brightness[condition] * prototype + shift
            for i in range(spec.stack_size):
                img = base + spec.pixel_noise_scale * stack_rng.standard_normal((h, w, c))
                if spec.mirror and stack % 2 == 1:
                    img = img[:, ::-1]
                rows.append((np.clip(img, 0.0, 1.0), subject, session, condition, stack, i))
    return rows


def generate(spec: DatasetSpec) -> Dataset:
    rows = [r for s in range(spec.n_subjects) for r in _subject_samples(spec, s)]
    cols = list(zip(*rows))
    return Dataset(
        images=np.stack(cols[0]).astype(np.float32),
        subject=np.array(cols[1], dtype=np.int64),
        session=np.array(cols[2], dtype=np.int64),
        condition=np.array(cols[3], dtype=np.int64),
        stack=np.array(cols[4], dtype=np.int64),
        index=np.array(cols[5], dtype=np.int64),
        spec=spec,
    )


def split_subject_independent(dataset: Dataset, train_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Shuffle subject ids and split them; no subject appears on both sides."""
    subjects = dataset.subjects
    if len(subjects) < 2:
        raise ValueError(f"need at least 2 subjects to split, got {len(subjects)}")
    n_train = int(round(train_fraction * len(subjects)))
    if n_train < 1 or n_train >= len(subjects):
        raise ValueError(f"train_fraction={train_fraction} leaves one side empty for {len(subjects)} subjects")
    order = np.random.default_rng(seed).permutation(subjects)
    train_subjects = sorted(order[:n_train].tolist())
    eval_subjects = sorted(order[n_train:].tolist())
    return dataset.select_subjects(train_subjects), dataset.select_subjects(eval_subjects)


def holdout_stacks(dataset: Dataset, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Closed-set validation split: one whole stack per subject goes to validation."""
    rng = np.random.default_rng(seed)
    val = np.zeros(len(dataset), dtype=bool)
    for s in dataset.subjects:
        own = dataset.subject == s
        keys = sorted(set(zip(dataset.session[own].tolist(), dataset.stack[own].tolist())))
        if len(keys) < 2:
            continue
        sess, stk = keys[int(rng.integers(len(keys)))]
        val |= own & (dataset.session == sess) & (dataset.stack == stk)
    return dataset.subset(~val), dataset.subset(val)


def to_stacks(dataset: Dataset, embed, min_sessions: int = 2):
    """Embed each (subject, session, stack) group into a TemplateStack.

    ``embed`` maps an image batch to (n, E) embeddings (e.g. a bound
    ``forward_embed``).  Subjects seen in fewer than ``min_sessions`` sessions
    are dropped with a warning.
    """
    from .verification import TemplateStack

    stacks = []
    for s in dataset.subjects:
        own = dataset.subject == s
        sessions = sorted(set(dataset.session[own].tolist()))
        if len(sessions) < min_sessions:
            log.warning("subject %d has %d session(s); dropped", s, len(sessions))
            continue
        for sess in sessions:
            for stk in sorted(set(dataset.stack[own & (dataset.session == sess)].tolist())):
                sel = own & (dataset.session == sess) & (dataset.stack == stk)
                order = np.argsort(dataset.index[sel], kind="stable")
                emb = np.asarray(embed(dataset.images[sel][order]))
                stacks.append(TemplateStack(subject_id=s, session_id=sess, embeddings=emb, stack_id=stk))
    return stacks


# ------------------------------------------------------------------------ disk


def sample_filename(subject: int, session: int, condition: int, stack: int, index: int) -> str:
    return f"s{subject}_e{session}_c{condition}_k{stack}_i{index}.f32"


def save_dataset(dataset: Dataset, directory, split: Optional[dict] = None) -> None:
    """Write ``meta.json`` plus one little-endian f32 blob per sample."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"spec": dataset.spec.to_dict() if dataset.spec else None, "split": split or {}}
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    for smp in dataset:
        name = sample_filename(smp.subject_id, smp.session_id, smp.condition_id, smp.stack_id, smp.index_in_stack)
        (d / name).write_bytes(smp.image.astype("<f4").tobytes())


def load_dataset(directory) -> tuple[Dataset, dict]:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    spec = DatasetSpec.from_dict(meta["spec"])
    shape = spec.image_shape
    rows = []
    for path in d.glob("s*_e*_c*_k*_i*.f32"):
        parts = path.stem.split("_")
        s, e, c, k, i = (int(p[1:]) for p in parts)
        img = np.fromfile(path, dtype="<f4")
        if img.size != math.prod(shape):
            raise ValueError(f"{path.name}: expected {math.prod(shape)} values, found {img.size}")
        rows.append(((s, e, k, i), c, img.reshape(shape)))
    rows.sort(key=lambda r: r[0])
    return (
        Dataset(
            images=np.stack([r[2] for r in rows]).astype(np.float32),
            subject=np.array([r[0][0] for r in rows], dtype=np.int64),
            session=np.array([r[0][1] for r in rows], dtype=np.int64),
            condition=np.array([r[1] for r in rows], dtype=np.int64),
            stack=np.array([r[0][2] for r in rows], dtype=np.int64),
            index=np.array([r[0][3] for r in rows], dtype=np.int64),
            spec=spec,
        ),
        meta.get("split", {}),
    )
