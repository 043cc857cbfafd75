"""Subject-independent verification: cosine matching, score generation and error rates.

Conventions: a pair is accepted when ``score >= threshold``.  Candidate
thresholds are the distinct observed scores plus +inf.

    FMR(t)  = fraction of impostor scores >= t
    FNMR(t) = fraction of genuine scores  <  t
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_FMR_TARGETS = (0.01, 0.1)


@dataclass
class TemplateStack:
    subject_id: int
    session_id: int
    embeddings: np.ndarray
    stack_id: int = 0

    def __post_init__(self):
        emb = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        if emb.shape[0] == 0:
            raise ValueError("template stack is empty")
        if not np.isfinite(emb).all():
            raise ValueError("template stack contains non-finite values")
        self.embeddings = emb


@dataclass
class Pair:
    label: str
    subject_a: int
    subject_b: int
    session_a: int
    session_b: int
    score: float


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray
    pairs: list[Pair] = field(default_factory=list)

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).reshape(-1)
        self.impostor = np.asarray(self.impostor, dtype=np.float64).reshape(-1)

    def check(self) -> None:
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise ValueError(f"need genuine and impostor scores, got {self.genuine.size} and {self.impostor.size}")
        if not (np.isfinite(self.genuine).all() and np.isfinite(self.impostor).all()):
            raise ValueError("scores must be finite")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["label", "subject_a", "subject_b", "session_a", "session_b", "score"])
        for p in self.pairs:
            writer.writerow([p.label, p.subject_a, p.subject_b, p.session_a, p.session_b, repr(float(p.score))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ScoreSet":
        pairs = [
            Pair(r["label"], int(r["subject_a"]), int(r["subject_b"]), int(r["session_a"]), int(r["session_b"]), float(r["score"]))
            for r in csv.DictReader(io.StringIO(text))
        ]
        return cls(
            [p.score for p in pairs if p.label == "genuine"],
            [p.score for p in pairs if p.label == "impostor"],
            pairs,
        )


# ------------------------------------------------------------------- matching


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.size} vs {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def match_score(template: TemplateStack, probe: TemplateStack) -> float:
    """Mean cosine similarity over all template x probe embedding pairs."""
    a, b = template.embeddings, probe.embeddings
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"embedding dims differ: {a.shape[1]} vs {b.shape[1]}")
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine similarity is undefined for a zero vector")
    sims = np.clip((a / na[:, None]) @ (b / nb[:, None]).T, -1.0, 1.0)
    return float(sims.mean())


def gen_protocol(stacks: Sequence[TemplateStack], training_subjects: Iterable[int] = ()) -> ScoreSet:
    """All template x probe pairs: first-session stacks enrol, later sessions probe.

    Raises if an evaluation subject was seen in training or fewer than two
    usable subjects remain.
    """
    overlap = sorted({s.subject_id for s in stacks} & set(training_subjects))
    if overlap:
        raise ValueError(f"evaluation subjects overlap the training set: {overlap}")
    by_subject: dict[int, list[TemplateStack]] = {}
    for st in stacks:
        by_subject.setdefault(st.subject_id, []).append(st)
    templates, probes = [], []
    for subject in sorted(by_subject):
        own = by_subject[subject]
        sessions = sorted({st.session_id for st in own})
        if len(sessions) < 2:
            log.warning("subject %d has a single session; skipped", subject)
            continue
        key = lambda st: (st.session_id, st.stack_id)  # noqa: E731
        templates += sorted((st for st in own if st.session_id == sessions[0]), key=key)
        probes += sorted((st for st in own if st.session_id != sessions[0]), key=key)
    if len({t.subject_id for t in templates}) < 2:
        raise ValueError("need at least two subjects with two sessions to form impostor pairs")
    pairs = []
    for t in templates:
        for p in probes:
            label = "genuine" if t.subject_id == p.subject_id else "impostor"
            pairs.append(Pair(label, t.subject_id, p.subject_id, t.session_id, p.session_id, match_score(t, p)))
    return ScoreSet(
        [p.score for p in pairs if p.label == "genuine"],
        [p.score for p in pairs if p.label == "impostor"],
        pairs,
    )


# -------------------------------------------------------------------- metrics


def _sweep(scores: ScoreSet):
    """Candidate thresholds ascending with FMR and FNMR at each."""
    scores.check()
    g = np.sort(scores.genuine)
    i = np.sort(scores.impostor)
    thresholds = np.append(np.unique(np.concatenate([g, i])), np.inf)
    fmr = (i.size - np.searchsorted(i, thresholds, side="left")) / i.size
    fnmr = np.searchsorted(g, thresholds, side="left") / g.size
    return thresholds, fmr, fnmr


def compute_eer(scores: ScoreSet) -> tuple[float, float]:
    """(EER, threshold): the mean of FMR and FNMR where they are closest; ties go to the lower threshold."""
    t, fmr, fnmr = _sweep(scores)
    k = int(np.argmin(np.abs(fmr - fnmr)))
    return float((fmr[k] + fnmr[k]) / 2), float(t[k])


def compute_gmr_at_fmr(scores: ScoreSet, targets: Sequence[float] = DEFAULT_FMR_TARGETS) -> dict[float, tuple[float, float]]:
    """target -> (GMR, threshold) at the lowest threshold whose FMR <= target."""
    t, fmr, fnmr = _sweep(scores)
    out = {}
    for target in targets:
        k = int(np.flatnonzero(fmr <= target)[0])
        out[float(target)] = (float(1 - fnmr[k]), float(t[k]))
    return out


def compute_auc(scores: ScoreSet) -> float:
    """P(genuine > impostor) + 0.5 P(tie), via midranks."""
    scores.check()
    from scipy.stats import rankdata

    g, i = scores.genuine, scores.impostor
    ranks = rankdata(np.concatenate([g, i]))
    u = ranks[: g.size].sum() - g.size * (g.size + 1) / 2
    return float(u / (g.size * i.size))


def roc_points(scores: ScoreSet) -> list[tuple[float, float]]:
    """(FMR, GMR) for thresholds from +inf downwards; FMR is nondecreasing."""
    t, fmr, fnmr = _sweep(scores)
    return [(float(a), float(1 - b)) for a, b in zip(fmr[::-1], fnmr[::-1])]


def roc_auc_trapezoid(scores: ScoreSet) -> float:
    pts = np.array(roc_points(scores))
    return float(np.trapezoid(pts[:, 1], pts[:, 0]))


@dataclass
class VerificationReport:
    eer: float
    gmr_at: dict[float, float]
    auc: float
    roc: list[tuple[float, float]]
    thresholds: dict

    def to_dict(self) -> dict:
        def enc(x):
            return "inf" if isinstance(x, float) and math.isinf(x) else x

        return {
            "eer": self.eer,
            "gmr_at": {str(k): v for k, v in self.gmr_at.items()},
            "auc": self.auc,
            "roc": [list(p) for p in self.roc],
            "thresholds": {
                "eer": enc(self.thresholds["eer"]),
                "gmr_at": {str(k): enc(v) for k, v in self.thresholds["gmr_at"].items()},
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def evaluate(scores: ScoreSet, targets: Sequence[float] = DEFAULT_FMR_TARGETS) -> VerificationReport:
    eer, t_eer = compute_eer(scores)
    gmr = compute_gmr_at_fmr(scores, targets)
    return VerificationReport(
        eer=eer,
        gmr_at={k: v[0] for k, v in gmr.items()},
        auc=compute_auc(scores),
        roc=roc_points(scores),
        thresholds={"eer": t_eer, "gmr_at": {k: v[1] for k, v in gmr.items()}},
    )
