"""Synthetic paired features and the caption/image cleaning rules.

Cleaning happens in two passes. The structural filters come first: a caption
shorter than 5 characters or an aspect ratio above 3 drops the record. The
survivors are then routed by similarity score. A score of at least the
threshold (default 0.25) keeps the record, and anything lower goes to the
rewrite queue for caption augmentation.

Records travel as JSON lines with the fields ``id``, ``caption_length``,
``aspect_ratio``, ``sim_score`` and ``lang``, plus optional ``caption`` and
``source``. When ``caption`` is present, its code-point length overrides
``caption_length``.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable


from .numerics import Matrix, gaussian, make_rng

log = logging.getLogger(__name__)

MIN_CAPTION_CHARS = 5
MAX_ASPECT_RATIO = 3.0
DEFAULT_THRESHOLD = 0.25
LANGS = ("EN", "CN")
RECORD_FIELDS = ("id", "caption_length", "aspect_ratio", "sim_score", "lang")


class RecordError(ValueError):
    pass


@dataclass(frozen=True)
class PairRecord:
    id: str
    caption_length: int
    aspect_ratio: float
    sim_score: float
    lang: str = "EN"
    caption: str | None = None
    source: str = "unknown"
    note: str | None = None

    def __post_init__(self):
        if self.caption is not None:
            object.__setattr__(self, "caption_length", len(self.caption))
        if self.caption_length < 0:
            raise RecordError(f"record {self.id}: caption_length must be >= 0")
        if not self.aspect_ratio > 0:
            raise RecordError(f"record {self.id}: aspect_ratio must be > 0")
        if not -1.0 <= self.sim_score <= 1.0:
            raise RecordError(f"record {self.id}: sim_score must lie in [-1, 1]")
        if self.lang not in LANGS:
            raise RecordError(f"record {self.id}: lang must be one of {LANGS}")

    @classmethod
    def from_dict(cls, obj: dict) -> "PairRecord":
        missing = [k for k in RECORD_FIELDS if k not in obj and not (k == "caption_length" and "caption" in obj)]
        if missing:
            raise RecordError(f"missing fields {missing}")
        unknown = set(obj) - set(RECORD_FIELDS) - {"caption", "source", "note"}
        if unknown:
            raise RecordError(f"unknown fields {sorted(unknown)}")
        try:
            return cls(
                id=str(obj["id"]),
                caption_length=int(obj.get("caption_length", 0)),
                aspect_ratio=float(obj["aspect_ratio"]),
                sim_score=float(obj["sim_score"]),
                lang=str(obj["lang"]),
                caption=obj.get("caption"),
                source=str(obj.get("source", "unknown")),
                note=obj.get("note"),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, RecordError):
                raise
            raise RecordError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class CleanReport:
    kept: list[PairRecord] = field(default_factory=list)
    dropped_short_text: list[PairRecord] = field(default_factory=list)
    dropped_aspect: list[PairRecord] = field(default_factory=list)
    rewrite_queue: list[PairRecord] = field(default_factory=list)
    per_source: dict[str, Counter] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return len(self.kept) + len(self.dropped_short_text) + len(self.dropped_aspect) + len(self.rewrite_queue)

    def counts(self) -> dict[str, int]:
        return {
            "kept": len(self.kept),
            "dropped_short_text": len(self.dropped_short_text),
            "dropped_aspect": len(self.dropped_aspect),
            "rewrite_queue": len(self.rewrite_queue),
            "total": self.total,
        }


def classify(record: PairRecord, threshold: float = DEFAULT_THRESHOLD) -> str:
    if record.caption_length < MIN_CAPTION_CHARS:
        return "dropped_short_text"
    if record.aspect_ratio > MAX_ASPECT_RATIO:
        return "dropped_aspect"
    if record.sim_score >= threshold:
        return "kept"
    return "rewrite_queue"


def clean(records: Iterable[PairRecord], threshold: float = DEFAULT_THRESHOLD) -> CleanReport:
    report = CleanReport()
    for rec in records:
        bucket = classify(rec, threshold)
        getattr(report, bucket).append(rec)
        report.per_source.setdefault(rec.source, Counter())[bucket] += 1
    return report


def identity_rewriter(record: PairRecord) -> PairRecord:
    return record


def keep_score(record: PairRecord) -> float:
    return record.sim_score


def rewrite_stub(record: PairRecord, rewriter: Callable[[PairRecord], PairRecord] = identity_rewriter,
                 scorer: Callable[[PairRecord], float] = keep_score) -> PairRecord:
    """Rewrite a queued record's caption and re-score it.

    A failing rewriter or scorer leaves the record as it was, with ``note``
    describing the failure, so it stays in the queue on the next clean.
    """
    try:
        rewritten = rewriter(record)
        return replace(rewritten, sim_score=float(scorer(rewritten)), note=None)
    except Exception as exc:  # noqa: BLE001 - any plugin failure is recorded, not raised
        log.warning("rewrite failed for %s: %s", record.id, exc)
        return replace(record, note=f"rewrite failed: {exc}")


def read_records(lines: Iterable[str]) -> list[PairRecord]:
    """Parse JSON lines; blank lines are skipped. Errors carry the 1-based line number."""
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise RecordError("expected a JSON object")
            out.append(PairRecord.from_dict(obj))
        except (json.JSONDecodeError, RecordError) as exc:
            raise RecordError(f"line {lineno}: {exc}") from exc
    return out


def write_records(records: Iterable[PairRecord]) -> str:
    return "".join(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n" for r in records)


@dataclass(frozen=True)
class SyntheticTask:
    n_pairs: int = 256
    d_in: int = 16
    noise_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 2:
            raise ValueError(f"n_pairs must be >= 2, got {self.n_pairs}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")


@dataclass
class SyntheticPairs:
    x_img: Matrix
    x_txt: Matrix

    def __len__(self) -> int:
        return self.x_img.shape[0]


def synth_pairs(task: SyntheticTask) -> SyntheticPairs:
    """Gaussian anchors as image features; text features are noisy copies."""
    rng = make_rng(task.seed)
    anchors = gaussian(rng, task.n_pairs, task.d_in, 1.0)
    if task.noise_std == 0:
        return SyntheticPairs(anchors, anchors.copy())
    return SyntheticPairs(anchors, anchors + gaussian(rng, task.n_pairs, task.d_in, task.noise_std))


def synthetic_corpus(n: int = 100, seed: int = 0) -> list[PairRecord]:
    """Random cleaning corpus that hits every rule and each boundary value."""
    rng = make_rng(seed)
    lengths = [0, 3, 4, 5, 6, 20, 80]
    aspects = [0.3, 1.0, 2.5, 3.0, 3.01, 4.0]
    scores = [-0.1, 0.1, 0.2, 0.2499, 0.25, 0.2501, 0.4, 0.9]
    out = []
    for i in range(n):
        out.append(PairRecord(
            id=f"r{i:04d}",
            caption_length=int(rng.choice(lengths)),
            aspect_ratio=float(rng.choice(aspects)),
            sim_score=float(rng.choice(scores)),
            lang=LANGS[i % 2],
            source=("laion", "wukong", "coyo")[i % 3],
        ))
    return out
