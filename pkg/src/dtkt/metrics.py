"""AUROC, probability-difference matrices, update-failure statistics and mastery decrease."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.stats import rankdata

from . import model as km
from ._parallel import ordered_map
from .numkernel import no_grad
from .data import Batch, Dataset, QuestionStats, batches
from .model import WriteMode

EVAL_BATCH = 64


@dataclass(frozen=True)
class PredictionRecords:
    """Parallel arrays of (target question, predicted probability, observed label)."""

    questions: np.ndarray
    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if not (len(self.questions) == len(self.probs) == len(self.labels)):
            raise ValueError("record arrays differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def concat(cls, parts) -> "PredictionRecords":
        parts = list(parts)
        if not parts:
            return cls(np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64))
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("questions", "probs", "labels")))


def auroc(scores, labels) -> float | None:
    """Mann-Whitney AUROC with average ranks for ties; ``None`` if only one class is present."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_question_auroc(records: PredictionRecords, num_questions: int | None = None) -> dict[int, float | None]:
    nq = num_questions if num_questions is not None else int(records.questions.max()) + 1
    out: dict[int, float | None] = {}
    order = np.argsort(records.questions, kind="stable")
    qs = records.questions[order]
    bounds = np.searchsorted(qs, np.arange(nq + 1))
    for i in range(nq):
        sel = order[bounds[i] : bounds[i + 1]]
        if len(sel):
            out[i] = auroc(records.probs[sel], records.labels[sel])
    return out


@dataclass(frozen=True)
class CountGroupSummary:
    k: int
    top_ids: list[int]
    bottom_ids: list[int]
    top_mean_auroc: float
    bottom_mean_auroc: float
    top_share: float  # percent of all interactions
    bottom_share: float


def count_group_summary(per_q: Mapping[int, float | None], stats: QuestionStats, k: int = 10) -> CountGroupSummary:
    """Compare mean AUROC of the ``k`` most and ``k`` least frequent questions.

    Only questions with a defined AUROC are ranked; count ties break by id.
    """
    eligible = sorted((i for i, v in per_q.items() if v is not None), key=lambda i: (-int(stats.counts[i]), i))
    if len(eligible) < 2 * k:
        shrunk = len(eligible) // 2
        warnings.warn(f"only {len(eligible)} questions have a defined AUROC; k shrunk from {k} to {shrunk}")
        k = shrunk
    if k < 1:
        raise ValueError("need at least two questions with a defined AUROC")
    top, bottom = eligible[:k], eligible[-k:]
    total = stats.total
    return CountGroupSummary(
        k=k,
        top_ids=top,
        bottom_ids=bottom,
        top_mean_auroc=float(np.mean([per_q[i] for i in top])),
        bottom_mean_auroc=float(np.mean([per_q[i] for i in bottom])),
        top_share=100.0 * float(stats.counts[top].sum()) / total,
        bottom_share=100.0 * float(stats.counts[bottom].sum()) / total,
    )


@dataclass
class DeltaPMatrix:
    """Event-mean probability differences after correct answers.

    Row ``i`` conditions on a correct answer to question ``i``; column ``j`` is
    the affected question.  ``event_question``/``event_diag`` keep the diagonal
    change of every single event for extreme-value statistics.
    """

    sums: np.ndarray  # (Q, Q) float64
    counts: np.ndarray  # (Q,) events per row
    event_question: np.ndarray
    event_diag: np.ndarray

    @property
    def num_questions(self) -> int:
        return len(self.counts)

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0

    @property
    def values(self) -> np.ndarray:
        """Event means; rows without events are NaN (absent, not zero)."""
        out = np.full(self.sums.shape, np.nan)
        ok = self.present
        out[ok] = self.sums[ok] / self.counts[ok, None]
        return out

    @classmethod
    def from_events(cls, num_questions: int, event_question, event_delta) -> "DeltaPMatrix":
        """Build from explicit per-event difference vectors (``event_delta`` has shape (E, Q))."""
        eq = np.asarray(event_question, dtype=np.int64)
        ed = np.asarray(event_delta, dtype=np.float64).reshape(len(eq), num_questions)
        sums = np.zeros((num_questions, num_questions))
        counts = np.zeros(num_questions, dtype=np.int64)
        for i, row in zip(eq, ed):
            sums[i] += row
            counts[i] += 1
        return cls(sums, counts, eq, ed[np.arange(len(eq)), eq] if len(eq) else np.zeros(0))

    def to_csv(self, path) -> Path:
        path = Path(path)
        vals = self.values
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["question_id", "events"] + [f"q{j + 1}" for j in range(self.num_questions)])
            for i in range(self.num_questions):
                cells = ["" if math.isnan(v) else repr(float(v)) for v in vals[i]]
                w.writerow([i + 1, int(self.counts[i])] + cells)
        return path


def _delta_chunk(args) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    with no_grad():
        return _delta_chunk_inner(*args)


def _delta_chunk_inner(params, weights, batch, mode):
    nq = weights.shape[0]
    sums = np.zeros((nq, nq))
    counts = np.zeros(nq, dtype=np.int64)
    eq, ed = [], []
    memory = km.initial_memory(params, batch.size)
    before = km.predict_all_batch(params, memory, weights).data
    for t in range(batch.max_len):
        q_t, r_t = batch.questions[:, t], batch.responses[:, t]
        memory = km.write_batch(params, memory, weights, q_t, r_t, mode)
        after = km.predict_all_batch(params, memory, weights).data
        sel = np.flatnonzero((r_t == 1) & (t < batch.lengths))
        if len(sel):
            diff = after[sel].astype(np.float64) - before[sel].astype(np.float64)
            np.add.at(sums, q_t[sel], diff)
            np.add.at(counts, q_t[sel], 1)
            eq.append(q_t[sel])
            ed.append(diff[np.arange(len(sel)), q_t[sel]])
        before = after
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)  # noqa: E731
    return sums, counts, cat(eq, np.int64), cat(ed, np.float64)


def delta_p_matrix(params, dataset: Dataset, mode: WriteMode = WriteMode.ADD_ERASE) -> DeltaPMatrix:
    """Probability change of every question caused by each correct answer in ``dataset``.

    Every interaction of every sequence is consumed, last one included, with
    the write mode held fixed along the whole trajectory.
    """
    with no_grad():
        weights = km.concept_weights(params)
    mode = WriteMode(mode)
    parts = ordered_map(_delta_chunk, [(params, weights, b, mode) for b in batches(dataset.sequences, EVAL_BATCH)])
    nq = dataset.num_questions
    sums = np.zeros((nq, nq))
    counts = np.zeros(nq, dtype=np.int64)
    for s, c, _, _ in parts:
        sums += s
        counts += c
    return DeltaPMatrix(
        sums, counts, np.concatenate([p[2] for p in parts]), np.concatenate([p[3] for p in parts])
    )


@dataclass(frozen=True)
class UpdateFailureReport:
    ratio: float  # percent of all questions
    average: float
    maximum: float
    threshold: float
    rule: str
    flagged: list[int]
    num_questions: int


FLAG_RULES = ("mean", "any")


def update_failure_from_events(
    num_questions: int, event_question, event_diag, th: float = 0.001, rule: str = "mean"
) -> UpdateFailureReport:
    """Flag questions whose own probability drops after a correct answer.

    ``rule="mean"`` flags question ``i`` when the event mean of its diagonal
    change is below ``-th``; ``rule="any"`` when any single event is.  Average
    and maximum are taken over ``|change|`` of the events below ``-th`` that
    belong to flagged questions.
    """
    if rule not in FLAG_RULES:
        raise ValueError(f"unknown flag rule {rule!r}; expected one of {FLAG_RULES}")
    eq = np.asarray(event_question, dtype=np.int64)
    ed = np.asarray(event_diag, dtype=np.float64)
    flagged = []
    for i in range(num_questions):
        d = ed[eq == i]
        if not len(d):
            continue
        if (rule == "mean" and d.mean() < -th) or (rule == "any" and (d < -th).any()):
            flagged.append(i)
    hit = np.isin(eq, flagged) & (ed < -th)
    mags = np.abs(ed[hit])
    return UpdateFailureReport(
        ratio=100.0 * len(flagged) / num_questions,
        average=float(mags.mean()) if len(mags) else 0.0,
        maximum=float(mags.max()) if len(mags) else 0.0,
        threshold=th,
        rule=rule,
        flagged=flagged,
        num_questions=num_questions,
    )


def update_failure_stats(matrix: DeltaPMatrix, th: float = 0.001, rule: str = "mean") -> UpdateFailureReport:
    if not matrix.present.any():
        raise ValueError("probability-difference matrix has no populated rows")
    return update_failure_from_events(matrix.num_questions, matrix.event_question, matrix.event_diag, th, rule)


def md(matrix) -> float:
    """Mean over populated rows of the mean magnitude of that row's negative entries.

    Accepts a :class:`DeltaPMatrix` or a (Q, Q) array with NaN rows for absent
    conditioning questions.  A row without negative entries contributes 0.
    """
    vals = matrix.values if isinstance(matrix, DeltaPMatrix) else np.asarray(matrix, dtype=np.float64)
    rows = [row for row in vals if not np.all(np.isnan(row))]
    if not rows:
        raise ValueError("md needs at least one populated row")
    per_row = []
    for row in rows:
        neg = row[row < 0]
        per_row.append(float(np.abs(neg).mean()) if len(neg) else 0.0)
    return float(np.mean(per_row))


def fully_negative_share(matrix) -> tuple[float, int]:
    """Percent of populated rows ``i`` whose every off-diagonal entry is negative, and the row count."""
    vals = matrix.values if isinstance(matrix, DeltaPMatrix) else np.asarray(matrix, dtype=np.float64)
    n = vals.shape[0]
    hits = 0
    populated = 0
    for i in range(n):
        row = vals[i]
        if np.all(np.isnan(row)):
            continue
        populated += 1
        off = np.delete(row, i)
        if np.all(off < 0):
            hits += 1
    return (100.0 * hits / populated if populated else 0.0), populated


def predict_records(params, dataset: Dataset, mode: WriteMode = WriteMode.ADD_ERASE) -> PredictionRecords:
    """Next-response predictions for every step ``t >= 2`` of every sequence."""
    with no_grad():
        weights = km.concept_weights(params)
    mode = WriteMode(mode)

    def run(batch: Batch) -> PredictionRecords:
        with no_grad():
            return _records(batch)

    def _records(batch: Batch) -> PredictionRecords:
        memory = km.initial_memory(params, batch.size)
        qs, ps, ys = [], [], []
        for t in range(batch.max_len - 1):
            memory = km.write_batch(params, memory, weights, batch.questions[:, t], batch.responses[:, t], mode)
            p = km.predict_label_batch(params, memory, weights, batch.questions[:, t + 1]).data
            valid = t + 1 < batch.lengths
            qs.append(batch.questions[valid, t + 1])
            ps.append(p[valid].astype(np.float64))
            ys.append(batch.responses[valid, t + 1])
        return PredictionRecords(np.concatenate(qs), np.concatenate(ps), np.concatenate(ys))

    return PredictionRecords.concat(ordered_map(run, batches(dataset.sequences, EVAL_BATCH)))
