"""Interaction data: triplet-file I/O, splitting, question statistics, and the IRT simulator."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numkernel import seeded_rng

MAX_LEN = 200


class DataFormatError(ValueError):
    """Raised for malformed triplet files, with the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Interaction:
    question_id: int
    response: int


@dataclass(frozen=True)
class StudentSequence:
    questions: tuple[int, ...]
    responses: tuple[int, ...]

    def __post_init__(self):
        if len(self.questions) != len(self.responses):
            raise ValueError("questions and responses differ in length")
        if len(self.questions) < 2:
            raise ValueError("a sequence needs at least two interactions")
        if any(r not in (0, 1) for r in self.responses):
            raise ValueError("responses must be 0 or 1")

    @classmethod
    def from_interactions(cls, interactions: Sequence[Interaction]) -> "StudentSequence":
        return cls(tuple(x.question_id for x in interactions), tuple(x.response for x in interactions))

    @property
    def length(self) -> int:
        return len(self.questions)

    def __len__(self) -> int:
        return len(self.questions)

    @property
    def interactions(self) -> list[Interaction]:
        return [Interaction(q, r) for q, r in zip(self.questions, self.responses)]


@dataclass(frozen=True)
class Dataset:
    num_questions: int
    sequences: tuple[StudentSequence, ...]
    name: str = "dataset"

    def __post_init__(self):
        if self.num_questions < 1:
            raise ValueError("num_questions must be positive")
        if not self.sequences:
            raise ValueError(f"dataset {self.name!r} has no sequences")
        for s in self.sequences:
            if min(s.questions) < 0 or max(s.questions) >= self.num_questions:
                raise ValueError(f"question id outside [0, {self.num_questions})")

    @property
    def num_interactions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def __len__(self) -> int:
        return len(self.sequences)


@dataclass(frozen=True)
class QuestionStats:
    counts: np.ndarray
    incorrect: np.ndarray

    @property
    def num_questions(self) -> int:
        return len(self.counts)

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0

    @property
    def difficulty(self) -> np.ndarray:
        """Empirical incorrect rate; NaN where the question never occurs."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.incorrect / np.maximum(self.counts, 1), np.nan)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _ints(line: str, lineno: int, what: str) -> list[int]:
    try:
        return [int(tok) for tok in line.split(",") if tok.strip() != ""]
    except ValueError:
        raise DataFormatError(f"non-integer token in {what}", lineno) from None


def segment(questions: Sequence[int], responses: Sequence[int], max_len: int = MAX_LEN) -> list[StudentSequence]:
    """Cut a trajectory into consecutive pieces of at most ``max_len``, dropping pieces shorter than 2."""
    out = []
    for start in range(0, len(questions), max_len):
        q = tuple(questions[start : start + max_len])
        if len(q) >= 2:
            out.append(StudentSequence(q, tuple(responses[start : start + max_len])))
    return out


def parse_sequence_text(text: str, num_questions: int | None = None, max_len: int = MAX_LEN, name: str = "dataset") -> Dataset:
    lines = [ln.strip() for ln in text.replace("\r\n", "\n").split("\n")]
    while lines and lines[-1] == "":
        lines.pop()
    if len(lines) % 3 != 0:
        raise DataFormatError(f"expected groups of 3 lines, got {len(lines)} lines", len(lines))
    sequences: list[StudentSequence] = []
    max_id = 0
    for g in range(0, len(lines), 3):
        n_line = g + 1
        try:
            t = int(lines[g])
        except ValueError:
            raise DataFormatError("sequence length is not an integer", n_line) from None
        qs = _ints(lines[g + 1], n_line + 1, "question ids")
        rs = _ints(lines[g + 2], n_line + 2, "responses")
        if len(qs) != t:
            raise DataFormatError(f"expected {t} question ids, got {len(qs)}", n_line + 1)
        if len(rs) != t:
            raise DataFormatError(f"expected {t} responses, got {len(rs)}", n_line + 2)
        if any(q < 1 for q in qs):
            raise DataFormatError("question ids are 1-based; found id < 1", n_line + 1)
        if any(r not in (0, 1) for r in rs):
            raise DataFormatError("responses must be 0 or 1", n_line + 2)
        if qs:
            max_id = max(max_id, max(qs))
        sequences.extend(segment([q - 1 for q in qs], rs, max_len))
    if not sequences:
        raise DataFormatError("no sequence with at least 2 interactions")
    if num_questions is None:
        num_questions = max_id
    elif max_id > num_questions:
        raise DataFormatError(f"question id {max_id} exceeds num_questions={num_questions}")
    return Dataset(num_questions, tuple(sequences), name)


def parse_sequence_file(path, num_questions: int | None = None, max_len: int = MAX_LEN) -> Dataset:
    path = Path(path)
    return parse_sequence_text(path.read_text(encoding="utf-8"), num_questions, max_len, name=path.stem)


def format_sequences(dataset: Dataset) -> str:
    if not dataset.sequences:
        raise ValueError("cannot write an empty dataset")
    chunks = []
    for s in dataset.sequences:
        chunks.append(
            f"{len(s)}\n{','.join(str(q + 1) for q in s.questions)}\n{','.join(map(str, s.responses))}\n"
        )
    return "".join(chunks)


def write_sequence_file(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.write_text(format_sequences(dataset), encoding="utf-8", newline="\n")
    return path


def split_dataset(
    dataset: Dataset, fractions: tuple[float, float, float] = (0.7, 0.1, 0.2), seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle whole student sequences and cut into train/valid/test."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(dataset.sequences)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    n_test = n - n_train - n_valid
    if min(n_train, n_valid, n_test) < 1:
        raise ValueError(f"{n} sequences are too few for split {fractions}")
    order = seeded_rng(seed).permutation(n)
    parts = (order[:n_train], order[n_train : n_train + n_valid], order[n_train + n_valid :])
    return tuple(
        Dataset(dataset.num_questions, tuple(dataset.sequences[i] for i in idx), f"{dataset.name}:{tag}")
        for idx, tag in zip(parts, ("train", "valid", "test"))
    )


def compute_question_stats(dataset: Dataset) -> QuestionStats:
    counts = np.zeros(dataset.num_questions, dtype=np.int64)
    incorrect = np.zeros(dataset.num_questions, dtype=np.int64)
    for s in dataset.sequences:
        q = np.asarray(s.questions)
        r = np.asarray(s.responses)
        np.add.at(counts, q, 1)
        np.add.at(incorrect, q, 1 - r)
    return QuestionStats(counts, incorrect)


QUESTION_ORDERS = ("uniform", "permutation", "fixed")


@dataclass(frozen=True)
class SyntheticConfig:
    num_questions: int = 50
    num_concepts: int = 5
    students: int = 4000
    steps: int = 50
    increment: float = 0.1
    guess: float = 0.0
    slip: float = 0.0
    discrimination: float = 1.0
    order: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if min(self.num_questions, self.num_concepts, self.students) < 1 or self.steps < 2:
            raise ValueError("num_questions, num_concepts, students must be positive and steps >= 2")
        if self.num_concepts > self.num_questions:
            raise ValueError("num_concepts must not exceed num_questions")
        if not (0 <= self.guess < 1 and 0 <= self.slip < 1):
            raise ValueError("guess and slip must lie in [0, 1)")
        if self.guess + self.slip >= 1:
            raise ValueError("guess + slip must be below 1")
        if self.discrimination < 0:
            raise ValueError("discrimination must be non-negative")
        if self.order not in QUESTION_ORDERS:
            raise ValueError(f"order must be one of {QUESTION_ORDERS}")


SYNTHETIC5 = SyntheticConfig(order="fixed")


@dataclass
class SyntheticResult:
    dataset: Dataset
    concept_of: np.ndarray
    difficulty: np.ndarray
    # rows: student_id, t, question_id, response, true_p_correct
    truth: list[tuple[int, int, int, int, float]] = field(default_factory=list)


def response_probability(cfg: SyntheticConfig, ability, difficulty):
    z = cfg.discrimination * (np.asarray(ability, dtype=np.float64) - difficulty)
    return cfg.guess + (1.0 - cfg.guess - cfg.slip) / (1.0 + np.exp(-z))


def _draw_questions(rng: np.random.Generator, cfg: SyntheticConfig) -> np.ndarray:
    """The simulator's question policy.

    ``uniform`` draws i.i.d. ids; ``permutation`` walks through fresh random
    permutations of all ids (every question once per ``Q`` steps);
    ``fixed`` cycles through ``0..Q-1``.
    """
    q, n = cfg.num_questions, cfg.steps
    if cfg.order == "uniform":
        return rng.integers(0, q, size=n)
    if cfg.order == "permutation":
        reps = -(-n // q)
        return np.concatenate([rng.permutation(q) for _ in range(reps)])[:n]
    return np.arange(n) % q


def generate_synthetic(cfg: SyntheticConfig, name: str = "synthetic") -> SyntheticResult:
    """Simulate students who practise uniformly random questions under a 2PL-with-guess/slip model.

    Each question belongs to one concept.  Practising a concept raises that
    ability by ``cfg.increment`` after the response is drawn; abilities never
    decrease.
    """
    rng = seeded_rng(cfg.seed)
    q_count, c_count = cfg.num_questions, cfg.num_concepts
    # every concept gets at least one question when Q >= C
    concept_of = rng.permutation(np.arange(q_count) % c_count)
    difficulty = rng.standard_normal(q_count)
    sequences = []
    truth = []
    for sid in range(cfg.students):
        theta = rng.standard_normal(c_count)
        qs = _draw_questions(rng, cfg)
        us = rng.random(cfg.steps)
        rs = np.empty(cfg.steps, dtype=np.int64)
        for t in range(cfg.steps):
            q = int(qs[t])
            c = concept_of[q]
            p = float(response_probability(cfg, theta[c], difficulty[q]))
            rs[t] = int(us[t] < p)
            truth.append((sid, t, q, int(rs[t]), p))
            theta[c] += cfg.increment
        sequences.append(StudentSequence(tuple(int(x) for x in qs), tuple(int(x) for x in rs)))
    ds = Dataset(q_count, tuple(sequences), name)
    return SyntheticResult(ds, concept_of, difficulty, truth)


def write_ground_truth_csv(result: SyntheticResult, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "t", "question_id", "response", "true_p_correct"])
        for sid, t, q, r, p in result.truth:
            w.writerow([sid, t, q + 1, r, repr(p)])
    return path


@dataclass(frozen=True)
class Batch:
    """Right-padded integer arrays for a group of sequences."""

    questions: np.ndarray  # (B, T_max)
    responses: np.ndarray  # (B, T_max)
    lengths: np.ndarray  # (B,)

    @property
    def size(self) -> int:
        return len(self.lengths)

    @property
    def max_len(self) -> int:
        return self.questions.shape[1]


def pack_sequences(sequences: Sequence[StudentSequence]) -> Batch:
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    t_max = int(lengths.max())
    q = np.zeros((len(sequences), t_max), dtype=np.int64)
    r = np.zeros_like(q)
    for b, s in enumerate(sequences):
        q[b, : len(s)] = s.questions
        r[b, : len(s)] = s.responses
    return Batch(q, r, lengths)


def batches(sequences: Sequence[StudentSequence], size: int) -> list[Batch]:
    return [pack_sequences(sequences[i : i + size]) for i in range(0, len(sequences), size)]
