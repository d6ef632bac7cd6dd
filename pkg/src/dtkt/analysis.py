"""Audit protocols on a trained model: update failure, forgetting, write-mode probes, scenarios.

Question ids in files and JSON written here are 1-based, like the triplet
data format; everything in memory is 0-based.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

from . import model as km
from .checkpoint import load_checkpoint
from .data import Dataset, QuestionStats, compute_question_stats, split_dataset
from .metrics import (
    FLAG_RULES,
    DeltaPMatrix,
    auroc,
    count_group_summary,
    delta_p_matrix,
    fully_negative_share,
    md,
    per_question_auroc,
    predict_records,
    update_failure_stats,
)
from .model import WriteMode
from .numkernel import no_grad

SCHEMA_VERSION = "1.0"
SPLITS = ("train", "valid", "test")


def audit_schema() -> dict:
    return json.loads(resources.files("dtkt").joinpath("schemas/audit_report.schema.json").read_text("utf-8"))


@dataclass(frozen=True)
class ProbeEntry:
    md: float
    fully_negative_pct: float
    populated_rows: int


@dataclass
class ProbeReport:
    entries: dict[WriteMode, ProbeEntry]
    alpha: float | None = None
    excluded_rows: dict[WriteMode, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "modes": {
                m.value: {
                    "md": e.md,
                    "fully_negative_pct": e.fully_negative_pct,
                    "populated_rows": e.populated_rows,
                    "excluded_rows": self.excluded_rows.get(m, 0),
                }
                for m, e in self.entries.items()
            },
        }


def probe_from_matrices(matrices: dict[WriteMode, DeltaPMatrix], alpha: float | None = None) -> ProbeReport:
    entries, excluded = {}, {}
    for mode, mat in matrices.items():
        pct, populated = fully_negative_share(mat)
        entries[mode] = ProbeEntry(md(mat), pct, populated)
        excluded[mode] = mat.num_questions - populated
    return ProbeReport(entries, alpha, excluded)


def interpretability_probe(
    params, dataset: Dataset, modes: Iterable[WriteMode] = tuple(WriteMode), alpha: float | None = None
) -> tuple[ProbeReport, dict[WriteMode, DeltaPMatrix]]:
    """Rebuild the probability-difference matrix under each write mode and summarise it.

    md and the fully-negative percentage of a mode come from the same matrix,
    which is returned alongside the report.
    """
    matrices = {WriteMode(m): delta_p_matrix(params, dataset, WriteMode(m)) for m in modes}
    return probe_from_matrices(matrices, alpha), matrices


@dataclass(frozen=True)
class ScenarioTrace:
    mode: WriteMode
    schedule: list[int]
    mastery: list[float]  # length len(schedule) + 1, starting from the initial state


def difficulty_schedule(stats: QuestionStats) -> list[int]:
    """All questions, hardest first; ties by ascending id."""
    diff = stats.difficulty
    missing = [i for i in range(len(diff)) if math.isnan(diff[i])]
    if missing:
        raise ValueError(f"difficulty undefined for questions {[i + 1 for i in missing[:10]]}")
    return sorted(range(len(diff)), key=lambda i: (-diff[i], i))


def scenario_simulation(params, stats: QuestionStats, mode: WriteMode = WriteMode.ADD_ONLY) -> ScenarioTrace:
    """A student answers every question correctly, hardest first; track the mean predicted mastery."""
    schedule = difficulty_schedule(stats)
    mode = WriteMode(mode)
    with no_grad():
        return ScenarioTrace(mode, schedule, _mastery_trace(params, schedule, mode))


def _mastery_trace(params, schedule: list[int], mode: WriteMode) -> list[float]:
    weights = km.concept_weights(params)
    memory = km.initial_memory(params, 1)
    mastery = [float(np.mean(km.predict_all_batch(params, memory, weights).data, dtype=np.float64))]
    for q in schedule:
        memory = km.write_batch(params, memory, weights, [q], [1], mode)
        mastery.append(float(np.mean(km.predict_all_batch(params, memory, weights).data, dtype=np.float64)))
    return mastery


def write_scenario_csv(trace: ScenarioTrace, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "question_id", "average_mastery"])
        w.writerow([0, "", repr(trace.mastery[0])])
        for k, (q, m) in enumerate(zip(trace.schedule, trace.mastery[1:]), start=1):
            w.writerow([k, q + 1, repr(m)])
    return path


def concept_vectors(params) -> np.ndarray:
    return km.concept_weights(params).data


def export_concept_vectors(params, path) -> Path:
    vecs = concept_vectors(params)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["question_id"] + [f"slot_{n + 1}" for n in range(vecs.shape[1])])
        for i, row in enumerate(vecs):
            w.writerow([i + 1] + [repr(float(x)) for x in row])
    return path


def load_concept_vectors(path) -> np.ndarray:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(x) for x in r[1:]] for r in rows], dtype=np.float32)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def successor_report(vectors: np.ndarray, dataset: Dataset, questions: Iterable[int], min_count: int = 15) -> list[dict]:
    """For each question ``i``, the questions that followed it and their concept similarity to ``i``.

    Successors seen fewer than ``min_count`` times after ``i`` are counted
    but not listed.
    """
    nq = dataset.num_questions
    follow = np.zeros((nq, nq), dtype=np.int64)
    for s in dataset.sequences:
        np.add.at(follow, (np.asarray(s.questions[:-1]), np.asarray(s.questions[1:])), 1)
    out = []
    for i in questions:
        kept = [j for j in range(nq) if follow[i, j] >= min_count]
        listed = [{"question_id": j + 1, "count": int(follow[i, j]), "cosine": _cosine(vectors[i], vectors[j])} for j in kept]
        listed.sort(key=lambda d: (-d["count"], d["question_id"]))
        cos = [d["cosine"] for d in listed]
        out.append(
            {
                "question_id": i + 1,
                "successors": listed,
                "filtered_out": int(((follow[i] > 0) & (follow[i] < min_count)).sum()),
                "mean_cosine": float(np.mean(cos)) if cos else None,
            }
        )
    return out


def _finite(x: float | None) -> float | None:
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def resolve_splits(dataset: Dataset, extra: dict) -> tuple[Dataset, Dataset, Dataset]:
    split = extra.get("split", {})
    fractions = tuple(split.get("fractions", (0.7, 0.1, 0.2)))
    return split_dataset(dataset, fractions, int(split.get("seed", 0)))


def full_audit(
    checkpoint_path,
    dataset: Dataset,
    out_dir,
    *,
    split: str = "test",
    th: float = 0.001,
    flag_rule: str = "mean",
    k: int = 10,
    min_successor_count: int = 15,
) -> dict:
    """Run every diagnostic on one checkpoint and write ``audit.json`` plus CSV side files.

    ``dataset`` is the full dataset; it is re-split with the split recorded
    in the checkpoint.  A failing section is recorded under ``errors`` and
    left null; the remaining sections still run.
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    if flag_rule not in FLAG_RULES:
        raise ValueError(f"flag rule must be one of {FLAG_RULES}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(checkpoint_path)
    params = ckpt.params
    if ckpt.config.num_questions != dataset.num_questions:
        raise ValueError(
            f"checkpoint expects {ckpt.config.num_questions} questions, dataset has {dataset.num_questions}"
        )
    parts = dict(zip(SPLITS, resolve_splits(dataset, ckpt.extra)))
    target = parts[split]
    alpha = ckpt.extra.get("train_config", {}).get("alpha")
    report: dict = {
        "schema_version": SCHEMA_VERSION,
        "checkpoint": {"file": Path(checkpoint_path).name, "alpha": alpha, "model": ckpt.config.__dict__},
        "data": {
            "name": dataset.name,
            "split": split,
            "num_questions": dataset.num_questions,
            "sequences": len(target),
            "interactions": target.num_interactions,
        },
        "auroc": None,
        "update_failure": None,
        "md": None,
        "probe": None,
        "scenario": None,
        "concept_vectors": None,
        "errors": {},
    }
    matrices: dict[WriteMode, DeltaPMatrix] = {}

    def section(name, fn):
        try:
            report[name] = fn()
        except Exception as exc:  # noqa: BLE001 - recorded per section by contract
            report["errors"][name] = f"{type(exc).__name__}: {exc}"

    def auroc_section():
        rec = predict_records(params, target)
        per_q = per_question_auroc(rec, dataset.num_questions)
        stats = compute_question_stats(dataset)
        groups = count_group_summary(per_q, stats, k)
        return {
            "global": auroc(rec.probs, rec.labels),
            "per_question": {str(i + 1): _finite(v) for i, v in sorted(per_q.items())},
            "count_groups": {
                "k": groups.k,
                "top_ids": [i + 1 for i in groups.top_ids],
                "bottom_ids": [i + 1 for i in groups.bottom_ids],
                "top_mean_auroc": groups.top_mean_auroc,
                "bottom_mean_auroc": groups.bottom_mean_auroc,
                "top_share_pct": groups.top_share,
                "bottom_share_pct": groups.bottom_share,
            },
        }

    def matrices_section():
        probe, mats = interpretability_probe(params, target, tuple(WriteMode), alpha)
        matrices.update(mats)
        for mode, mat in mats.items():
            mat.to_csv(out / f"delta_p_{mode.value}.csv")
        report["probe"] = probe.to_dict()
        return {m.value: e.md for m, e in probe.entries.items()}

    def update_failure_section():
        mat = matrices[WriteMode.ADD_ERASE]
        uf = update_failure_stats(mat, th, flag_rule)
        return {
            "ratio_pct": uf.ratio,
            "average": uf.average,
            "maximum": uf.maximum,
            "threshold": uf.threshold,
            "rule": uf.rule,
            "flagged": [i + 1 for i in uf.flagged],
            "matrix_file": f"delta_p_{WriteMode.ADD_ERASE.value}.csv",
        }

    def scenario_section():
        stats = compute_question_stats(parts["train"])
        res = {}
        for mode in (WriteMode.ADD_ERASE, WriteMode.ADD_ONLY):
            tr = scenario_simulation(params, stats, mode)
            fname = f"scenario_{mode.value}.csv"
            write_scenario_csv(tr, out / fname)
            res[mode.value] = {"schedule": [q + 1 for q in tr.schedule], "mastery": tr.mastery, "file": fname}
        return res

    def concept_section():
        path = export_concept_vectors(params, out / "concept_vectors.csv")
        flagged = []
        if report.get("update_failure"):
            flagged = [i - 1 for i in report["update_failure"]["flagged"]]
        vecs = concept_vectors(params)
        return {
            "file": path.name,
            "min_successor_count": min_successor_count,
            "successors": successor_report(vecs, parts["train"], flagged, min_successor_count),
        }

    section("auroc", auroc_section)
    section("md", matrices_section)
    section("update_failure", update_failure_section)
    section("scenario", scenario_section)
    section("concept_vectors", concept_section)
    (out / "audit.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report
