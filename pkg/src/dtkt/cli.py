"""``dtkt`` command-line entry point.

Exit codes: 0 success, 1 usage error (bad flags, missing files), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import analysis
from .checkpoint import CheckpointError, load_checkpoint
from .data import (
    SYNTHETIC5,
    DataFormatError,
    SyntheticConfig,
    compute_question_stats,
    generate_synthetic,
    parse_sequence_file,
    split_dataset,
    write_ground_truth_csv,
    write_sequence_file,
)
from .metrics import FLAG_RULES, auroc, count_group_summary, per_question_auroc, predict_records
from .model import ModelConfig, WriteMode
from .training import TrainConfig, sweep, train

log = logging.getLogger("dtkt")

DATA_FILE = "data.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return v


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("expected one or more non-negative numbers")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dtkt", description="Knowledge-tracing training and reliability audits.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="simulate a synthetic dataset")
    g.add_argument("--preset", choices=["synthetic5"], default="synthetic5")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--students", type=_positive_int)
    g.add_argument("--questions", type=_positive_int)
    g.add_argument("--concepts", type=_positive_int)
    g.add_argument("--steps", type=_positive_int)
    g.add_argument("--increment", type=float)
    g.add_argument("--guess", type=_nonneg_float)
    g.add_argument("--slip", type=_nonneg_float)
    g.add_argument("--discrimination", type=_nonneg_float)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one model, or one per alpha")
    t.add_argument("--data", required=True, help="triplet file or a directory holding data.txt")
    alpha = t.add_mutually_exclusive_group()
    alpha.add_argument("--alpha", type=_nonneg_float, default=0.0)
    alpha.add_argument("--alpha-sweep", type=_float_list)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=_positive_int, default=50)
    t.add_argument("--batch", type=_positive_int, default=32)
    t.add_argument("--lr", type=_positive_float, default=0.003)
    t.add_argument("--clip", type=_positive_float, default=50.0)
    t.add_argument("--patience", type=_positive_int, default=5)
    t.add_argument("--slots", type=_positive_int, default=20)
    t.add_argument("--key-dim", type=_positive_int, default=50)
    t.add_argument("--value-dim", type=_positive_int, default=100)
    t.add_argument("--summary-dim", type=_positive_int, default=50)
    t.add_argument("--no-detach", action="store_true", help="let gradients flow into the pseudo-labels")
    _split_flags(t)
    t.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="AUROC summary of a checkpoint")
    _eval_flags(e)
    e.add_argument("--k", type=_positive_int, default=10)

    a = sub.add_parser("audit", help="full diagnostic bundle")
    _eval_flags(a)
    a.add_argument("--th", type=_nonneg_float, default=0.001)
    a.add_argument("--flag-rule", choices=list(FLAG_RULES), default="mean")
    a.add_argument("--k", type=_positive_int, default=10)
    a.add_argument("--min-successor-count", type=int, default=15)

    s = sub.add_parser("simulate", help="all-correct scenario traces for add_erase and add_only")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--num-questions", type=_positive_int)
    s.add_argument("--out", required=True)

    c = sub.add_parser("export-concepts", help="write per-question attention weights")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--out", required=True)
    return p


def _split_flags(p):
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--fractions", type=_float_list, default=[0.7, 0.1, 0.2])
    p.add_argument("--num-questions", type=_positive_int)


def _eval_flags(p):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=list(analysis.SPLITS), default="test")
    p.add_argument("--num-questions", type=_positive_int)
    p.add_argument("--out", required=True)


def _data_path(raw: str) -> Path:
    path = Path(raw)
    if path.is_dir():
        path = path / DATA_FILE
    if not path.is_file():
        raise UsageError(f"--data: no such file: {path}")
    return path


def _checkpoint(raw: str):
    path = Path(raw)
    if not path.is_file():
        raise UsageError(f"--checkpoint: no such file: {path}")
    return path, load_checkpoint(path)


def _echo(args, out: Path) -> dict:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "verbose"}
    text = json.dumps(resolved, indent=2, sort_keys=True)
    print(text)
    (out / "resolved_config.json").write_text(text + "\n", encoding="utf-8")
    return resolved


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> None:
    overrides = {
        k: v
        for k, v in {
            "students": args.students,
            "num_questions": args.questions,
            "num_concepts": args.concepts,
            "steps": args.steps,
            "increment": args.increment,
            "guess": args.guess,
            "slip": args.slip,
            "discrimination": args.discrimination,
        }.items()
        if v is not None
    }
    try:
        cfg = SyntheticConfig(**{**asdict(SYNTHETIC5), **overrides, "seed": args.seed})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out(args)
    _echo(args, out)
    res = generate_synthetic(cfg, name=args.preset)
    write_sequence_file(res.dataset, out / DATA_FILE)
    write_ground_truth_csv(res, out / "ground_truth.csv")
    summary = {
        "students": len(res.dataset),
        "num_questions": res.dataset.num_questions,
        "interactions": res.dataset.num_interactions,
        "generator": asdict(cfg),
    }
    (out / "dataset.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_data(args):
    return parse_sequence_file(_data_path(args.data), args.num_questions)


def cmd_train(args) -> None:
    if len(args.fractions) != 3 or abs(sum(args.fractions) - 1) > 1e-9:
        raise UsageError("--fractions: need three values summing to 1")
    data_path = _data_path(args.data)
    out = _out(args)
    _echo(args, out)
    ds = parse_sequence_file(data_path, args.num_questions)
    train_set, valid_set, _ = split_dataset(ds, tuple(args.fractions), args.split_seed)
    mcfg = ModelConfig(ds.num_questions, args.slots, args.key_dim, args.value_dim, args.summary_dim)
    cfg = TrainConfig(
        alpha=args.alpha,
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        clip_norm=args.clip,
        seed=args.seed,
        patience=args.patience,
        detach_pseudo_label=not args.no_detach,
        model=mcfg,
    )
    extra = {"split": {"seed": args.split_seed, "fractions": list(args.fractions)}, "data": data_path.name}
    if args.alpha_sweep:
        results = sweep(args.alpha_sweep, train_set, valid_set, cfg, out, extra_metadata=extra)
        index = {f"{a:g}": f"alpha_{a:g}/train_report.json" for a in results}
        (out / "sweep.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    else:
        train(train_set, valid_set, cfg, out, extra_metadata=extra)


def cmd_evaluate(args) -> None:
    ckpt_path, ckpt = _checkpoint(args.checkpoint)
    ds = _load_data(args)
    out = _out(args)
    _echo(args, out)
    parts = dict(zip(analysis.SPLITS, analysis.resolve_splits(ds, ckpt.extra)))
    rec = predict_records(ckpt.params, parts[args.split])
    per_q = per_question_auroc(rec, ds.num_questions)
    result = {
        "checkpoint": ckpt_path.name,
        "split": args.split,
        "predictions": len(rec),
        "auroc": auroc(rec.probs, rec.labels),
        "per_question": {str(i + 1): v for i, v in sorted(per_q.items())},
    }
    try:
        g = count_group_summary(per_q, compute_question_stats(ds), args.k)
        result["count_groups"] = {**asdict(g), "top_ids": [i + 1 for i in g.top_ids], "bottom_ids": [i + 1 for i in g.bottom_ids]}
    except ValueError as exc:
        result["count_groups"] = {"error": str(exc)}
    (out / "evaluation.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_audit(args) -> None:
    ckpt_path, _ = _checkpoint(args.checkpoint)
    ds = _load_data(args)
    out = _out(args)
    _echo(args, out)
    analysis.full_audit(
        ckpt_path,
        ds,
        out,
        split=args.split,
        th=args.th,
        flag_rule=args.flag_rule,
        k=args.k,
        min_successor_count=args.min_successor_count,
    )


def cmd_simulate(args) -> None:
    _, ckpt = _checkpoint(args.checkpoint)
    ds = _load_data(args)
    out = _out(args)
    _echo(args, out)
    train_set = analysis.resolve_splits(ds, ckpt.extra)[0]
    stats = compute_question_stats(train_set)
    for mode in (WriteMode.ADD_ERASE, WriteMode.ADD_ONLY):
        trace = analysis.scenario_simulation(ckpt.params, stats, mode)
        analysis.write_scenario_csv(trace, out / f"scenario_{mode.value}.csv")


def cmd_export_concepts(args) -> None:
    _, ckpt = _checkpoint(args.checkpoint)
    out = _out(args)
    _echo(args, out)
    analysis.export_concept_vectors(ckpt.params, out / "concept_vectors.csv")


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "audit": cmd_audit,
    "simulate": cmd_simulate,
    "export-concepts": cmd_export_concepts,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, FileNotFoundError, DataFormatError, CheckpointError) as exc:
        print(f"dtkt {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"dtkt {args.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
