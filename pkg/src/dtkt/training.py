"""Sequence unrolling, the mini-batch training loop and early stopping."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as km
from . import numkernel as nk
from .checkpoint import save_checkpoint
from .data import Batch, Dataset, StudentSequence, pack_sequences
from .metrics import auroc, predict_records
from .model import ModelConfig, WriteMode
from .numkernel import ParamStore, Tape, Tensor
from .objective import ce_terms, cpl_terms

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.0
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.003
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 50.0
    seed: int = 0
    patience: int = 5
    detach_pseudo_label: bool = True
    model: ModelConfig | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if min(self.epochs, self.batch_size, self.patience) < 1:
            raise ValueError("epochs, batch_size and patience must be positive")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("lr and clip_norm must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    valid_auroc: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_auroc: float = float("nan")
    epochs_run: int = 0
    checkpoint: str | None = None
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class PseudoTargets:
    """Forward values of the pre-update vectors and masks, one entry per step."""

    values: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)


@dataclass
class UnrollResult:
    loss: Tensor
    ce: float  # weighted the same way as the loss
    cpl: float
    targets: PseudoTargets | None


def step_weights(batch: Batch) -> np.ndarray:
    """Weight of step ``t`` for row ``b``: ``1 / (T_b - 1)`` while a target exists, else 0."""
    t = np.arange(batch.max_len - 1)
    valid = t[None, :] + 1 < batch.lengths[:, None]
    return valid / (batch.lengths[:, None] - 1.0)


def unroll_batch(
    params,
    batch: Batch,
    alpha: float,
    mode: WriteMode = WriteMode.ADD_ERASE,
    *,
    detach_pseudo_label: bool = True,
    force_cpl_path: bool = False,
    frozen: PseudoTargets | None = None,
) -> UnrollResult:
    """Batch loss: mean over rows of each row's mean per-step combined loss.

    Step ``t`` consumes interaction ``t`` and is scored on interaction ``t+1``.
    With ``alpha > 0`` (or ``force_cpl_path``) every step reads all questions so
    the penalty can compare the vectors before and after the write.  ``frozen``
    replays pseudo-labels and masks recorded by an earlier pass, which turns
    the penalty into a fixed function of the parameters (used by gradient
    checks).
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if batch.max_len < 2:
        raise ValueError("sequences need at least two interactions")
    mode = WriteMode(mode)
    dtype = nk.default_dtype()
    weights_bt = step_weights(batch)
    full = alpha > 0 or force_cpl_path or frozen is not None
    w_all = km.concept_weights(params)
    memory = km.initial_memory(params, batch.size)
    p_prev = km.predict_all_batch(params, memory, w_all) if full else None
    record = PseudoTargets() if full else None

    total = None
    ce_acc = cpl_acc = 0.0
    for t in range(batch.max_len - 1):
        q_t, r_t = batch.questions[:, t], batch.responses[:, t]
        q_n, r_n = batch.questions[:, t + 1], batch.responses[:, t + 1]
        memory = km.write_batch(params, memory, w_all, q_t, r_t, mode)
        wt = np.asarray(weights_bt[:, t], dtype=dtype)
        if full:
            p_all = km.predict_all_batch(params, memory, w_all)
            p_label = nk.pick(p_all, q_n)
            if frozen is not None:
                pbar = Tensor(frozen.values[t], dtype=dtype)
                cpl, mask = cpl_terms(pbar, p_all, r_t, mask=frozen.masks[t])
            else:
                cpl, mask = cpl_terms(p_prev, p_all, r_t, detach=detach_pseudo_label)
            record.values.append(p_prev.data.copy() if frozen is None else frozen.values[t])
            record.masks.append(mask)
            p_prev = p_all
        else:
            p_label = km.predict_label_batch(params, memory, w_all, q_n)
            cpl = None
        ce = ce_terms(p_label, r_n)
        ce_acc += float(np.dot(ce.data.astype(np.float64), wt))
        step_loss = ce
        if cpl is not None:
            cpl_acc += float(np.dot(cpl.data.astype(np.float64), wt))
            step_loss = nk.add(ce, nk.mul(cpl, float(alpha)))
        term = nk.tsum(nk.mul(step_loss, wt))
        total = term if total is None else nk.add(total, term)
    loss = nk.mul(total, 1.0 / batch.size)
    return UnrollResult(loss, ce_acc / batch.size, cpl_acc / batch.size, record)


def unroll_sequence(params, sequence: StudentSequence, alpha: float, mode: WriteMode = WriteMode.ADD_ERASE, **kw):
    return unroll_batch(params, pack_sequences([sequence]), alpha, mode, **kw)


def loss_and_grads(store: ParamStore, batch: Batch, config: TrainConfig, **kw) -> tuple[UnrollResult, dict]:
    with Tape() as tape:
        res = unroll_batch(
            store, batch, config.alpha, detach_pseudo_label=config.detach_pseudo_label, **kw
        )
    return res, nk.backward(tape, res.loss, store.params)


def evaluate_auroc(params, dataset: Dataset) -> float | None:
    rec = predict_records(params, dataset, WriteMode.ADD_ERASE)
    return auroc(rec.probs, rec.labels)


@dataclass
class TrainResult:
    report: TrainReport
    params: ParamStore
    config: TrainConfig


def train(
    train_set: Dataset,
    valid_set: Dataset,
    config: TrainConfig,
    out_dir=None,
    *,
    extra_metadata: dict | None = None,
    force_cpl_path: bool = False,
) -> TrainResult:
    """Adam on clipped batch gradients with best-valid-AUROC early stopping.

    When ``out_dir`` is given the best parameters are written to
    ``out_dir/model.ckpt`` and the report to ``out_dir/train_report.json``.
    """
    if not train_set.sequences or not valid_set.sequences:
        raise ValueError("train and valid splits must be non-empty")
    mcfg = config.model or ModelConfig(train_set.num_questions)
    if mcfg.num_questions != train_set.num_questions:
        raise ValueError("model num_questions differs from the dataset")
    config = TrainConfig(**{**config.__dict__, "model": mcfg})
    rng = nk.seeded_rng(config.seed)
    store = km.init_params(mcfg, seed=int(rng.integers(2**63)))
    report = TrainReport(config=config.to_dict())
    best = store.copy()
    best_auc = -math.inf
    stale = 0
    seqs = list(train_set.sequences)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(seqs))
        losses = []
        for bi, start in enumerate(range(0, len(seqs), config.batch_size)):
            batch = pack_sequences([seqs[i] for i in order[start : start + config.batch_size]])
            res, grads = loss_and_grads(store, batch, config, force_cpl_path=force_cpl_path)
            value = float(res.loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {bi}")
            grads, _ = nk.clip_global_norm(grads, config.clip_norm)
            try:
                nk.adam_step(store, grads, config.lr, config.betas, config.eps)
            except nk.NonFiniteGradientError as exc:
                raise TrainingDivergedError(f"epoch {epoch}, batch {bi}: {exc}") from exc
            losses.append(value)
        epoch_loss = float(np.mean(np.asarray(losses, dtype=np.float64)))
        auc = evaluate_auroc(store, valid_set)
        auc = float("nan") if auc is None else auc
        report.train_loss.append(epoch_loss)
        report.valid_auroc.append(auc)
        report.epochs_run = epoch
        log.info("epoch %d loss %.5f valid auroc %.4f", epoch, epoch_loss, auc)
        if auc > best_auc:
            best_auc, best, stale = auc, store.copy(), 0
            report.best_epoch, report.best_valid_auroc = epoch, auc
        else:
            stale += 1
            if stale >= config.patience:
                break
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "model.ckpt"
        meta = {"train_config": config.to_dict(), "best_epoch": report.best_epoch, **(extra_metadata or {})}
        save_checkpoint(best, mcfg, ckpt, WriteMode.ADD_ERASE, meta)
        report.checkpoint = ckpt.name
        (out / "train_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return TrainResult(report, best, config)


def sweep(alphas: Sequence[float], train_set: Dataset, valid_set: Dataset, config: TrainConfig, out_dir, **kw):
    """One training run per alpha, each under ``out_dir/alpha_<value>``."""
    results = {}
    for a in alphas:
        sub = Path(out_dir) / f"alpha_{a:g}"
        results[a] = train(train_set, valid_set, TrainConfig(**{**config.__dict__, "alpha": a}), sub, **kw)
    return results
