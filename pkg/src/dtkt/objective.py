"""Per-step losses: next-response cross-entropy and the conditional pseudo-labeled penalty.

The pseudo-labeled penalty compares the probability vector before consuming a
correctly answered interaction with the vector after it and charges the
squared size of every decrease.  Both the decrease mask and (by default) the
pre-update vector are constants for differentiation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .numkernel import Tensor

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    cpl: float
    combined: float
    active_cpl_terms: int
    loss: Tensor | None = field(default=None, compare=False, repr=False)


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def ce_terms(p_label: Tensor, labels) -> Tensor:
    """Binary cross-entropy per row of ``p_label`` (shape (B,))."""
    p = nk.clamp(p_label, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=p.data.dtype)
    return nk.neg(nk.add(nk.mul(y, nk.log(p)), nk.mul(1.0 - y, nk.log(nk.sub(1.0, p)))))


def cpl_terms(
    p_bar: Tensor,
    p_next: Tensor,
    current_r,
    *,
    detach: bool = True,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Pseudo-labeled penalty per row; ``p_bar`` and ``p_next`` have shape (B, Q).

    Returns the per-row penalty and the mask used.  Rows whose current
    response is 0 get an all-false mask.  Pass ``mask`` to reuse a mask from an
    earlier forward pass.
    """
    if p_bar.shape != p_next.shape:
        raise nk.ShapeError(f"cpl: p_bar {p_bar.shape} and p_next {p_next.shape} differ")
    if mask is None:
        gate = np.asarray(current_r).reshape(-1, 1) == 1
        mask = ((p_next.data - p_bar.data) < 0) & gate
    target = nk.detach(p_bar) if detach else p_bar
    sq = nk.square_diff(target, p_next)
    return nk.tsum(nk.mul(sq, mask.astype(sq.data.dtype)), axis=1), mask


def ce_loss(p_next, next_question: int, next_response: int) -> Tensor:
    """Cross-entropy of the probability vector ``p_next`` at ``next_question``."""
    p = nk.take(_tensor(p_next), [next_question])
    return nk.reshape(ce_terms(p, [next_response]), ())


def cpl_loss(p_bar, p_next, current_q: int, current_r: int, *, detach: bool = True) -> Tensor:
    """Penalty for one step; ``current_q`` only identifies the event, the gate is ``current_r``."""
    pb = nk.reshape(_tensor(p_bar), (1, -1))
    pn = nk.reshape(_tensor(p_next), (1, -1))
    terms, _ = cpl_terms(pb, pn, [current_r], detach=detach)
    return nk.reshape(terms, ())


def combine(ce: Tensor, cpl: Tensor, alpha: float) -> Tensor:
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    return nk.add(ce, nk.mul(cpl, float(alpha)))


def combined_step_loss(
    p_bar, p_next, current_q: int, current_r: int, next_question: int, next_response: int, alpha: float
) -> LossBreakdown:
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    ce = ce_loss(p_next, next_question, next_response)
    pb = nk.reshape(_tensor(p_bar), (1, -1))
    pn = nk.reshape(_tensor(p_next), (1, -1))
    terms, mask = cpl_terms(pb, pn, [current_r])
    cpl = nk.reshape(terms, ())
    total = combine(ce, cpl, alpha)
    return LossBreakdown(
        ce=float(ce.data), cpl=float(cpl.data), combined=float(total.data), active_cpl_terms=int(mask.sum()), loss=total
    )
