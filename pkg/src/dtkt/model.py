"""Key-value memory-network student model.

A question ``q`` addresses ``N`` memory slots through a softmax over
``key_memory @ key_embed[q]``.  The value memory is the knowledge state; a
write erases and adds a vector derived from the interaction embedding
``value_embed[q + r * Q]``.  Reading a question mixes the slots by its
attention weights and feeds ``[read, key_embed[q]]`` through a tanh summary
layer and a sigmoid output.

The batched functions (``*_batch``) work on :class:`Tensor` values and are
what training and the diagnostics call.  The single-instance functions at the
bottom mirror the operation contracts on plain arrays.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numkernel as nk
from .data import Interaction
from .numkernel import ParamStore, Tensor


class WriteMode(str, enum.Enum):
    ADD_ERASE = "add_erase"
    ADD_ONLY = "add_only"
    ERASE_ONLY = "erase_only"


@dataclass(frozen=True)
class ModelConfig:
    num_questions: int
    slots: int = 20
    key_dim: int = 50
    value_dim: int = 100
    summary_dim: int = 50

    def __post_init__(self):
        for name in ("num_questions", "slots", "key_dim", "value_dim", "summary_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        q, n, dk, dv, df = self.num_questions, self.slots, self.key_dim, self.value_dim, self.summary_dim
        return {
            "key_embed": (q, dk),
            "value_embed": (2 * q, dv),
            "key_memory": (n, dk),
            "init_value_memory": (n, dv),
            "erase_w": (dv, dv),
            "erase_b": (dv,),
            "add_w": (dv, dv),
            "add_b": (dv,),
            "summary_w": (dv + dk, df),
            "summary_b": (df,),
            "out_w": (df, 1),
            "out_b": (1,),
        }


@dataclass(frozen=True)
class MemoryState:
    value: np.ndarray  # (N, d_v)


Params = Mapping[str, Tensor]


def _tensors(params) -> Params:
    return params.params if isinstance(params, ParamStore) else params


def init_params(config: ModelConfig, seed: int = 0) -> ParamStore:
    """Glorot-uniform matrices, zero biases."""
    rng = nk.seeded_rng(seed)
    out = {}
    for name, shape in config.param_shapes().items():
        if len(shape) == 1:
            out[name] = Tensor(np.zeros(shape))
        else:
            out[name] = Tensor(nk.glorot_uniform(rng, shape))
    return ParamStore(out)


def config_from_params(params) -> ModelConfig:
    p = _tensors(params)
    q, dk = p["key_embed"].shape
    n, dv = p["init_value_memory"].shape
    return ModelConfig(q, n, dk, dv, p["summary_w"].shape[1])


# -- batched kernels ---------------------------------------------------------


def concept_weights(params) -> Tensor:
    """Attention weights of every question, shape (Q, N)."""
    p = _tensors(params)
    return nk.softmax(nk.matmul(p["key_embed"], nk.transpose(p["key_memory"])))


def initial_memory(params, batch: int) -> Tensor:
    mv0 = _tensors(params)["init_value_memory"]
    n, dv = mv0.shape
    return nk.broadcast_to(nk.reshape(mv0, (1, n, dv)), (batch, n, dv))


def write_batch(params, memory: Tensor, weights: Tensor, q, r, mode: WriteMode = WriteMode.ADD_ERASE) -> Tensor:
    """Consume interactions ``(q[b], r[b])``; ``memory`` has shape (B, N, d_v)."""
    p = _tensors(params)
    mode = WriteMode(mode)
    q = np.asarray(q, dtype=np.intp)
    r = np.asarray(r, dtype=np.intp)
    b, n, dv = memory.shape
    num_q = p["key_embed"].shape[0]
    w = nk.reshape(nk.take(weights, q), (b, n, 1))
    v = nk.take(p["value_embed"], q + r * num_q)
    if mode is not WriteMode.ADD_ONLY:
        e = nk.sigmoid(nk.add(nk.matmul(v, p["erase_w"]), p["erase_b"]))
        memory = nk.mul(memory, nk.sub(1.0, nk.mul(w, nk.reshape(e, (b, 1, dv)))))
    if mode is not WriteMode.ERASE_ONLY:
        a = nk.tanh(nk.add(nk.matmul(v, p["add_w"]), p["add_b"]))
        memory = nk.add(memory, nk.mul(w, nk.reshape(a, (b, 1, dv))))
    return memory


def _head(p: Params, read: Tensor, keys: Tensor) -> Tensor:
    h = nk.tanh(nk.add(nk.matmul(nk.concat([read, keys], axis=-1), p["summary_w"]), p["summary_b"]))
    return nk.sigmoid(nk.add(nk.matmul(h, p["out_w"]), p["out_b"]))


def predict_all_batch(params, memory: Tensor, weights: Tensor) -> Tensor:
    """Correctness probability of every question, shape (B, Q)."""
    p = _tensors(params)
    b = memory.shape[0]
    num_q, dk = p["key_embed"].shape
    read = nk.matmul(weights, memory)  # (B, Q, d_v)
    keys = nk.broadcast_to(p["key_embed"], (b, num_q, dk))
    return nk.reshape(_head(p, read, keys), (b, num_q))


def predict_label_batch(params, memory: Tensor, weights: Tensor, q) -> Tensor:
    """Probability for one question per row, ``q[b]``; shape (B,)."""
    p = _tensors(params)
    q = np.asarray(q, dtype=np.intp)
    b, n, dv = memory.shape
    w = nk.reshape(nk.take(weights, q), (b, 1, n))
    read = nk.reshape(nk.matmul(w, memory), (b, dv))
    return nk.reshape(_head(p, read, nk.take(p["key_embed"], q)), (b,))


# -- single-instance operations ------------------------------------------------


def initial_state(params) -> MemoryState:
    return MemoryState(np.array(_tensors(params)["init_value_memory"].data))


def attention_weights(params, question_id: int) -> np.ndarray:
    p = _tensors(params)
    key = nk.take(p["key_embed"], [question_id])
    return nk.softmax(nk.matmul(key, nk.transpose(p["key_memory"]))).data[0]


def _state_tensor(state: MemoryState) -> Tensor:
    v = np.asarray(state.value)
    return Tensor(v[None], dtype=v.dtype)


def predict_one(params, state: MemoryState, question_id: int) -> float:
    return float(predict_label_batch(params, _state_tensor(state), concept_weights(params), [question_id]).data[0])


def predict_all(params, state: MemoryState) -> np.ndarray:
    return predict_all_batch(params, _state_tensor(state), concept_weights(params)).data[0]


def write(params, state: MemoryState, interaction: Interaction, mode: WriteMode = WriteMode.ADD_ERASE) -> MemoryState:
    mem = write_batch(
        params, _state_tensor(state), concept_weights(params), [interaction.question_id], [interaction.response], mode
    )
    return MemoryState(np.array(mem.data[0]))


def step(
    params, state: MemoryState, interaction: Interaction, mode: WriteMode = WriteMode.ADD_ERASE
) -> tuple[np.ndarray, MemoryState]:
    new_state = write(params, state, interaction, mode)
    return predict_all(params, new_state), new_state
