import numpy as np
import pytest

from dtkt import numkernel as nk
from dtkt.data import StudentSequence
from dtkt.model import ModelConfig, init_params


def randomize(store, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    for name, t in store.params.items():
        t.data = rng.normal(0.0, scale, t.shape).astype(t.data.dtype)
    return store


def random_sequences(num_questions, lengths, seed=0):
    rng = np.random.default_rng(seed)
    return [
        StudentSequence(tuple(int(x) for x in rng.integers(0, num_questions, n)), tuple(int(x) for x in rng.integers(0, 2, n)))
        for n in lengths
    ]


# -- straight-line reference model on float64 arrays, independent of the package code


def arrays64(store):
    return {k: t.data.astype(np.float64) for k, t in store.params.items()}


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def ref_weights(p, q):
    z = p["key_memory"] @ p["key_embed"][q]
    e = np.exp(z - z.max())
    return e / e.sum()


def ref_predict(p, mem, q):
    w = ref_weights(p, q)
    read = w @ mem
    h = np.tanh(np.concatenate([read, p["key_embed"][q]]) @ p["summary_w"] + p["summary_b"])
    return float(_sig(h @ p["out_w"][:, 0] + p["out_b"][0]))


def ref_write(p, mem, q, r, mode):
    nq = p["key_embed"].shape[0]
    v = p["value_embed"][q + r * nq]
    e = _sig(v @ p["erase_w"] + p["erase_b"])
    a = np.tanh(v @ p["add_w"] + p["add_b"])
    if mode == "add_only":
        e = np.zeros_like(e)
    if mode == "erase_only":
        a = np.zeros_like(a)
    w = ref_weights(p, q)[:, None]
    return mem * (1 - w * e) + w * a


def central_difference(fn, store, eps=1e-3):
    """Numerical gradient of ``fn()`` w.r.t. every entry of every parameter."""
    out = {}
    for name, t in store.params.items():
        g = np.zeros_like(t.data)
        for idx in np.ndindex(t.shape):
            old = t.data[idx]
            t.data[idx] = old + eps
            up = float(fn())
            t.data[idx] = old - eps
            down = float(fn())
            t.data[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out[name] = g
    return out


def max_relative_error(analytic, numeric):
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


@pytest.fixture
def tiny_config():
    return ModelConfig(num_questions=5, slots=4, key_dim=8, value_dim=8, summary_dim=8)


@pytest.fixture
def tiny_params(tiny_config):
    return randomize(init_params(tiny_config, seed=1), seed=2)


@pytest.fixture
def tiny64(tiny_config):
    with nk.precision(np.float64):
        store = randomize(init_params(tiny_config, seed=1), seed=2)
        yield store
