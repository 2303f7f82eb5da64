"""Gumbel-Softmax relaxation and the straight-through path into the critic."""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import BOS_ID, EOS_ID, PAD_ID

DEFAULT_TAU = 0.1
U_MIN, U_MAX = 1e-12, 1.0 - 1e-12


def sample_gumbel(shape, rng):
    """Standard Gumbel draws ``-log(-log(u))`` with ``u`` clamped away from 0 and 1."""
    u = np.clip(rng.random(shape), U_MIN, U_MAX)
    return -np.log(-np.log(u))


def relax(logp, tau, noise):
    """``softmax((logp + noise) / tau)`` for a log-probability tensor."""
    if tau <= 0:
        raise T.ConfigurationError(f"temperature must be positive, got {tau}")
    return T.softmax((logp + noise) * (1.0 / tau))


def gumbel_softmax(p, tau, rng=None, noise=None):
    """Relaxed sample from distribution ``p``; zero entries get log-probability -1e10."""
    p = T.as_tensor(p)
    if noise is None:
        noise = sample_gumbel(p.shape, rng)
    return relax(T.safe_log(p), tau, noise)


def one_hot(idx, n):
    idx = np.asarray(idx)
    out = np.zeros(idx.shape + (n,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


@dataclass
class STSample:
    forward: np.ndarray     # exact one-hot rows
    relaxed: T.Tensor       # Gumbel-Softmax rows carrying the gradient
    tau: float
    index: np.ndarray       # selected token ids

    @property
    def value(self):
        """What the consumer sees: ``forward`` in value, ``relaxed`` in gradient."""
        return T.straight_through(self.forward, self.relaxed)


def _select(logp, noise, select):
    if select == "greedy":
        return np.argmax(logp, axis=-1)
    if select == "gumbel":
        return np.argmax(logp + noise, axis=-1)
    raise T.ConfigurationError(f"unknown forward selection {select!r}")


def straight_through_logp(logp, tau, rng=None, noise=None, select="greedy"):
    if noise is None:
        noise = sample_gumbel(logp.shape, rng)
    relaxed = relax(logp, tau, noise)
    idx = _select(logp.data, noise, select)
    return STSample(one_hot(idx, logp.shape[-1]), relaxed, tau, idx)


def straight_through(p, tau, rng=None, noise=None, select="greedy"):
    """Hard one-hot forward (argmax of ``p`` by default) with a relaxed backward."""
    return straight_through_logp(T.safe_log(T.as_tensor(p)), tau, rng, noise, select)


@dataclass
class Rollout:
    samples: list           # STSample per step, rows are batch elements
    ids: np.ndarray         # [b, L] selected tokens, PAD after EOS
    mask: np.ndarray        # [b, L] positions up to and including EOS

    def values(self):
        return [s.value for s in self.samples]

    def sequences(self):
        return [list(self.ids[i, self.mask[i]]) for i in range(self.ids.shape[0])]


def generate_rollout(gen, inputs, tau, max_len, rng=None, noise=None, select="greedy"):
    """Autoregressive decode feeding back the hard token at every step.

    ``noise`` may fix the Gumbel perturbations as an array ``[max_len, b, V]``.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    from .generator import pad_batch

    ids, mask = pad_batch([list(x) for x in inputs])
    state = gen.init_state(ids, mask)
    b = len(inputs)
    prev = np.full(b, BOS_ID, dtype=np.int64)
    alive = np.ones(b, dtype=bool)
    samples, toks, valid = [], [], []
    for t in range(max_len):
        logits, state = gen.step_logits(prev, state)
        logp = T.log_softmax(logits)
        g = noise[t] if noise is not None else sample_gumbel(logp.shape, rng)
        st = straight_through_logp(logp, tau, noise=g, select=select)
        samples.append(st)
        valid.append(alive.copy())
        toks.append(np.where(alive, st.index, PAD_ID))
        alive = alive & (st.index != EOS_ID)
        prev = st.index
        if not alive.any():
            break
    return Rollout(samples, np.stack(toks, axis=1), np.stack(valid, axis=1))
