"""Numpy fallback for the GRU gate kernels (same contract as ``_gru_c``)."""
import numpy as np


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def gru_gates_forward(gx, gh, h):
    H = h.shape[1]
    r = _sigmoid(gx[:, :H] + gh[:, :H])
    z = _sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
    n = np.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
    out = (1.0 - z) * n + z * h
    return out, np.concatenate([r, z, n], axis=1)


def gru_gates_backward(dout, gh, h, cache):
    H = h.shape[1]
    r, z, n = cache[:, :H], cache[:, H:2 * H], cache[:, 2 * H:]
    dh = dout * z
    dan = dout * (1.0 - z) * (1.0 - n * n)
    daz = dout * (h - n) * z * (1.0 - z)
    dar = dan * gh[:, 2 * H:] * r * (1.0 - r)
    dgx = np.concatenate([dar, daz, dan], axis=1)
    dgh = np.concatenate([dar, daz, dan * r], axis=1)
    return dgx, dgh, dh
