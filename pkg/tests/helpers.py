"""Finite-difference oracle shared by the gradient tests."""
import numpy as np

from advnlg import tensor as T

EPS = 1e-6


def analytic_grads(fn, params):
    for p in params:
        p.grad = None
        p.requires_grad = True
    with T.Tape() as tape:
        loss = fn()
        tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def numeric_grads(fn, params, eps=EPS):
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = fn().item()
            flat[i] = old - eps
            down = fn().item()
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def rel_error(a, b):
    """Norm-wise relative error between two gradient arrays."""
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def max_rel_error(fn, params, eps=EPS):
    ga = analytic_grads(fn, params)
    gn = numeric_grads(fn, params, eps)
    return max(rel_error(a, n) for a, n in zip(ga, gn))
