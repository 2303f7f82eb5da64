"""Hot kernels with a compiled backend and a numpy fallback.

The compiled backend is used when the extension was built; set
``ADVNLG_KERNELS=python`` to force the fallback. ``use()`` switches at runtime
(benchmarks and backend-agreement tests rely on it).
"""
import os

from . import _gru_py

try:
    from . import _gru_c
except ImportError:
    _gru_c = None

_BACKENDS = {"python": _gru_py}
if _gru_c is not None:
    _BACKENDS["cython"] = _gru_c

BACKEND = ""
gru_gates_forward = None
gru_gates_backward = None


def available():
    return sorted(_BACKENDS)


def use(name):
    """Select the kernel backend by name ("cython" or "python")."""
    global BACKEND, gru_gates_forward, gru_gates_backward
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} not available; have {available()}")
    mod = _BACKENDS[name]
    BACKEND = name
    gru_gates_forward = mod.gru_gates_forward
    gru_gates_backward = mod.gru_gates_backward


_requested = os.environ.get("ADVNLG_KERNELS", "")
if _requested:
    use(_requested)
else:
    use("cython" if _gru_c is not None else "python")
