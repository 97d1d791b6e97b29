"""Backend selection for the batch RK4 kernel.

The compiled extension is used when importable; set ``MATCHSYNC_PURE_PYTHON=1``
to force the numpy implementation.
"""
import os

import numpy as np

from . import _kernel_py
from .model import Model

if os.environ.get("MATCHSYNC_PURE_PYTHON", "") not in ("", "0"):
    _compiled = None
else:
    try:
        from . import _kernel_c as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def get_kernel(backend: str | None = None):
    """Return ``integrate_batch`` for ``backend`` ("cython", "python" or None = default)."""
    backend = backend or BACKEND
    if backend == "python":
        return _kernel_py.integrate_batch
    if backend == "cython":
        if _compiled is None:
            raise ImportError("compiled kernel is not available; build the extension")
        return _compiled.integrate_batch
    raise ValueError(f"unknown backend {backend!r}")


def pack_params(model: Model) -> np.ndarray:
    c, ln, w = model.conv, model.line, model.omega_n
    p = np.empty(_kernel_py.N_PARAMS)
    p[_kernel_py.ETA] = c.eta
    p[_kernel_py.CDC] = c.c_dc
    p[_kernel_py.KP] = c.k_p
    p[_kernel_py.HM] = 0.5 * c.mu
    p[_kernel_py.RF] = c.r_filter
    p[_kernel_py.XF] = c.l_filter * w
    p[_kernel_py.LF] = c.l_filter
    p[_kernel_py.GL] = c.g_load
    p[_kernel_py.BC] = c.c_filter * w + c.b_load
    p[_kernel_py.CF] = c.c_filter
    p[_kernel_py.VSTAR] = c.v_dc_star
    p[_kernel_py.RL] = ln.r_line
    p[_kernel_py.XL] = ln.l_line * w
    p[_kernel_py.LL] = ln.l_line
    return p


def run_batch(model: Model, Z0, u, dt: float, n_steps: int, record_every: int = 1,
              dZ0=None, blowup: float = 1e6, backend: str | None = None):
    """Integrate a batch of states (S, N) with the selected kernel."""
    Z0 = np.atleast_2d(np.asarray(Z0, dtype=float))
    if dZ0 is not None:
        dZ0 = np.atleast_2d(np.asarray(dZ0, dtype=float))
    u_dc = np.asarray(u, dtype=float)[model.sl_vdc]
    edges = np.array(model.topo.edges, dtype=np.int64).reshape(model.m, 2)
    kernel = get_kernel(backend)
    return kernel(Z0, dZ0, u_dc, pack_params(model), edges, model.n, float(dt),
                  int(n_steps), int(record_every), float(blowup))
