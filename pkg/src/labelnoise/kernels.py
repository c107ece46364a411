"""Hot numeric kernels with a numba backend and a pure-numpy fallback.

These are the inner loops executed once per training batch (row softmax and
its gradient, per-row label gather/scatter, the fused Adam update).  The
backend is chosen once at import time:

* ``LABELNOISE_BACKEND=numpy``  force the pure-numpy implementations
* ``LABELNOISE_BACKEND=numba``  require numba (ImportError if missing)
* unset                         numba when importable, else numpy

``BACKEND`` records the active choice.  Both backends implement identical
formulas; they may differ in the last ulp (different libm), so cross-backend
comparisons belong in benchmarks, not in exact-equality tests.

All kernels take C-contiguous float64 arrays and never mutate their inputs
except where documented (``adam_update`` updates the moment buffers in
place).
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "BACKEND",
    "adam_update",
    "gather_rows",
    "row_softmax",
    "row_softmax_grad",
    "scatter_rows_add",
    "using_numba",
]


# ---------------------------------------------------------------------------
# pure-numpy reference implementations
# ---------------------------------------------------------------------------

def _np_row_softmax(x):
    shifted = x - x.max(axis=1, keepdims=True)
    out = np.exp(shifted)
    out /= out.sum(axis=1, keepdims=True)
    return out


def _np_row_softmax_grad(out, gout):
    # d softmax: out * (gout - <gout, out>_row)
    dot = np.sum(gout * out, axis=1, keepdims=True)
    return out * (gout - dot)


def _np_gather_rows(x, idx):
    return x[np.arange(x.shape[0]), idx].copy()


def _np_scatter_rows_add(n_rows, n_cols, idx, values):
    out = np.zeros((n_rows, n_cols))
    out[np.arange(n_rows), idx] = values
    return out


def _np_adam_update(param, grad, m, v, bias1, bias2, lr, beta1, beta2, eps):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / bias1
    v_hat = v / bias2
    return param - lr / (np.sqrt(v_hat) + eps) * m_hat


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

_requested = os.environ.get("LABELNOISE_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise RuntimeError(
        f"LABELNOISE_BACKEND must be 'numba' or 'numpy', got {_requested!r}"
    )

if _requested == "numpy":
    _use_numba = False
elif _requested == "numba":
    import numba  # noqa: F401  (fail loudly when explicitly requested)

    _use_numba = True
else:
    try:
        import numba  # noqa: F401

        _use_numba = True
    except ImportError:
        _use_numba = False


if _use_numba:
    from numba import njit

    @njit(cache=True)
    def _nb_row_softmax(x):
        n, c = x.shape
        out = np.empty((n, c))
        for i in range(n):
            hi = x[i, 0]
            for j in range(1, c):
                if x[i, j] > hi:
                    hi = x[i, j]
            total = 0.0
            for j in range(c):
                e = np.exp(x[i, j] - hi)
                out[i, j] = e
                total += e
            for j in range(c):
                out[i, j] /= total
        return out

    @njit(cache=True)
    def _nb_row_softmax_grad(out, gout):
        n, c = out.shape
        gin = np.empty((n, c))
        for i in range(n):
            dot = 0.0
            for j in range(c):
                dot += gout[i, j] * out[i, j]
            for j in range(c):
                gin[i, j] = out[i, j] * (gout[i, j] - dot)
        return gin

    @njit(cache=True)
    def _nb_gather_rows(x, idx):
        n = x.shape[0]
        out = np.empty(n)
        for i in range(n):
            out[i] = x[i, idx[i]]
        return out

    @njit(cache=True)
    def _nb_scatter_rows_add(n_rows, n_cols, idx, values):
        out = np.zeros((n_rows, n_cols))
        for i in range(n_rows):
            out[i, idx[i]] = values[i]
        return out

    @njit(cache=True)
    def _nb_adam_update(param, grad, m, v, bias1, bias2, lr, beta1, beta2, eps):
        n = param.shape[0]
        out = np.empty(n)
        for i in range(n):
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i]
            m_hat = m[i] / bias1
            v_hat = v[i] / bias2
            out[i] = param[i] - lr / (np.sqrt(v_hat) + eps) * m_hat
        return out

    BACKEND = "numba"
    row_softmax = _nb_row_softmax
    row_softmax_grad = _nb_row_softmax_grad
    gather_rows = _nb_gather_rows
    scatter_rows_add = _nb_scatter_rows_add
    adam_update = _nb_adam_update
else:
    BACKEND = "numpy"
    row_softmax = _np_row_softmax
    row_softmax_grad = _np_row_softmax_grad
    gather_rows = _np_gather_rows
    scatter_rows_add = _np_scatter_rows_add
    adam_update = _np_adam_update


def using_numba() -> bool:
    return BACKEND == "numba"


def numpy_variants():
    """The pure-numpy kernel set, independent of the active backend.

    Used by the benchmark to time both paths in one process.
    """
    return {
        "row_softmax": _np_row_softmax,
        "row_softmax_grad": _np_row_softmax_grad,
        "gather_rows": _np_gather_rows,
        "scatter_rows_add": _np_scatter_rows_add,
        "adam_update": _np_adam_update,
    }


def warmup() -> None:
    """Trigger JIT compilation of every kernel (no-op on the numpy backend)."""
    x = np.array([[0.1, -0.2], [0.3, 0.4]])
    idx = np.array([0, 1], dtype=np.int64)
    s = row_softmax(x)
    row_softmax_grad(s, x)
    vals = gather_rows(x, idx)
    scatter_rows_add(2, 2, idx, vals)
    adam_update(x[0].copy(), x[1].copy(), np.zeros(2), np.zeros(2),
                0.1, 0.001, 0.001, 0.9, 0.999, 1e-8)
