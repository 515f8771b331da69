"""Hot numeric kernels.

Every kernel exists twice: an explicit-loop version compiled with numba and a
vectorised numpy version. The public name dispatches on
:data:`dvf._accel.ENABLE_NUMBA`; both variants stay importable so the
benchmark and the tests can compare them directly.
"""
import numpy as np

from dvf import _accel


# ---------------------------------------------------------------------------
# compressed sparse products


def _csc_matmat_loop(indptr, indices, data, x, n_rows):
    n_cols = indptr.shape[0] - 1
    k = x.shape[1]
    out = np.zeros((n_rows, k))
    for col in range(n_cols):
        for p in range(indptr[col], indptr[col + 1]):
            row = indices[p]
            w = data[p]
            for c in range(k):
                out[row, c] += w * x[col, c]
    return out


def _csr_matmat_loop(indptr, indices, data, x):
    n_rows = indptr.shape[0] - 1
    k = x.shape[1]
    out = np.zeros((n_rows, k))
    for row in range(n_rows):
        for p in range(indptr[row], indptr[row + 1]):
            col = indices[p]
            w = data[p]
            for c in range(k):
                out[row, c] += w * x[col, c]
    return out


def _segment_sum_loop(values, segments, n_segments):
    out = np.zeros((n_segments, values.shape[1]))
    for r in range(values.shape[0]):
        s = segments[r]
        for c in range(values.shape[1]):
            out[s, c] += values[r, c]
    return out


def _local_partial_sums_loop(d, gamma, horizon):
    # a_t = gamma^{t+1} * sum_{k<=t+1} (d-1)^k, via a_{t+1} = gamma*a_t + ((d-1)gamma)^{t+2}
    out = np.empty(horizon)
    ratio = (d - 1) * gamma
    a = gamma * (1.0 + (d - 1))
    power = ratio
    total = 0.0
    for t in range(horizon):
        total += a
        out[t] = total
        power *= ratio
        a = gamma * a + power
    return out


def segment_sum_numpy(values, segments, n_segments):
    values = np.asarray(values, dtype=float)
    out = np.empty((n_segments, values.shape[1]))
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(segments, weights=values[:, c], minlength=n_segments)
    return out


def csc_matmat_numpy(indptr, indices, data, x, n_rows):
    cols = np.repeat(np.arange(indptr.shape[0] - 1), np.diff(indptr))
    return segment_sum_numpy(data[:, None] * x[cols], indices, n_rows)


def csr_matmat_numpy(indptr, indices, data, x):
    rows = np.repeat(np.arange(indptr.shape[0] - 1), np.diff(indptr))
    return segment_sum_numpy(data[:, None] * x[indices], rows, indptr.shape[0] - 1)


def local_partial_sums_numpy(d, gamma, horizon):
    t = np.arange(horizon, dtype=float)
    with np.errstate(over="ignore"):
        if d == 2:
            terms = (t + 2.0) * gamma ** (t + 1.0)
        else:
            terms = ((d - 1) * ((d - 1) * gamma) ** (t + 1.0) - gamma ** (t + 1.0)) / (d - 2)
        return np.cumsum(terms)


if _accel.numba is not None:
    _jit = _accel.numba.njit(cache=True)
    csc_matmat_numba = _jit(_csc_matmat_loop)
    csr_matmat_numba = _jit(_csr_matmat_loop)
    segment_sum_numba = _jit(_segment_sum_loop)
    local_partial_sums_numba = _jit(_local_partial_sums_loop)
else:  # pragma: no cover
    csc_matmat_numba = _csc_matmat_loop
    csr_matmat_numba = _csr_matmat_loop
    segment_sum_numba = _segment_sum_loop
    local_partial_sums_numba = _local_partial_sums_loop


def _as_2d(x):
    x = np.ascontiguousarray(x, dtype=float)
    return (x[:, None], True) if x.ndim == 1 else (x, False)


def csc_matmat(indptr, indices, data, x, n_rows):
    """``M @ x`` for ``M`` stored column-compressed; ``x`` is 1-D or 2-D."""
    x2, flat = _as_2d(x)
    if _accel.ENABLE_NUMBA:
        out = csc_matmat_numba(indptr, indices, data, x2, n_rows)
    else:
        out = csc_matmat_numpy(indptr, indices, data, x2, n_rows)
    return out[:, 0] if flat else out


def csr_matmat(indptr, indices, data, x):
    """``M @ x`` for ``M`` stored row-compressed; ``x`` is 1-D or 2-D."""
    x2, flat = _as_2d(x)
    if _accel.ENABLE_NUMBA:
        out = csr_matmat_numba(indptr, indices, data, x2)
    else:
        out = csr_matmat_numpy(indptr, indices, data, x2)
    return out[:, 0] if flat else out


def segment_sum(values, segments, n_segments):
    """Row-wise scatter-add: ``out[segments[r]] += values[r]``."""
    v2, flat = _as_2d(values)
    segments = np.asarray(segments, dtype=np.int64)
    if _accel.ENABLE_NUMBA:
        out = segment_sum_numba(v2, segments, int(n_segments))
    else:
        out = segment_sum_numpy(v2, segments, int(n_segments))
    return out[:, 0] if flat else out


def local_partial_sums(d, gamma, horizon):
    """Cumulative sums of ``gamma^{t+1} * sum_{k<=t+1} (d-1)^k`` for t < horizon."""
    if _accel.ENABLE_NUMBA:
        return local_partial_sums_numba(int(d), float(gamma), int(horizon))
    return local_partial_sums_numpy(int(d), float(gamma), int(horizon))
