"""Functional TT inference of linear layers.

Three reference routes (all float64):
  * dense_linear           -- plain matrix-vector product
  * ttd_linear_naive       -- the d-nested summation with rank chaining
  * ttd_linear_staged      -- stage-by-stage contraction with the same
                              inter-stage reorder the hardware performs
plus ttd_linear_quant, which pushes the staged algorithm through the
emulated FP16 x INT4 PE datapath.

Stage conventions: partial P_{k} is a 2-D array whose leading axis fuses
(r_k, i_{k+1}) -- the next stage's summation dimension -- and whose
trailing axis flattens t_k = (i_{k+2}, ..., i_d, j_1, ..., j_k) row-major.
P_0 is the tensorized input with r_0 = 1.
"""

from __future__ import annotations

from math import prod

import numpy as np

from .compress import QuantCore, TTCores
from .datapath import fp16_snap, pe_dot_product
from .errors import ShapeError
from .tensor import flat_to_multi, multi_to_flat


def dense_linear(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if w.ndim != 2 or w.shape[1] != x.size:
        raise ShapeError(f"weight {w.shape} incompatible with input of length {x.size}")
    return w @ x


def _check_input(x: np.ndarray, n_factors) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size != prod(n_factors):
        raise ShapeError(f"input size {x.size} != prod(n_factors) {prod(n_factors)}")
    return x.reshape(n_factors)


def ttd_linear_naive(x: np.ndarray, tt: TTCores) -> np.ndarray:
    """Direct evaluation of the nested summation.

    For every output multi-index j, sums the chained core slice products
    over all input multi-indices i. Cubic in everything; this is the
    formula, not a fast path.
    """
    n, m = tt.n_factors, tt.m_factors
    xt = _check_input(x, n)
    d = tt.d
    out = np.zeros(m)
    # einsum operand axis labels: rank axes 0..d, input axes d+1..2d
    rank_ax = list(range(d + 1))
    in_ax = list(range(d + 1, 2 * d + 1))
    for j in np.ndindex(*m):
        operands = []
        for k in range(d):
            operands += [tt.cores[k][:, :, j[k], :], [rank_ax[k], in_ax[k], rank_ax[k + 1]]]
        operands += [xt, in_ax]
        out[j] = np.einsum(*operands, [rank_ax[0], rank_ax[-1]])[0, 0]
    return out


def stage_dims(k: int, n, m, ranks) -> tuple[int, int, int]:
    """(sum_len, out_len, time_len) of stage k (1-based)."""
    d = len(n)
    if not 1 <= k <= d:
        raise ShapeError(f"stage {k} out of range 1..{d}")
    sum_len = ranks[k - 1] * n[k - 1]
    out_len = m[k - 1] * ranks[k]
    time_len = prod(n[k:]) * prod(m[: k - 1])
    return sum_len, out_len, time_len


def reorder_stage(pbar: np.ndarray, k: int, n, m, ranks) -> np.ndarray:
    """Reorder the stage-k output into the next stage's input layout.

    pbar is indexed [t_{k-1}, (j_k, r_k)]; the result is indexed
    [(r_k, i_{k+1}), t_k]. For the final stage the result is the flat
    output in canonical (j_1, ..., j_d) order. Pure index permutation.
    """
    d = len(n)
    _, out_len, time_len = stage_dims(k, n, m, ranks)
    if pbar.shape != (time_len, out_len):
        raise ShapeError(f"stage {k} partial has shape {pbar.shape}, expected {(time_len, out_len)}")
    axes = tuple(n[k:]) + tuple(m[: k - 1]) + (m[k - 1], ranks[k])
    t = pbar.reshape(axes)
    nd = t.ndim
    # (r_k first, then the surviving i axes, then j_1..j_k)
    perm = (nd - 1,) + tuple(range(d - k)) + tuple(range(d - k, d - 1)) + (nd - 2,)
    t = np.transpose(t, perm)
    if k == d:
        return np.ascontiguousarray(t).reshape(-1)
    return np.ascontiguousarray(t).reshape(ranks[k] * n[k], -1)


def stage_target_index(k: int, t: int, o: int, n, m, ranks):
    """Destination of element (t, o) of the stage-k output.

    Returns (block, addr) coordinates in the next stage's layout, or a
    single flat output index for the final stage. This is the addressing
    that hides the reorder inside the ping-pong buffer writes.
    """
    d = len(n)
    t_dims = tuple(n[k:]) + tuple(m[: k - 1])
    t_idx = flat_to_multi(t, t_dims) if t_dims else ()
    r_k = ranks[k]
    j_k, rr = divmod(o, r_k)
    i_rest = t_idx[: d - k]          # (i_{k+1}, ..., i_d)
    j_prev = t_idx[d - k:]           # (j_1, ..., j_{k-1})
    if k == d:
        return multi_to_flat(j_prev + (j_k,), m)
    block = rr * n[k] + i_rest[0]
    addr_dims = tuple(n[k + 1:]) + tuple(m[:k])
    addr = multi_to_flat(i_rest[1:] + j_prev + (j_k,), addr_dims) if addr_dims else 0
    return block, addr


def _core_matrix(core: np.ndarray) -> np.ndarray:
    r_in, nk, mk, r_out = core.shape
    return core.reshape(r_in * nk, mk * r_out)


def ttd_linear_staged(x: np.ndarray, tt: TTCores) -> np.ndarray:
    """Stage-by-stage contraction mirroring the hardware loop structure."""
    n, m, ranks = tt.n_factors, tt.m_factors, tt.ranks
    p = _check_input(x, n).reshape(n[0], -1)
    for k in range(1, tt.d + 1):
        pbar = p.T @ _core_matrix(tt.cores[k - 1])
        p = reorder_stage(pbar, k, n, m, ranks)
    return p.reshape(m)


def ttd_linear_quant(x: np.ndarray, qcores: list[QuantCore]) -> np.ndarray:
    """Staged inference through the emulated PE datapath.

    Activations are FP16 (inputs snapped on entry, every stage output
    rounded to FP16); weights are the INT4 core values with their
    per-core scales applied inside the accumulation. Deterministic and
    bit-exact with respect to the datapath model.
    """
    d = len(qcores)
    n = tuple(qc.values.shape[1] for qc in qcores)
    m = tuple(qc.values.shape[2] for qc in qcores)
    ranks = [qcores[0].values.shape[0]] + [qc.values.shape[3] for qc in qcores]
    p = fp16_snap(_check_input(x, n)).reshape(n[0], -1)
    for k in range(1, d + 1):
        sum_len, out_len, time_len = stage_dims(k, n, m, ranks)
        gmat = _core_matrix(qcores[k - 1].values.astype(np.int64))
        pbar = np.zeros((time_len, out_len))
        for t in range(time_len):
            feats = p[:, t]
            for o in range(out_len):
                pbar[t, o] = pe_dot_product(feats, gmat[:, o], qcores[k - 1].scale)
        p = reorder_stage(pbar, k, n, m, ranks)
    return p.reshape(m)
