"""Dense tensors, index arithmetic, tensorization, and the TTDC container.

Everything here treats numpy arrays in C (row-major, last axis fastest)
order as the canonical representation. Reference math is float64 so that
errors observed downstream are attributable to the emulated datapath,
not the oracle.
"""

from __future__ import annotations

import struct
from math import prod

import numpy as np

from .errors import ShapeError

# TTDC binary container dtype codes
DTYPE_F64 = 0
DTYPE_F32 = 1
DTYPE_FP16_BITS = 2
DTYPE_INT4 = 3

_MAGIC = b"TTDC"
_VERSION = 1


def check_shape(dims) -> tuple[int, ...]:
    dims = tuple(int(v) for v in dims)
    if any(v < 1 for v in dims):
        raise ShapeError(f"axis extents must be >= 1, got {dims}")
    return dims


def factorize_dim(total: int, d: int, override=None) -> list[int]:
    """Deterministic d-way factorization of ``total``.

    Benchmark configs always carry explicit factor lists; pass them as
    ``override``. Without an override the result is the maximally
    balanced divisor split (minimal max/min ratio), lexicographically
    smallest on ties. Trailing 1s make a d-way split always possible.
    """
    if d < 2:
        raise ValueError(f"d must be >= 2, got {d}")
    if total < 1:
        raise ValueError(f"total must be >= 1, got {total}")
    if override is not None:
        override = [int(f) for f in override]
        if len(override) != d or prod(override) != total:
            raise ShapeError(
                f"override {override} is not a {d}-way factorization of {total}"
            )
        return override

    best = None  # (max/min ratio, factors)
    stack = [([], total)]
    while stack:
        acc, rem = stack.pop()
        if len(acc) == d - 1:
            cand = sorted(acc + [rem])
            key = (cand[-1] / cand[0], cand)
            if best is None or key < best:
                best = key
            continue
        for f in range(1, rem + 1):
            if rem % f == 0:
                stack.append((acc + [f], rem // f))
    return list(best[1])


def tensorize(t: np.ndarray, dims) -> np.ndarray:
    """Relabel flat data with a new shape; element order is unchanged."""
    dims = check_shape(dims)
    if t.size != prod(dims):
        raise ShapeError(f"cannot tensorize {t.size} elements to shape {dims}")
    return np.reshape(t, dims)


def multi_to_flat(idx, dims) -> int:
    dims = check_shape(dims)
    if len(idx) != len(dims):
        raise IndexError(f"index rank {len(idx)} != shape rank {len(dims)}")
    flat = 0
    for i, n in zip(idx, dims):
        if not 0 <= i < n:
            raise IndexError(f"index {tuple(idx)} out of range for shape {dims}")
        flat = flat * n + i
    return flat


def flat_to_multi(flat: int, dims) -> tuple[int, ...]:
    dims = check_shape(dims)
    if not 0 <= flat < prod(dims):
        raise IndexError(f"flat index {flat} out of range for shape {dims}")
    idx = []
    for n in reversed(dims):
        idx.append(flat % n)
        flat //= n
    return tuple(reversed(idx))


def invert_permutation(perm) -> tuple[int, ...]:
    inv = [0] * len(perm)
    for pos, ax in enumerate(perm):
        inv[ax] = pos
    return tuple(inv)


def permute_axes(t: np.ndarray, perm) -> np.ndarray:
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(t.ndim)):
        raise ValueError(f"{perm} is not a permutation of axes 0..{t.ndim - 1}")
    return np.ascontiguousarray(np.transpose(t, perm))


def matrix_to_tt_tensor(w: np.ndarray, n_factors, m_factors) -> np.ndarray:
    """Tensorize a (M, N) weight matrix to fused axes (n_1*m_1, ..., n_d*m_d).

    Within each fused axis the input factor n_k is major and the output
    factor m_k is minor.
    """
    n_factors = check_shape(n_factors)
    m_factors = check_shape(m_factors)
    d = len(n_factors)
    if len(m_factors) != d:
        raise ShapeError("n_factors and m_factors must have equal length")
    m_tot, n_tot = prod(m_factors), prod(n_factors)
    if w.shape != (m_tot, n_tot):
        raise ShapeError(f"weight shape {w.shape} != ({m_tot}, {n_tot})")
    t = w.reshape(m_factors + n_factors)
    perm = []
    for k in range(d):
        perm += [d + k, k]  # (n_k, m_k) per fused axis
    t = np.transpose(t, perm)
    return np.ascontiguousarray(t.reshape([n * m for n, m in zip(n_factors, m_factors)]))


def tt_tensor_to_matrix(t: np.ndarray, n_factors, m_factors) -> np.ndarray:
    """Inverse of :func:`matrix_to_tt_tensor`."""
    n_factors = check_shape(n_factors)
    m_factors = check_shape(m_factors)
    d = len(n_factors)
    split = []
    for n, m in zip(n_factors, m_factors):
        split += [n, m]
    t = t.reshape(split)
    perm = [2 * k + 1 for k in range(d)] + [2 * k for k in range(d)]
    t = np.transpose(t, perm)
    return np.ascontiguousarray(t.reshape(prod(m_factors), prod(n_factors)))


# ---------------------------------------------------------------------------
# TTDC binary container

def _pack_int4(values: np.ndarray) -> bytes:
    flat = values.reshape(-1).astype(np.int64)
    if flat.size and (flat.min() < -8 or flat.max() > 7):
        raise ValueError("int4 values must lie in [-8, 7]")
    nib = (flat & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.concatenate([nib, np.zeros(1, np.uint8)])
    pairs = nib.reshape(-1, 2)
    return (pairs[:, 0] | (pairs[:, 1] << 4)).astype(np.uint8).tobytes()


def _unpack_int4(raw: bytes, count: int) -> np.ndarray:
    b = np.frombuffer(raw, dtype=np.uint8)
    nib = np.empty(b.size * 2, dtype=np.uint8)
    nib[0::2] = b & 0xF
    nib[1::2] = b >> 4
    nib = nib[:count].astype(np.int8)
    nib[nib > 7] -= 16
    return nib


def write_ttdc(path, array: np.ndarray, dtype_code: int) -> None:
    dims = array.shape if array.ndim else (1,)
    header = struct.pack("<4sBBI", _MAGIC, _VERSION, dtype_code, len(dims))
    header += struct.pack("<" + "Q" * len(dims), *dims)
    if dtype_code == DTYPE_F64:
        payload = np.ascontiguousarray(array, dtype="<f8").tobytes()
    elif dtype_code == DTYPE_F32:
        payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    elif dtype_code == DTYPE_FP16_BITS:
        payload = np.ascontiguousarray(array, dtype="<u2").tobytes()
    elif dtype_code == DTYPE_INT4:
        payload = _pack_int4(np.ascontiguousarray(array))
    else:
        raise ValueError(f"unknown dtype code {dtype_code}")
    with open(path, "wb") as fh:
        fh.write(header + payload)


def read_ttdc(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, dtype_code, rank = struct.unpack_from("<4sBBI", raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    offset = struct.calcsize("<4sBBI")
    dims = struct.unpack_from("<" + "Q" * rank, raw, offset)
    offset += 8 * rank
    count = prod(dims)
    payload = raw[offset:]
    if dtype_code == DTYPE_F64:
        arr = np.frombuffer(payload, dtype="<f8", count=count).astype(np.float64)
    elif dtype_code == DTYPE_F32:
        arr = np.frombuffer(payload, dtype="<f4", count=count).astype(np.float32)
    elif dtype_code == DTYPE_FP16_BITS:
        arr = np.frombuffer(payload, dtype="<u2", count=count).astype(np.uint16)
    elif dtype_code == DTYPE_INT4:
        arr = _unpack_int4(payload, count)
    else:
        raise ValueError(f"{path}: unknown dtype code {dtype_code}")
    return arr.reshape(dims), dtype_code
