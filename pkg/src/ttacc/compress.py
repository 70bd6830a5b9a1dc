"""TT-SVD compression of weight matrices, reconstruction, and quantization.

A weight matrix (M, N) with factor lists n (inputs) and m (outputs) is
tensorized to fused axes v_k = n_k * m_k (n major, m minor) and swept by
iterated reshape -> SVD -> carry. Cores are stored as 4-way tensors
(r_{k-1}, n_k, m_k, r_k) with r_0 = r_d = 1.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from math import prod

import numpy as np

from . import tensor
from .errors import NumericError, ShapeError


@dataclass(frozen=True)
class TTConfig:
    n_factors: tuple[int, ...]
    m_factors: tuple[int, ...]
    max_rank: int
    tol: float = 0.0  # optional relative per-stage singular value cutoff

    def __post_init__(self):
        object.__setattr__(self, "n_factors", tensor.check_shape(self.n_factors))
        object.__setattr__(self, "m_factors", tensor.check_shape(self.m_factors))
        if len(self.n_factors) != len(self.m_factors):
            raise ShapeError("n_factors and m_factors must have equal length")
        if len(self.n_factors) < 2:
            raise ShapeError("need at least two factors per side")
        if self.max_rank < 1:
            raise ValueError("max_rank must be positive")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")

    @property
    def d(self) -> int:
        return len(self.n_factors)

    @property
    def n_total(self) -> int:
        return prod(self.n_factors)

    @property
    def m_total(self) -> int:
        return prod(self.m_factors)


@dataclass
class TTCores:
    """Ordered TT cores; core k has shape (r_{k-1}, n_k, m_k, r_k)."""

    cores: list[np.ndarray]
    stage_residuals: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.cores) < 2:
            raise ShapeError("a TT decomposition needs at least two cores")
        ranks = self.ranks
        if ranks[0] != 1 or ranks[-1] != 1:
            raise ShapeError(f"boundary ranks must be 1, got {ranks}")
        for k, c in enumerate(self.cores):
            if c.ndim != 4:
                raise ShapeError(f"core {k} must be 4-way, got shape {c.shape}")
            if c.shape[0] != ranks[k] or c.shape[3] != ranks[k + 1]:
                raise ShapeError("adjacent cores disagree on ranks")

    @property
    def d(self) -> int:
        return len(self.cores)

    @property
    def ranks(self) -> list[int]:
        return [self.cores[0].shape[0]] + [c.shape[3] for c in self.cores]

    @property
    def n_factors(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def m_factors(self) -> tuple[int, ...]:
        return tuple(c.shape[2] for c in self.cores)

    @property
    def param_count(self) -> int:
        return sum(c.size for c in self.cores)


@dataclass
class QuantCore:
    """INT4 core values plus one symmetric dequantization scale."""

    values: np.ndarray  # int8 holding int4 values, core shape
    scale: float

    def __post_init__(self):
        if self.values.size and (self.values.min() < -8 or self.values.max() > 7):
            raise ValueError("quantized values out of int4 range")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.scale


def tt_svd(w: np.ndarray, cfg: TTConfig) -> TTCores:
    """Sequential SVD sweep: reshape, SVD, keep U as core, carry S @ Vt.

    Rank at stage k is min(max_rank, full unfolding rank), further
    trimmed by cfg.tol (relative to the leading singular value) when
    set. Left singular vectors get a deterministic sign: the largest
    magnitude entry of each kept column is forced non-negative.
    """
    if w.ndim != 2:
        raise ShapeError(f"expected a 2-D weight matrix, got shape {w.shape}")
    t = tensor.matrix_to_tt_tensor(np.asarray(w, dtype=np.float64), cfg.n_factors, cfg.m_factors)
    v = [n * m for n, m in zip(cfg.n_factors, cfg.m_factors)]
    d = cfg.d

    cores: list[np.ndarray] = []
    residuals: list[float] = []
    c = t.reshape(v[0], -1)
    r_prev = 1
    for k in range(d - 1):
        c = c.reshape(r_prev * v[k], -1)
        try:
            u, s, vt = np.linalg.svd(c, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"SVD failed at stage {k + 1}: {exc}") from exc
        r_new = min(cfg.max_rank, len(s))
        if cfg.tol > 0 and s[0] > 0:
            r_new = min(r_new, max(1, int(np.sum(s > cfg.tol * s[0]))))
        u = u[:, :r_new].copy()
        carry = s[:r_new, None] * vt[:r_new]
        for j in range(r_new):
            i = int(np.argmax(np.abs(u[:, j])))
            if u[i, j] < 0:
                u[:, j] = -u[:, j]
                carry[j] = -carry[j]
        residuals.append(float(np.sqrt(np.sum(s[r_new:] ** 2))))
        cores.append(u.reshape(r_prev, cfg.n_factors[k], cfg.m_factors[k], r_new))
        c = carry
        r_prev = r_new
    cores.append(c.reshape(r_prev, cfg.n_factors[-1], cfg.m_factors[-1], 1))
    residuals.append(0.0)
    return TTCores(cores, stage_residuals=residuals)


def reconstruct(tt: TTCores) -> np.ndarray:
    """Evaluate the core chain for every multi-index and un-tensorize."""
    n, m = tt.n_factors, tt.m_factors
    g = tt.cores[0].reshape(n[0] * m[0], tt.ranks[1])
    for k in range(1, tt.d):
        core = tt.cores[k]
        r_in, r_out = core.shape[0], core.shape[3]
        g = g @ core.reshape(r_in, -1).reshape(r_in, n[k] * m[k] * r_out)
        g = g.reshape(-1, r_out)
    full = g.reshape([nk * mk for nk, mk in zip(n, m)])
    return tensor.tt_tensor_to_matrix(full, n, m)


def compression_ratio(cfg, ranks=None) -> float:
    """Dense parameter count over TT parameter count.

    Accepts a TTConfig (ranks default to the uniform max_rank chain) or
    a pair of factor lists via ``compression_ratio((n, m), ranks)``.
    """
    if isinstance(cfg, TTConfig):
        n, m = cfg.n_factors, cfg.m_factors
        if ranks is None:
            ranks = uniform_ranks(len(n), cfg.max_rank)
    else:
        n, m = cfg
    v = [int(a) * int(b) for a, b in zip(n, m)]
    if len(ranks) != len(v) + 1:
        raise ShapeError(f"need {len(v) + 1} ranks, got {len(ranks)}")
    dense = prod(v)
    tt_params = sum(vk * ranks[k] * ranks[k + 1] for k, vk in enumerate(v))
    return dense / tt_params


def uniform_ranks(d: int, rank: int) -> list[int]:
    return [1] + [rank] * (d - 1) + [1]


def reconstruction_error(w: np.ndarray, tt: TTCores) -> tuple[float, bool]:
    """Relative Frobenius error; falls back to the absolute norm for a
    zero-norm reference (second element reports whether the value is
    relative)."""
    rec = reconstruct(tt)
    if rec.shape != w.shape:
        raise ShapeError(f"shape mismatch: {rec.shape} vs {w.shape}")
    diff = float(np.linalg.norm(rec - w))
    ref = float(np.linalg.norm(w))
    if ref == 0.0:
        return diff, False
    return diff / ref, True


def quantize_core(core: np.ndarray) -> QuantCore:
    peak = float(np.max(np.abs(core))) if core.size else 0.0
    if peak == 0.0:
        return QuantCore(np.zeros(core.shape, dtype=np.int8), 1.0)
    scale = peak / 7.0
    q = np.clip(np.round(core / scale), -8, 7).astype(np.int8)
    return QuantCore(q, scale)


def quantize_cores(tt: TTCores) -> list[QuantCore]:
    """Symmetric per-core INT4 quantization, round-to-nearest-even."""
    return [quantize_core(c) for c in tt.cores]


def dequantize_cores(qcores: list[QuantCore]) -> TTCores:
    return TTCores([qc.dequantize() for qc in qcores])


# ---------------------------------------------------------------------------
# Core container directory: manifest + one TTDC file per core

def save_cores(path, tt: TTCores, qcores: list[QuantCore] | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    manifest = {
        "d": tt.d,
        "n_factors": list(tt.n_factors),
        "m_factors": list(tt.m_factors),
        "ranks": tt.ranks,
        "stage_residuals": tt.stage_residuals,
        "quantized": qcores is not None,
    }
    for k, core in enumerate(tt.cores):
        tensor.write_ttdc(os.path.join(path, f"core_{k}.ttdc"), core, tensor.DTYPE_F64)
    if qcores is not None:
        manifest["scales"] = [qc.scale for qc in qcores]
        for k, qc in enumerate(qcores):
            tensor.write_ttdc(os.path.join(path, f"qcore_{k}.ttdc"), qc.values, tensor.DTYPE_INT4)
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_cores(path) -> tuple[TTCores, list[QuantCore] | None]:
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    cores = []
    for k in range(manifest["d"]):
        arr, code = tensor.read_ttdc(os.path.join(path, f"core_{k}.ttdc"))
        if code != tensor.DTYPE_F64:
            raise ValueError(f"core_{k}.ttdc has unexpected dtype {code}")
        cores.append(arr)
    tt = TTCores(cores, stage_residuals=manifest.get("stage_residuals", []))
    qcores = None
    if manifest.get("quantized"):
        qcores = []
        for k, scale in enumerate(manifest["scales"]):
            arr, code = tensor.read_ttdc(os.path.join(path, f"qcore_{k}.ttdc"))
            qcores.append(QuantCore(arr, scale))
    return tt, qcores
