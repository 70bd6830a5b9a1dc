"""Cycle-level model of the group vector systolic array.

The array holds T_out vector PEs of T_in lanes; T_n PEs compute in
parallel per group. One weight vector loads per cycle and stays
resident for T_out cycles while feature vectors stream from group to
group. A stage of TT inference is the loop nest
(time tiles) x (output tiles) x (summation tiles) x T_out cycles, with
the inter-stage reorder hidden in the ping-pong buffer addressing.

The event-driven engine steps every cycle and audits weight residency;
the analytic formula is the closed form it must match exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import ceil, prod

import numpy as np

from .compress import QuantCore
from .datapath import fp16_snap, pe_dot_product
from .errors import CapacityError, ShapeError
from .infer import stage_dims, stage_target_index

PE_PIPELINE_DEPTH = 8  # field split, multiply, compare, shift, tree, scale, writeback


@dataclass(frozen=True)
class PEConfig:
    t_in: int = 128
    t_out: int = 32
    t_n: int = 16
    frequency_mhz: float = 125.0

    def __post_init__(self):
        if min(self.t_in, self.t_out, self.t_n) < 1 or self.frequency_mhz <= 0:
            raise ValueError("PE parameters must be positive")
        if self.t_out % self.t_n:
            raise ValueError(f"t_out ({self.t_out}) must be divisible by t_n ({self.t_n})")


@dataclass(frozen=True)
class StagePlan:
    stage: int
    sum_len: int
    out_len: int
    time_len: int

    def loops(self, cfg: PEConfig) -> tuple[int, int, int]:
        """(L_time, L_out, L_sum) tile counts."""
        return (
            ceil(self.time_len / cfg.t_out),
            ceil(self.out_len / cfg.t_out),
            ceil(self.sum_len / cfg.t_in),
        )


def make_stage_plans(n, m, ranks) -> list[StagePlan]:
    d = len(n)
    if len(m) != d or len(ranks) != d + 1:
        raise ShapeError("factor/rank lists are inconsistent")
    return [StagePlan(k, *stage_dims(k, n, m, ranks)) for k in range(1, d + 1)]


def matmul_plan(m_out: int, n_in: int) -> StagePlan:
    """A dense matrix-vector product as a single weight-stationary stage."""
    if m_out < 1 or n_in < 1:
        raise ShapeError("matrix dimensions must be positive")
    return StagePlan(1, n_in, m_out, 1)


def pipeline_fill(cfg: PEConfig) -> int:
    return cfg.t_out + PE_PIPELINE_DEPTH


def cycles_analytic(plan: StagePlan, cfg: PEConfig) -> int:
    l_time, l_out, l_sum = plan.loops(cfg)
    return l_time * l_out * l_sum * cfg.t_out + pipeline_fill(cfg)


@dataclass
class SimReport:
    stage_cycles: list[int]
    total_cycles: int
    weight_loads: int
    feature_reads: int
    output_writes: int
    reorder_stall_cycles: int
    latency_us: float
    buffer_required: int
    external_bytes: dict
    internal_bytes: int
    config: dict
    values: np.ndarray | None = None
    weight_residencies: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "stage_cycles": self.stage_cycles,
            "total_cycles": self.total_cycles,
            "weight_loads": self.weight_loads,
            "feature_reads": self.feature_reads,
            "output_writes": self.output_writes,
            "reorder_stall_cycles": self.reorder_stall_cycles,
            "latency_us": self.latency_us,
            "buffer_required": self.buffer_required,
            "external_bytes": self.external_bytes,
            "internal_bytes": self.internal_bytes,
            "config": self.config,
        }
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


def buffer_traffic(report: SimReport) -> dict:
    """Byte movement split into external (DDR/HBM) and on-chip traffic."""
    return {
        "external_bytes": report.external_bytes,
        "external_total": sum(report.external_bytes.values()),
        "internal_bytes": report.internal_bytes,
    }


class _Engine:
    """Per-cycle stepper with weight residency auditing."""

    def __init__(self, cfg: PEConfig, trace=None):
        self.cfg = cfg
        self.cycle = 0
        self.weight_loads = 0
        self.feature_reads = 0
        self.trace = trace
        self._slot_loaded_at: dict[int, int] = {}
        self.residencies: list[int] = []

    def _emit(self, unit, action):
        if self.trace is not None:
            self.trace.write(f"{self.cycle},{unit},{action}\n")

    def run_stage(self, plan: StagePlan) -> int:
        start = self.cycle
        l_time, l_out, l_sum = plan.loops(self.cfg)
        t_out = self.cfg.t_out
        for tile in range(l_time * l_out * l_sum):
            for c in range(t_out):
                # one weight vector enters per cycle, displacing the one
                # loaded T_out cycles earlier from the same slot
                prev = self._slot_loaded_at.get(c)
                if prev is not None:
                    self.residencies.append(self.cycle - prev)
                self._slot_loaded_at[c] = self.cycle
                self.weight_loads += 1
                self.feature_reads += 1
                self._emit("array", f"load_w slot={c} tile={tile}")
                self.cycle += 1
        self._slot_loaded_at.clear()
        self.cycle += pipeline_fill(self.cfg)
        self._emit("array", f"stage {plan.stage} drained")
        return self.cycle - start


def run_matmul(m_out: int, n_in: int, cfg: PEConfig = PEConfig(), *, trace=None) -> SimReport:
    """Dense matrix-vector product in the row-by-row systolic style."""
    plan = matmul_plan(m_out, n_in)
    eng = _Engine(cfg, trace=trace)
    cycles = eng.run_stage(plan)
    ext = {
        "input": 2 * n_in,
        "weights": m_out * n_in // 2 + (1 if (m_out * n_in) % 2 else 0),
        "output": 2 * m_out,
    }
    return SimReport(
        stage_cycles=[cycles],
        total_cycles=eng.cycle,
        weight_loads=eng.weight_loads,
        feature_reads=eng.feature_reads,
        output_writes=m_out,
        reorder_stall_cycles=0,
        latency_us=eng.cycle / cfg.frequency_mhz,
        buffer_required=0,
        external_bytes=ext,
        internal_bytes=0,
        config={"kind": "matmul", "m": m_out, "n": n_in, "pe": vars(cfg).copy()},
        weight_residencies=eng.residencies,
    )


def run_ttd_linear(
    cfg: PEConfig,
    n_factors,
    m_factors,
    ranks,
    *,
    x=None,
    qcores: list[QuantCore] | None = None,
    double_buffering: bool = True,
    buffer_capacity: int | None = None,
    trace=None,
) -> SimReport:
    """Simulate all d stages of a TT linear layer back to back.

    With ``x`` and ``qcores`` supplied the run also carries values: the
    functional payload flows through the ping-pong banks with the
    reorder embedded in the write addressing, and every accumulation
    uses the emulated PE datapath. The result is bit-identical to
    :func:`ttacc.infer.ttd_linear_quant`.
    """
    n = tuple(int(v) for v in n_factors)
    m = tuple(int(v) for v in m_factors)
    ranks = [int(r) for r in ranks]
    plans = make_stage_plans(n, m, ranks)
    d = len(plans)

    # ping-pong bank sizing: each inter-stage partial, laid out as
    # (next summation dim) blocks x (next time dim) addresses
    partial_sizes = [plans[k].sum_len * plans[k].time_len for k in range(1, d)]
    required = max(partial_sizes, default=0)
    if buffer_capacity is not None and required > buffer_capacity:
        raise CapacityError(
            f"ping-pong bank needs {required} elements, capacity is {buffer_capacity}",
            required=required,
        )

    value_mode = x is not None and qcores is not None
    if value_mode:
        flat = np.asarray(x, dtype=np.float64).reshape(-1)
        if flat.size != prod(n):
            raise ShapeError("input size does not match n_factors")
        store = fp16_snap(flat).reshape(n[0], -1)

    eng = _Engine(cfg, trace=trace)
    stage_cycles = []
    stalls = 0
    y = None
    for k in range(1, d + 1):
        plan = plans[k - 1]
        cycles = eng.run_stage(plan)
        if value_mode:
            qc = qcores[k - 1]
            gmat = qc.values.astype(np.int64).reshape(plan.sum_len, plan.out_len)
            if k < d:
                nxt = plans[k]
                bank = np.zeros((nxt.sum_len, nxt.time_len))
            else:
                bank = np.zeros(prod(m))
            for t in range(plan.time_len):
                feats = store[:, t]
                for o in range(plan.out_len):
                    val = pe_dot_product(feats, gmat[:, o], qc.scale)
                    dest = stage_target_index(k, t, o, n, m, ranks)
                    if k < d:
                        bank[dest[0], dest[1]] = val
                    else:
                        bank[dest] = val
            store = bank if k < d else None
            if k == d:
                y = bank.reshape(m)
        if k < d and not double_buffering:
            # single buffer: a dedicated reorder pass must copy the
            # partial out and back before the next stage may read it
            stall = ceil(partial_sizes[k - 1] / cfg.t_out)
            stalls += stall
            eng.cycle += stall
        stage_cycles.append(cycles)

    core_elems = sum(
        ranks[k] * n[k] * m[k] * ranks[k + 1] for k in range(d)
    )
    ext = {
        "input": 2 * prod(n),
        "weights": ceil(core_elems / 2) + 4 * d,  # packed int4 plus fp32 scales
        "output": 2 * prod(m),
    }
    internal = sum(2 * 2 * s for s in partial_sizes)  # fp16, write + read

    report = SimReport(
        stage_cycles=stage_cycles,
        total_cycles=eng.cycle,
        weight_loads=eng.weight_loads,
        feature_reads=eng.feature_reads,
        output_writes=prod(m),
        reorder_stall_cycles=stalls,
        latency_us=eng.cycle / cfg.frequency_mhz,
        buffer_required=required,
        external_bytes=ext,
        internal_bytes=internal,
        config={
            "kind": "ttd_linear",
            "n_factors": list(n),
            "m_factors": list(m),
            "ranks": ranks,
            "double_buffering": double_buffering,
            "pe": vars(cfg).copy(),
        },
        values=y,
        weight_residencies=eng.residencies,
    )
    if double_buffering and report.reorder_stall_cycles != 0:
        raise AssertionError("double-buffered TTD run must not stall on reorders")
    return report
