"""Fused-operator graph construction, instruction emission, functional
execution, and end-to-end latency estimation.

A transformer block maps to 14 accelerator operations (attention: LN,
QK projection, rotary embeddings on Q and K, score matmul, softmax, V
projection, context matmul, output projection; MLP: LN, up projection,
activation, gate projection, down projection), plus two output-layer
operations (LN, head projection with argmax). Scale/bias (BN), residual
adds, operand transposes and the final argmax are separate nodes in the
unfused graph and are folded into their producing linear by fuse().
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import sqrt

import numpy as np

from .compress import TTCores
from .errors import FusionError, ShapeError
from .infer import ttd_linear_quant, ttd_linear_staged
from .presets import BLOCK_OP_ORDER, OUTPUT_OP_ORDER, ModelConfig

_FUSABLE = ("bn", "residual", "transpose", "argmax")


@dataclass
class OpNode:
    kind: str                  # 'ttd_linear' | 'linear' | 'nonlinear'
    role: str                  # executor dispatch key
    name: str                  # e.g. 'block0.attn_qk'
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    params: dict = field(default_factory=dict)
    fused: tuple[str, ...] = ()

    @property
    def instance(self) -> str:
        """Name without the block prefix; keys the latency tables."""
        return self.name.split(".", 1)[-1]

    def label(self) -> str:
        if self.kind == "nonlinear":
            return self.params.get("label", self.role.upper())
        base = "TTDLinear" if self.kind == "ttd_linear" else "Linear"
        suffix = "".join(
            {"bn": "BN", "residual": "Res", "transpose": "TRP", "argmax": "Argmax"}[f]
            for f in self.fused
        )
        tag = self.params.get("tag", "")
        return base + ("-" + suffix if suffix else "") + tag


@dataclass
class OperatorGraph:
    nodes: list[OpNode]
    model: ModelConfig

    def op_sequence(self) -> list[str]:
        return [n.label() for n in self.nodes]


def _linear_kind(cfg: ModelConfig, block: int, layer: str) -> str:
    compressed = block < cfg.n_compressed_blocks
    return "ttd_linear" if compressed and cfg.layers[layer].tt is not None else "linear"


def build_graph(cfg: ModelConfig, fused: bool = True) -> OperatorGraph:
    """Operator graph in accelerator execution order.

    The first cfg.n_compressed_blocks blocks use TT linears for the
    layers that carry a TT spec; the remaining blocks substitute plain
    linears. With fused=False the scale/bias, residual, transpose and
    argmax steps are emitted as separate nodes.
    """
    nodes: list[OpNode] = []
    h, kv = cfg.hidden, cfg.kv_dim

    def nl(name, label, ins, outs, **params):
        nodes.append(OpNode("nonlinear", params.pop("role"), name, tuple(ins), tuple(outs),
                            {"label": label, **params}))

    def lin(name, role, ins, out, want_fused, **params):
        """One (TT) linear; fusable post-steps either fold in or trail as
        helper nodes. Returns the buffer downstream consumers read."""
        block = params.get("block")
        layer = params.get("layer")
        kind = _linear_kind(cfg, block, layer) if layer else "linear"
        if fused:
            inputs = tuple(ins)
            if "residual" in want_fused:
                inputs = inputs + (params["residual_of"],)
            nodes.append(OpNode(kind, role, name, inputs, (out,), params, tuple(want_fused)))
            return out
        nodes.append(OpNode(kind, role, name, tuple(ins), (out,), params))
        cur = out
        for step in want_fused:
            nxt = f"{name}.{step}"
            if step == "residual":
                nodes.append(OpNode("nonlinear", "residual", nxt,
                                    (cur, params["residual_of"]), (nxt,),
                                    {"label": "Res", "mode": params.get("residual_mode", "add")}))
            else:
                nodes.append(OpNode("nonlinear", step, nxt, (cur,), (nxt,),
                                    {"label": step.upper()}))
            cur = nxt
        return cur

    x = "emb"
    for b in range(cfg.n_blocks):
        p = f"block{b}"
        compressed = b < cfg.n_compressed_blocks
        common = {"block": b, "compressed": compressed}
        nl(f"{p}.attn_ln", "LN", [x], [f"{p}.aln"], role="ln", dim=h, **common)
        qk = lin(f"{p}.attn_qk", "qk_proj", [f"{p}.aln"], f"{p}.qk", ["bn"],
                 tag="(QK)", layer=None, out_dims=(h, kv), **common)
        nl(f"{p}.emb_q", "EMB(Q)", [qk], [f"{p}.qr"], role="rope", dim=h,
           slice=(0, h), **common)
        nl(f"{p}.emb_k", "EMB(K)", [qk], [f"{p}.kr"], role="rope", dim=kv,
           slice=(h, h + kv), **common)
        s = lin(f"{p}.attn_score", "score", [f"{p}.qr", f"{p}.kr"], f"{p}.s",
                ["transpose"], layer=None, **common)
        nl(f"{p}.softmax", "Softmax", [s], [f"{p}.pr"], role="softmax", **common)
        v = lin(f"{p}.attn_v", "v_proj", [f"{p}.aln"], f"{p}.v", ["bn"], tag="(V)",
                layer=None, out_dims=(kv,), **common)
        c = lin(f"{p}.attn_ctx", "ctx", [f"{p}.pr", v], f"{p}.c", [],
                layer=None, **common)
        ao = lin(f"{p}.attn_out", "proj", [c], f"{p}.ao", ["bn", "residual"],
                 layer="attn_out", residual_of=x, **common)
        nl(f"{p}.mlp_ln", "LN", [ao], [f"{p}.mln"], role="ln", dim=h, **common)
        up = lin(f"{p}.mlp_up", "proj", [f"{p}.mln"], f"{p}.up", ["bn"],
                 layer="mlp_up", **common)
        nl(f"{p}.act", "ACT", [up], [f"{p}.act"], role="act", fn=cfg.act, **common)
        # the gate's residual port multiplies in the activation branch
        g = lin(f"{p}.mlp_gate", "proj", [f"{p}.mln"], f"{p}.g", ["bn", "residual"],
                layer="mlp_gate", residual_of=f"{p}.act", residual_mode="mul", **common)
        x = lin(f"{p}.mlp_down", "proj", [g], f"{p}.out", ["bn", "residual"],
                layer="mlp_down", residual_of=ao, **common)

    nl("output.out_ln", "LN", [x], ["final_ln"], role="ln", dim=h, block=None, compressed=True)
    lin("output.head", "head", ["final_ln"], "logits", ["bn", "argmax"],
        layer=None, block=None, compressed=True, out_dims=(cfg.vocab,))
    return OperatorGraph(nodes, cfg)


def fuse(graph: OperatorGraph) -> OperatorGraph:
    """Fold BN/Res/TRP/Argmax helper nodes into their producing linear.

    Idempotent. Folding onto a nonlinear producer is rejected.
    """
    producers: dict[str, OpNode] = {}
    kept: list[OpNode] = []
    renames: dict[str, str] = {}
    for node in graph.nodes:
        node = OpNode(node.kind, node.role, node.name,
                      tuple(renames.get(i, i) for i in node.inputs),
                      node.outputs, dict(node.params), node.fused)
        if node.kind == "nonlinear" and node.role in _FUSABLE:
            target = producers.get(node.inputs[0])
            if target is None or target.kind == "nonlinear":
                raise FusionError(
                    f"cannot fuse {node.role!r} node {node.name} into "
                    f"{'missing producer' if target is None else target.name}"
                )
            target.fused = target.fused + (node.role,)
            if node.role == "residual":
                target.params["residual_of"] = node.inputs[1]
                target.params["residual_mode"] = node.params.get("mode", "add")
                target.inputs = target.inputs + (node.inputs[1],)
            # the folded node's output now comes from the linear itself
            renames[node.outputs[0]] = target.outputs[0]
            producers[target.outputs[0]] = target
            continue
        kept.append(node)
        for out in node.outputs:
            producers[out] = node
    for node in kept:
        node.params.pop("post", None)
    return OperatorGraph(kept, graph.model)


# ---------------------------------------------------------------------------
# Instruction emission

@dataclass
class Instruction:
    seq: int
    kind: str
    name: str
    params: dict
    in_addrs: list[int]
    out_addrs: list[int]

    def to_record(self) -> dict:
        return {
            "seq": self.seq, "kind": self.kind, "name": self.name,
            "params": self.params, "in_addrs": self.in_addrs,
            "out_addrs": self.out_addrs,
        }


@dataclass
class InstructionStream:
    instructions: list[Instruction]

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(i.to_record(), sort_keys=True)
                         for i in self.instructions) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "InstructionStream":
        instrs = []
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            instrs.append(Instruction(rec["seq"], rec["kind"], rec["name"],
                                      rec["params"], rec["in_addrs"], rec["out_addrs"]))
        return cls(instrs)

    def op_sequence(self) -> list[tuple[str, str]]:
        return [(i.kind, i.name) for i in self.instructions]


def _buffer_sizes(graph: OperatorGraph, seq_len: int) -> dict[str, int]:
    """Bytes per named buffer (FP16 activations)."""
    cfg = graph.model
    sizes = {"emb": seq_len * cfg.hidden * 2}
    for node in graph.nodes:
        for out in node.outputs:
            if node.role in ("ln", "residual", "bn", "transpose"):
                # shape-preserving: inherit from input
                src = node.inputs[0]
                sizes[out] = sizes.get(src, seq_len * cfg.hidden * 2)
            elif node.role == "rope":
                sizes[out] = seq_len * node.params["dim"] * 2
            elif node.role == "qk_proj":
                q_dim, kv_dim = node.params["out_dims"]
                sizes[out] = seq_len * (q_dim + kv_dim) * 2
            elif node.role in ("score", "softmax"):
                sizes[out] = cfg.n_heads * seq_len * seq_len * 2
            elif node.role == "v_proj":
                sizes[out] = seq_len * node.params["out_dims"][0] * 2
            elif node.role == "ctx":
                sizes[out] = seq_len * cfg.hidden * 2
            elif node.role == "proj":
                sizes[out] = seq_len * cfg.layers[node.params["layer"]].out_dim * 2
            elif node.role == "head":
                sizes[out] = seq_len * node.params["out_dims"][0] * 2
            elif node.role == "argmax":
                sizes[out] = seq_len * 2
            elif node.role == "act":
                sizes[out] = sizes[node.inputs[0]]
            else:
                raise ShapeError(f"cannot size buffer for role {node.role!r}")
    return sizes


def emit_instructions(graph: OperatorGraph, seq_len: int = 1) -> InstructionStream:
    """Serialize the graph with liveness-based virtual address reuse.

    Buffers live in one flat address space; an address is recycled once
    its last consumer has issued. Deterministic for a given graph.
    """
    sizes = _buffer_sizes(graph, seq_len)
    last_use: dict[str, int] = {}
    for idx, node in enumerate(graph.nodes):
        for buf in node.inputs:
            last_use[buf] = idx

    next_addr = 0
    free: dict[int, list[int]] = {}
    addr_of: dict[str, int] = {}

    def alloc(buf: str) -> int:
        nonlocal next_addr
        size = sizes[buf]
        pool = free.get(size)
        if pool:
            addr = pool.pop()
        else:
            addr = next_addr
            next_addr += size
        addr_of[buf] = addr
        return addr

    alloc("emb")
    instrs = []
    for idx, node in enumerate(graph.nodes):
        in_addrs = [addr_of[b] for b in node.inputs]
        out_addrs = [alloc(b) for b in node.outputs]
        params = {k: v for k, v in node.params.items() if k != "label"}
        params["fused"] = list(node.fused)
        instrs.append(Instruction(idx, node.label(), node.name, params, in_addrs, out_addrs))
        for buf in node.inputs:
            if last_use.get(buf) == idx and buf in addr_of:
                free.setdefault(sizes[buf], []).append(addr_of.pop(buf))
    return InstructionStream(instrs)


# ---------------------------------------------------------------------------
# Functional execution (desk scale)

_LN_EPS = 1e-5


def _rms_norm(x, gamma):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _LN_EPS) * gamma


def _rope(x, n_heads):
    seq, dim = x.shape
    dh = dim // n_heads
    half = dh // 2
    pos = np.arange(seq)[:, None]
    freqs = 10000.0 ** (-np.arange(half) / half)
    ang = pos * freqs[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    xh = x.reshape(seq, n_heads, dh)
    x1, x2 = xh[..., :half], xh[..., half:]
    out = np.concatenate(
        [x1 * cos[:, None, :] - x2 * sin[:, None, :],
         x1 * sin[:, None, :] + x2 * cos[:, None, :]], axis=-1)
    return out.reshape(seq, dim)


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _activation(x, fn):
    if fn == "silu":
        return x / (1.0 + np.exp(-x))
    if fn == "gelu":
        return 0.5 * x * (1.0 + np.tanh(sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))
    raise ValueError(f"unknown activation {fn!r}")


def _apply_linear(node: OpNode, x: np.ndarray, weights: dict, quant: bool) -> np.ndarray:
    key = node.name
    if node.kind == "ttd_linear":
        if quant and key + ".qcores" in weights:
            qcores = weights[key + ".qcores"]
            return np.stack([ttd_linear_quant(row, qcores).reshape(-1) for row in x])
        tt: TTCores = weights[key + ".tt"]
        return np.stack([ttd_linear_staged(row, tt).reshape(-1) for row in x])
    w = weights[key + ".weight"]
    return x @ w.T


def functional_execute(graph: OperatorGraph, weights: dict, tokens, *, quant: bool = False):
    """Reference-precision forward pass of the graph at desk scale.

    ``tokens`` is a sequence of token ids looked up in
    weights['embedding']; TT linears dispatch to the staged inference
    (or the emulated quantized datapath with quant=True). Returns a dict
    with 'logits' and, when the head fuses an argmax, 'argmax'.
    """
    cfg = graph.model
    if cfg.hidden > 64 or cfg.n_blocks > 2:
        raise ShapeError("functional execution is desk-scale only (hidden <= 64, blocks <= 2)")
    tokens = np.asarray(tokens, dtype=np.int64)
    env: dict[str, np.ndarray] = {"emb": weights["embedding"][tokens]}
    result: dict[str, np.ndarray] = {}

    def bn(node, y):
        scale = weights.get(node.name + ".bn_scale")
        bias = weights.get(node.name + ".bn_bias")
        if scale is not None:
            y = y * scale
        if bias is not None:
            y = y + bias
        return y

    for node in graph.nodes:
        ins = [env[b] for b in node.inputs]
        role = node.role
        if role == "ln":
            out = _rms_norm(ins[0], weights.get(node.name + ".gamma", 1.0))
        elif role == "rope":
            lo, hi = node.params["slice"]
            heads = max(1, cfg.n_heads * node.params["dim"] // cfg.hidden)
            out = _rope(ins[0][:, lo:hi], heads)
        elif role in ("qk_proj", "v_proj"):
            out = ins[0] @ weights[node.name + ".weight"].T
            if "bn" in node.fused:
                out = bn(node, out)
        elif role == "score":
            q, k = ins
            seq = q.shape[0]
            dh = cfg.head_dim
            qh = q.reshape(seq, -1, dh)
            kh = k.reshape(seq, -1, dh)
            if kh.shape[1] != qh.shape[1]:  # grouped KV: broadcast groups
                kh = np.repeat(kh, qh.shape[1] // kh.shape[1], axis=1)
            out = np.einsum("shd,thd->hst", qh, kh) / sqrt(dh)
        elif role == "transpose":
            out = ins[0]  # operand transpose is part of the score matmul
        elif role == "softmax":
            out = _softmax(ins[0])
        elif role == "ctx":
            p, v = ins
            seq = v.shape[0]
            dh = cfg.head_dim
            vh = v.reshape(seq, -1, dh)
            if vh.shape[1] != p.shape[0]:
                vh = np.repeat(vh, p.shape[0] // vh.shape[1], axis=1)
            out = np.einsum("hst,thd->shd", p, vh).reshape(seq, -1)
        elif role == "proj":
            out = _apply_linear(node, ins[0], weights, quant)
            if "bn" in node.fused:
                out = bn(node, out)
            if "residual" in node.fused:
                other = env[node.params["residual_of"]]
                mode = node.params.get("residual_mode", "add")
                out = out * other if mode == "mul" else out + other
        elif role == "act":
            out = _activation(ins[0], node.params["fn"])
        elif role == "residual":
            mode = node.params.get("mode", "add")
            out = ins[0] * ins[1] if mode == "mul" else ins[0] + ins[1]
        elif role == "bn":
            out = bn(OpNode(node.kind, role, node.name.rsplit(".", 1)[0],
                            node.inputs, node.outputs), ins[0])
        elif role == "argmax":
            out = np.argmax(ins[0], axis=-1)
            result["argmax"] = out
        elif role == "head":
            out = ins[0] @ weights[node.name + ".weight"].T
            if "bn" in node.fused:
                out = bn(node, out)
            result["logits"] = out
            if "argmax" in node.fused:
                result["argmax"] = np.argmax(out, axis=-1)
        else:
            raise ShapeError(f"unknown role {node.role!r}")
        for b in node.outputs:
            env[b] = out
        if node.role == "head" and "logits" not in result:
            result["logits"] = out
    if "logits" not in result:
        # unfused graph: logits live in the head's raw output buffer
        for node in graph.nodes:
            if node.role == "head":
                result["logits"] = env[node.outputs[0]]
    return result


# ---------------------------------------------------------------------------
# Latency estimation

_ATTN_SEQ_SCALED = {"attn_score", "softmax", "attn_ctx"}


def estimate_latency(stream: InstructionStream, table: dict[str, float],
                     cfg: ModelConfig, *, decode_tokens: int = 1) -> dict:
    """First-token delay and steady-state decode speed from per-op delays.

    TT-compressed blocks use the table delays directly; baseline blocks
    scale every block op by the published single-block speedup. The
    decode step reuses the same sum with the attention matmul/softmax
    ops scaled linearly by the KV length (decode_tokens).
    """
    missing = sorted({
        i.name.split(".", 1)[-1] for i in stream.instructions
        if i.name.split(".", 1)[-1].split(".")[0] not in table
    })
    if missing:
        raise ValueError(f"latency table is missing entries for: {missing}")

    def op_delay(instr: Instruction, kv_scale: float) -> float:
        inst = instr.name.split(".", 1)[-1].split(".")[0]
        delay = table[inst]
        if instr.params.get("block") is not None and not instr.params.get("compressed", True):
            delay *= cfg.baseline_block_speedup
        if inst in _ATTN_SEQ_SCALED:
            delay *= kv_scale
        return delay

    first_token_us = sum(op_delay(i, 1.0) for i in stream.instructions)
    decode_us = sum(op_delay(i, float(decode_tokens)) for i in stream.instructions)
    result = {
        "first_token_ms": first_token_us / 1000.0,
        "tokens_per_s": 1000.0 / (decode_us / 1000.0) if decode_us else 0.0,
        "decode_step_ms": decode_us / 1000.0,
    }
    ref = cfg.reference.get("first_token_ms")
    if ref:
        rel = abs(result["first_token_ms"] - ref) / ref
        result["published_first_token_ms"] = ref
        result["published_tokens_per_s"] = cfg.reference.get("peak_tokens_per_s")
        result["reference_rel_diff"] = rel
        result["reference_unreconciled"] = bool(
            cfg.reference.get("latency_reference_unreconciled", rel > 0.01)
        )
    return result
