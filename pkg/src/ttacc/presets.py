"""Benchmark model configurations and measured per-operator delays.

Two full-size presets (chatglm3-6b, llama2-7b) carry the published
layer shapes, TT factor lists, per-operator delays, and reference
latency figures. The llama preset's reference first-token delay does
not close against its own per-operator delays and speedup; it is kept
verbatim and flagged as unreconciled instead of being adjusted. The
"-toy" variants are desk-scale (hidden 64) for functional testing.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field


@dataclass(frozen=True)
class TTSpec:
    n_factors: tuple[int, ...]
    m_factors: tuple[int, ...]
    rank: int

    @property
    def ranks(self) -> list[int]:
        d = len(self.n_factors)
        return [1] + [self.rank] * (d - 1) + [1]


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    tt: TTSpec | None = None  # None = dense (INT4-quantized only)

    @property
    def dense_params(self) -> int:
        return self.in_dim * self.out_dim

    @property
    def tt_params(self) -> int:
        if self.tt is None:
            return self.dense_params
        r = self.tt.ranks
        return sum(
            n * m * r[k] * r[k + 1]
            for k, (n, m) in enumerate(zip(self.tt.n_factors, self.tt.m_factors))
        )


@dataclass
class ModelConfig:
    name: str
    hidden: int
    n_heads: int
    kv_dim: int           # width of the K/V projections
    inter: int            # MLP intermediate width
    vocab: int
    n_blocks: int
    n_compressed_blocks: int
    act: str              # 'gelu' or 'silu'
    layers: dict[str, LayerSpec]
    baseline_block_speedup: float = 1.0
    reference: dict = field(default_factory=dict)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    def block_compression_ratio(self) -> float:
        dense = sum(s.dense_params for s in self.layers.values())
        compressed = sum(s.tt_params for s in self.layers.values())
        return dense / compressed

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        layers = {}
        for name, spec in data["layers"].items():
            tt = spec.get("tt")
            layers[name] = LayerSpec(
                spec["in_dim"],
                spec["out_dim"],
                TTSpec(tuple(tt["n_factors"]), tuple(tt["m_factors"]), tt["rank"]) if tt else None,
            )
        kw = dict(data)
        kw["layers"] = layers
        return cls(**kw)


# Per-operator delays in microseconds, keyed by instance name inside one
# block (plus the two output-layer ops). The 14 block rows appear in
# execution order.
BLOCK_OP_ORDER = [
    "attn_ln", "attn_qk", "emb_q", "emb_k", "attn_score", "softmax",
    "attn_v", "attn_ctx", "attn_out", "mlp_ln", "mlp_up", "act",
    "mlp_gate", "mlp_down",
]
OUTPUT_OP_ORDER = ["out_ln", "head"]

LATENCY_CHATGLM = {
    "attn_ln": 11.39, "attn_qk": 51.03, "emb_q": 6.54, "emb_k": 6.80,
    "attn_score": 8.24, "softmax": 26.08, "attn_v": 7.47, "attn_ctx": 8.99,
    "attn_out": 29.32, "mlp_ln": 11.63, "mlp_up": 43.04, "act": 21.87,
    "mlp_gate": 43.49, "mlp_down": 37.22,
    "out_ln": 13.78, "head": 701.18,
}

LATENCY_LLAMA = {
    "attn_ln": 12.57, "attn_qk": 91.23, "emb_q": 4.82, "emb_k": 6.80,
    "attn_score": 47.35, "softmax": 22.35, "attn_v": 51.94, "attn_ctx": 44.13,
    "attn_out": 29.34, "mlp_ln": 11.00, "mlp_up": 27.03, "act": 12.43,
    "mlp_gate": 27.74, "mlp_down": 24.73,
    "out_ln": 12.28, "head": 349.16,
}


def _chatglm() -> ModelConfig:
    tt_o = TTSpec((16, 8, 8, 4), (4, 8, 8, 16), 16)
    tt_up = TTSpec((8, 8, 8, 8), (4, 4, 8, 107), 16)
    tt_down = TTSpec((107, 8, 4, 4), (8, 8, 8, 8), 16)
    return ModelConfig(
        name="chatglm3-6b",
        hidden=4096, n_heads=32, kv_dim=256, inter=13696, vocab=65024,
        n_blocks=28, n_compressed_blocks=15, act="gelu",
        layers={
            "attn_q": LayerSpec(4096, 4096),
            "attn_k": LayerSpec(4096, 256),
            "attn_v": LayerSpec(4096, 256),
            "attn_out": LayerSpec(4096, 4096, tt_o),
            "mlp_up": LayerSpec(4096, 13696, tt_up),
            "mlp_gate": LayerSpec(4096, 13696, tt_up),
            "mlp_down": LayerSpec(13696, 4096, tt_down),
        },
        baseline_block_speedup=2.19,
        reference={
            "first_token_ms": 14.34,
            "peak_tokens_per_s": 69.7,
            "block_cr": 10.72,
            "latency_reference_unreconciled": False,
        },
    )


def _llama() -> ModelConfig:
    tt_o = TTSpec((16, 8, 8, 4), (4, 8, 8, 16), 16)
    tt_up = TTSpec((16, 8, 8, 4), (4, 4, 16, 43), 16)
    tt_down = TTSpec((43, 16, 4, 4), (4, 8, 8, 16), 16)
    return ModelConfig(
        name="llama2-7b",
        hidden=4096, n_heads=32, kv_dim=4096, inter=11008, vocab=32000,
        n_blocks=32, n_compressed_blocks=19, act="silu",
        layers={
            "attn_q": LayerSpec(4096, 4096),
            "attn_k": LayerSpec(4096, 4096),
            "attn_v": LayerSpec(4096, 4096),
            "attn_out": LayerSpec(4096, 4096, tt_o),
            "mlp_up": LayerSpec(4096, 11008, tt_up),
            "mlp_gate": LayerSpec(4096, 11008, tt_up),
            "mlp_down": LayerSpec(11008, 4096, tt_down),
        },
        baseline_block_speedup=1.78,
        reference={
            "first_token_ms": 15.20,
            "peak_tokens_per_s": 65.8,
            "block_cr": 4.01,
            # the per-op delays, block speedup and compressed-block count
            # reproduce ~17.8 ms, not the published 15.20 ms
            "latency_reference_unreconciled": True,
        },
    )


def _toy(base: ModelConfig, act: str) -> ModelConfig:
    tt_sq = TTSpec((4, 4, 4), (4, 4, 4), 4)
    tt_up = TTSpec((4, 4, 4), (4, 4, 8), 4)
    tt_down = TTSpec((8, 4, 4), (4, 4, 4), 4)
    return ModelConfig(
        name=base.name + "-toy",
        hidden=64, n_heads=2, kv_dim=64, inter=128, vocab=50,
        n_blocks=1, n_compressed_blocks=1, act=act,
        layers={
            "attn_q": LayerSpec(64, 64),
            "attn_k": LayerSpec(64, 64),
            "attn_v": LayerSpec(64, 64),
            "attn_out": LayerSpec(64, 64, tt_sq),
            "mlp_up": LayerSpec(64, 128, tt_up),
            "mlp_gate": LayerSpec(64, 128, tt_up),
            "mlp_down": LayerSpec(128, 64, tt_down),
        },
        baseline_block_speedup=base.baseline_block_speedup,
        reference={},
    )


def get_preset(name: str) -> ModelConfig:
    presets = {
        "chatglm3-6b": _chatglm,
        "llama2-7b": _llama,
        "chatglm3-6b-toy": lambda: _toy(_chatglm(), "gelu"),
        "llama2-7b-toy": lambda: _toy(_llama(), "silu"),
    }
    if name not in presets:
        raise KeyError(f"unknown preset {name!r}; have {sorted(presets)}")
    return presets[name]()


def get_latency_table(name: str) -> dict[str, float]:
    if name.startswith("chatglm"):
        return dict(LATENCY_CHATGLM)
    if name.startswith("llama"):
        return dict(LATENCY_LLAMA)
    raise KeyError(f"no latency table for {name!r}")
