import numpy as np
import pytest

from ttacc import compiler, compress, presets
from ttacc.compiler import (
    InstructionStream,
    build_graph,
    emit_instructions,
    estimate_latency,
    functional_execute,
    fuse,
)
from ttacc.compress import TTConfig, tt_svd
from ttacc.errors import FusionError
from ttacc.presets import get_latency_table, get_preset

BLOCK_LABELS = [
    "LN", "Linear-BN(QK)", "EMB(Q)", "EMB(K)", "Linear-TRP", "Softmax",
    "Linear-BN(V)", "Linear", "TTDLinear-BNRes", "LN", "TTDLinear-BN",
    "ACT", "TTDLinear-BNRes", "TTDLinear-BNRes",
]
OUTPUT_LABELS = ["LN", "Linear-BNArgmax"]


def _toy_weights(cfg, rng, dense_twin=True):
    """Random weights for a toy config; TT layers get truncated TT-SVD
    cores and, when requested, the reconstruction as their dense twin."""
    h, kv, vocab = cfg.hidden, cfg.kv_dim, cfg.vocab
    weights = {"embedding": rng.standard_normal((vocab, h)) * 0.1}
    for b in range(cfg.n_blocks):
        p = f"block{b}"
        weights[f"{p}.attn_qk.weight"] = rng.standard_normal((h + kv, h)) * 0.1
        weights[f"{p}.attn_v.weight"] = rng.standard_normal((kv, h)) * 0.1
        for layer in ("attn_out", "mlp_up", "mlp_gate", "mlp_down"):
            spec = cfg.layers[layer]
            name = f"{p}.{layer}"
            if spec.tt is not None and b < cfg.n_compressed_blocks:
                w = rng.standard_normal((spec.out_dim, spec.in_dim)) * 0.1
                tt = tt_svd(w, TTConfig(spec.tt.n_factors, spec.tt.m_factors,
                                        max_rank=spec.tt.rank))
                weights[name + ".tt"] = tt
                weights[name + ".qcores"] = compress.quantize_cores(tt)
                if dense_twin:
                    weights[name + ".weight"] = compress.reconstruct(tt)
            else:
                weights[name + ".weight"] = rng.standard_normal(
                    (spec.out_dim, spec.in_dim)) * 0.1
    weights["output.head.weight"] = rng.standard_normal((vocab, h)) * 0.1
    return weights


class TestGraphShape:
    def test_op_counts(self):
        assert len(build_graph(get_preset("chatglm3-6b")).nodes) == 28 * 14 + 2
        assert len(build_graph(get_preset("llama2-7b")).nodes) == 32 * 14 + 2
        assert len(build_graph(get_preset("chatglm3-6b-toy")).nodes) == 16

    def test_block_label_sequence(self):
        seq = build_graph(get_preset("chatglm3-6b-toy")).op_sequence()
        assert seq == BLOCK_LABELS + OUTPUT_LABELS

    def test_uncompressed_blocks_use_plain_linears(self):
        g = build_graph(get_preset("chatglm3-6b"))
        labels = g.op_sequence()
        first = labels[:14]
        last = labels[14 * 27: 14 * 28]
        assert "TTDLinear-BNRes" in first
        assert all(not l.startswith("TTDLinear") for l in last)
        assert last == [l.replace("TTDLinear", "Linear") for l in first]

    def test_fuse_unfused_reproduces_fused(self):
        cfg = get_preset("llama2-7b-toy")
        fused = build_graph(cfg)
        refused = fuse(build_graph(cfg, fused=False))
        assert refused.op_sequence() == fused.op_sequence()
        for a, b in zip(refused.nodes, fused.nodes):
            assert (a.kind, a.role, a.fused) == (b.kind, b.role, b.fused)

    def test_fuse_idempotent(self):
        g = fuse(build_graph(get_preset("chatglm3-6b-toy"), fused=False))
        assert fuse(g).op_sequence() == g.op_sequence()

    def test_fuse_rejects_orphan_helper(self):
        g = build_graph(get_preset("chatglm3-6b-toy"), fused=False)
        helper = next(n for n in g.nodes if n.role == "bn")
        bad = compiler.OperatorGraph([helper], g.model)
        with pytest.raises(FusionError):
            fuse(bad)


class TestInstructions:
    def test_jsonl_roundtrip(self):
        stream = emit_instructions(build_graph(get_preset("chatglm3-6b-toy")))
        back = InstructionStream.from_jsonl(stream.to_jsonl())
        assert back.op_sequence() == stream.op_sequence()
        assert [i.in_addrs for i in back.instructions] == \
            [i.in_addrs for i in stream.instructions]

    def test_deterministic(self):
        g = build_graph(get_preset("llama2-7b-toy"))
        assert emit_instructions(g).to_jsonl() == emit_instructions(g).to_jsonl()

    def test_residual_aliases_block_input(self):
        stream = emit_instructions(build_graph(get_preset("chatglm3-6b-toy")))
        instr = next(i for i in stream.instructions if i.name == "block0.attn_out")
        emb = next(i for i in stream.instructions if i.name == "block0.attn_ln")
        # second input is the residual source: the block input buffer
        assert len(instr.in_addrs) == 2
        assert instr.in_addrs[1] == emb.in_addrs[0]

    def test_addresses_recycled(self):
        graph = build_graph(get_preset("chatglm3-6b"))
        stream = emit_instructions(graph)
        peak = max(max(i.out_addrs, default=0) for i in stream.instructions)
        # liveness-based reuse keeps the address space far below the
        # no-reuse total of all buffer sizes
        no_reuse = sum(compiler._buffer_sizes(graph, 1).values())
        assert peak < no_reuse / 10


class TestFunctionalExecution:
    def test_tt_matches_dense_twin(self, rng):
        cfg = get_preset("chatglm3-6b-toy")
        weights = _toy_weights(cfg, rng)
        dense_cfg = get_preset("chatglm3-6b-toy")
        dense_cfg.n_compressed_blocks = 0
        tokens = [3, 17, 42]
        out_tt = functional_execute(build_graph(cfg), weights, tokens)
        out_dense = functional_execute(build_graph(dense_cfg), weights, tokens)
        diff = np.max(np.abs(out_tt["logits"] - out_dense["logits"]))
        assert diff < 1e-10 * max(1.0, np.max(np.abs(out_dense["logits"])))

    def test_fused_equals_unfused(self, rng):
        cfg = get_preset("llama2-7b-toy")
        weights = _toy_weights(cfg, rng)
        tokens = [1, 2]
        a = functional_execute(build_graph(cfg), weights, tokens)
        b = functional_execute(build_graph(cfg, fused=False), weights, tokens)
        assert np.array_equal(a["logits"], b["logits"])

    def test_quantized_route_runs(self, rng):
        cfg = get_preset("chatglm3-6b-toy")
        weights = _toy_weights(cfg, rng)
        out = functional_execute(build_graph(cfg), weights, [5], quant=True)
        assert np.all(np.isfinite(out["logits"]))
        assert out["argmax"].shape == (1,)

    def test_full_scale_rejected(self, rng):
        cfg = get_preset("chatglm3-6b")
        with pytest.raises(Exception):
            functional_execute(build_graph(cfg), {}, [0])


class TestLatency:
    def test_chatglm_first_token(self):
        cfg = get_preset("chatglm3-6b")
        stream = emit_instructions(build_graph(cfg))
        est = estimate_latency(stream, get_latency_table(cfg.name), cfg)
        assert est["first_token_ms"] == pytest.approx(14.34, rel=0.01)
        assert est["reference_unreconciled"] is False

    def test_llama_flagged_unreconciled(self):
        cfg = get_preset("llama2-7b")
        stream = emit_instructions(build_graph(cfg))
        est = estimate_latency(stream, get_latency_table(cfg.name), cfg)
        assert est["reference_unreconciled"] is True
        assert est["published_first_token_ms"] == 15.20

    def test_decode_scales_attention(self):
        cfg = get_preset("chatglm3-6b")
        stream = emit_instructions(build_graph(cfg))
        table = get_latency_table(cfg.name)
        one = estimate_latency(stream, table, cfg, decode_tokens=1)
        many = estimate_latency(stream, table, cfg, decode_tokens=64)
        assert many["decode_step_ms"] > one["decode_step_ms"]
        assert many["first_token_ms"] == one["first_token_ms"]
        assert one["tokens_per_s"] == pytest.approx(
            1000.0 / one["decode_step_ms"])

    def test_missing_table_entry(self):
        cfg = get_preset("chatglm3-6b")
        stream = emit_instructions(build_graph(cfg))
        table = get_latency_table(cfg.name)
        table.pop("softmax")
        with pytest.raises(ValueError):
            estimate_latency(stream, table, cfg)


class TestPresets:
    def test_block_compression_ratios(self):
        assert get_preset("chatglm3-6b").block_compression_ratio() == \
            pytest.approx(10.72, abs=0.01)
        assert get_preset("llama2-7b").block_compression_ratio() == \
            pytest.approx(4.01, abs=0.01)

    def test_config_json_roundtrip(self):
        cfg = get_preset("llama2-7b")
        import json
        back = presets.ModelConfig.from_dict(json.loads(cfg.to_json()))
        assert back == cfg

    def test_unknown_preset(self):
        with pytest.raises(KeyError):
            get_preset("gpt-oss")
