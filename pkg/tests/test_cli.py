import json

import numpy as np
import pytest

from ttacc import cli, tensor


@pytest.fixture
def workspace(tmp_path):
    rng = np.random.default_rng(0)
    w = rng.standard_normal((64, 64))
    x = rng.standard_normal(64)
    tensor.write_ttdc(tmp_path / "w.ttdc", w, tensor.DTYPE_F64)
    tensor.write_ttdc(tmp_path / "x.ttdc", x, tensor.DTYPE_F64)
    (tmp_path / "cfg.json").write_text(json.dumps(
        {"n_factors": [4, 4, 4], "m_factors": [4, 4, 4], "max_rank": 4}))
    return tmp_path


def _run(argv):
    return cli.main([str(a) for a in argv])


class TestCompress:
    def test_run_and_report(self, workspace, capsys):
        out = workspace / "run"
        assert _run(["compress", "--weights", workspace / "w.ttdc",
                     "--config", workspace / "cfg.json", "--out", out]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["dense_params"] == 4096
        assert report["ranks"] == [1, 4, 4, 1]
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "compress"
        assert (out / "cores" / "core_0.ttdc").exists()
        assert (out / "cores" / "qcore_0.ttdc").exists()

    def test_reproducible(self, workspace):
        a, b = workspace / "a", workspace / "b"
        for out in (a, b):
            assert _run(["--seed", "7", "compress", "--weights", workspace / "w.ttdc",
                         "--config", workspace / "cfg.json", "--out", out]) == 0
        for k in range(3):
            fa = (a / "cores" / f"core_{k}.ttdc").read_bytes()
            fb = (b / "cores" / f"core_{k}.ttdc").read_bytes()
            assert fa == fb

    def test_missing_weights_is_usage_error(self, workspace, capsys):
        rc = _run(["compress", "--weights", workspace / "nope.ttdc",
                   "--config", workspace / "cfg.json", "--out", workspace / "o"])
        assert rc == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "usage/shape"


class TestInfer:
    @pytest.fixture
    def cores(self, workspace):
        out = workspace / "run"
        _run(["compress", "--weights", workspace / "w.ttdc",
              "--config", workspace / "cfg.json", "--out", out])
        return out / "cores"

    @pytest.mark.parametrize("mode", ["naive", "staged", "quant", "dense-recon"])
    def test_modes(self, workspace, cores, mode):
        out = workspace / f"infer-{mode}"
        assert _run(["infer", "--cores", cores, "--input", workspace / "x.ttdc",
                     "--mode", mode, "--out", out]) == 0
        y, code = tensor.read_ttdc(out / "output.ttdc")
        assert y.size == 64 and code == tensor.DTYPE_F64

    def test_staged_equals_naive(self, workspace, cores):
        outs = {}
        for mode in ("naive", "staged"):
            out = workspace / f"eq-{mode}"
            _run(["infer", "--cores", cores, "--input", workspace / "x.ttdc",
                  "--mode", mode, "--out", out])
            outs[mode], _ = tensor.read_ttdc(out / "output.ttdc")
        assert np.allclose(outs["naive"], outs["staged"], atol=1e-9)


class TestSimulate:
    def test_ttd_run(self, workspace):
        out = workspace / "sim"
        assert _run(["simulate", "--config", workspace / "cfg.json",
                     "--out", out, "--trace"]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["reorder_stall_cycles"] == 0
        assert (out / "trace.csv").read_text().count("\n") > 0

    def test_matmul_run(self, workspace):
        out = workspace / "simm"
        assert _run(["simulate", "--matmul", "256x128", "--out", out]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["kind"] == "matmul"

    def test_pe_override(self, workspace):
        out = workspace / "simpe"
        assert _run(["simulate", "--matmul", "64x64", "--pe", "64,16,16,200",
                     "--out", out]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["pe"]["t_in"] == 64

    def test_single_buffer_stalls(self, workspace):
        out = workspace / "simsb"
        assert _run(["simulate", "--config", workspace / "cfg.json",
                     "--single-buffer", "--out", out]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["reorder_stall_cycles"] > 0

    def test_needs_exactly_one_target(self, workspace, capsys):
        assert _run(["simulate", "--out", workspace / "bad"]) == 2
        assert _run(["simulate", "--matmul", "4x4", "--config",
                     workspace / "cfg.json", "--out", workspace / "bad"]) == 2

    def test_invalid_pe_is_numeric_error(self, workspace, capsys):
        rc = _run(["simulate", "--matmul", "4x4", "--pe", "0,32,16,125",
                   "--out", workspace / "bad"])
        assert rc == 3
        assert json.loads(capsys.readouterr().err)["error"] == "numeric"

    def test_capacity_exceeded(self, workspace, capsys):
        rc = _run(["simulate", "--config", workspace / "cfg.json",
                   "--buffer-capacity", "1", "--out", workspace / "bad"])
        assert rc == 4
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "capacity" and err["required"] > 1


class TestCompile:
    def test_preset(self, workspace):
        out = workspace / "comp"
        assert _run(["compile", "--model", "chatglm3-6b", "--out", out]) == 0
        latency = json.loads((out / "latency.json").read_text())
        assert latency["first_token_ms"] == pytest.approx(14.34, rel=0.01)
        lines = (out / "stream.jsonl").read_text().strip().splitlines()
        assert len(lines) == 28 * 14 + 2

    def test_custom_config_file(self, workspace):
        from ttacc.presets import get_preset
        path = workspace / "model.json"
        path.write_text(get_preset("llama2-7b-toy").to_json())
        out = workspace / "compc"
        assert _run(["compile", "--model", path, "--out", out]) == 0
        lines = (out / "stream.jsonl").read_text().strip().splitlines()
        assert len(lines) == 16

    def test_unknown_model(self, workspace, capsys):
        assert _run(["compile", "--model", "nope", "--out", workspace / "x"]) == 2


class TestReport:
    def test_merges_runs(self, workspace, capsys):
        _run(["compress", "--weights", workspace / "w.ttdc",
              "--config", workspace / "cfg.json", "--out", workspace / "r1"])
        _run(["compile", "--model", "chatglm3-6b-toy", "--out", workspace / "r2"])
        capsys.readouterr()
        assert _run(["report", workspace / "r1", workspace / "r2",
                     "--out", workspace / "summary.json"]) == 0
        summary = json.loads((workspace / "summary.json").read_text())
        assert [r["command"] for r in summary["rows"]] == ["compile", "compress"]
        assert "published_cr_references" in summary

    def test_skips_non_runs(self, workspace, capsys):
        (workspace / "empty").mkdir()
        assert _run(["report", workspace / "empty"]) == 0
        assert json.loads(capsys.readouterr().out)["rows"] == []
