"""Tensor-train compression and systolic-array emulation for LLM linear layers.

Subsystems:
- tensor: tensorization, index maps, TTDC container I/O
- compress: TT-SVD, compression ratios, INT4 core quantization
- infer: naive / staged / quantized TT linear evaluation
- datapath: bit-exact FP16 x INT4 vector PE model
- simulator: cycle-level array model with analytic cross-check
- presets, compiler: benchmark configs, operator graphs, latency estimates
- cli: command-line front end
"""

__version__ = "0.1.0"

from .compress import (
    QuantCore,
    TTConfig,
    TTCores,
    compression_ratio,
    dequantize_cores,
    quantize_cores,
    reconstruct,
    reconstruction_error,
    tt_svd,
    uniform_ranks,
)
from .datapath import PackedWeightPair, packed_dsp_multiply, pe_dot_product
from .errors import CapacityError, FusionError, NumericError, ShapeError
from .infer import (
    dense_linear,
    ttd_linear_naive,
    ttd_linear_quant,
    ttd_linear_staged,
)
from .presets import ModelConfig, get_preset
from .simulator import PEConfig, SimReport, run_matmul, run_ttd_linear

__all__ = [
    "__version__",
    "CapacityError",
    "FusionError",
    "ModelConfig",
    "NumericError",
    "PEConfig",
    "PackedWeightPair",
    "QuantCore",
    "ShapeError",
    "SimReport",
    "TTConfig",
    "TTCores",
    "compression_ratio",
    "dense_linear",
    "dequantize_cores",
    "get_preset",
    "packed_dsp_multiply",
    "pe_dot_product",
    "quantize_cores",
    "reconstruct",
    "reconstruction_error",
    "run_matmul",
    "run_ttd_linear",
    "tt_svd",
    "ttd_linear_naive",
    "ttd_linear_quant",
    "ttd_linear_staged",
    "uniform_ranks",
]
