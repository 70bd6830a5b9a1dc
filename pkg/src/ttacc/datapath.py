"""Bit-exact model of the accelerator's FP16 x INT4 arithmetic.

The vector PE pipeline: FP16 operands are split into fields, the
{sign, hidden bit, mantissa} group becomes a 12-bit two's complement
integer, products against INT4 weights go through a shared wide
multiplier (two weights packed per DSP), products are aligned to the
maximum lane exponent by arithmetic right shifts, summed in a balanced
adder tree, and finally scaled and rounded once to FP16.

All functions are pure and accept scalars or numpy integer arrays where
noted, so exhaustive verification stays cheap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError

FP16_MAX = 65504.0
# exponent bias 15 plus the 10 fractional mantissa bits
_RESULT_EXP_OFFSET = 25
_SHIFT_SATURATE = 31
_ACC_LIMIT = 1 << 31  # modeled accumulator width: 32-bit signed


def fp16_fields(bits):
    """Split FP16 bit patterns into (sign, exponent, mantissa) fields."""
    b = np.asarray(bits, dtype=np.int64)
    return (b >> 15) & 1, (b >> 10) & 0x1F, b & 0x3FF


def fp16_decode(bits) -> float:
    """Exact value of one finite FP16 bit pattern. NaN/Inf are rejected."""
    sign, exp, mant = fp16_fields(int(bits))
    if exp == 31:
        raise NumericError(f"non-finite fp16 pattern 0x{int(bits):04x}")
    if exp == 0:
        value = mant * 2.0 ** -24
    else:
        value = (1024 + mant) * 2.0 ** (int(exp) - 25)
    return -value if sign else value


def fp16_encode(value: float) -> tuple[int, bool]:
    """Round a finite real to FP16 bits (round-to-nearest-even).

    Out-of-range magnitudes clamp to +/-FP16_MAX; the second element
    reports whether clamping happened.
    """
    if np.isnan(value):
        raise NumericError("cannot encode NaN")
    with np.errstate(over="ignore"):
        f16 = np.float16(value)
    clamped = bool(np.isinf(f16)) and np.isfinite(value)
    if clamped or np.isinf(value):
        f16 = np.float16(np.copysign(FP16_MAX, value))
        clamped = True
    return int(np.asarray(f16).view(np.uint16)), clamped


def fp16_bits_from_floats(values) -> np.ndarray:
    """Vectorized encode with clamping; returns uint16 bit patterns."""
    v = np.asarray(values, dtype=np.float64)
    if np.isnan(v).any():
        raise NumericError("cannot encode NaN")
    with np.errstate(over="ignore"):
        f16 = v.astype(np.float16)
    over = np.isinf(f16)
    if over.any():
        f16 = np.where(over, np.copysign(np.float16(FP16_MAX), v).astype(np.float16), f16)
    return f16.view(np.uint16)


def fp16_snap(values) -> np.ndarray:
    """Round floats to their nearest FP16 values, returned as float64."""
    bits = fp16_bits_from_floats(values)
    return bits.view(np.float16).astype(np.float64)


def to_mant12(bits):
    """12-bit two's complement of {sign, hidden bit, mantissa} plus exponent.

    Normal numbers: magnitude = 1024 + mantissa. Subnormals keep the
    hidden bit clear and use an effective exponent of 1, which makes
    their weighting continuous with the normals. Works elementwise on
    arrays.
    """
    sign, exp, mant = fp16_fields(bits)
    if np.any(exp == 31):
        raise NumericError("non-finite fp16 input")
    normal = exp > 0
    magnitude = np.where(normal, 1024 + mant, mant)
    value = np.where(sign == 1, -magnitude, magnitude)
    eff_exp = np.where(normal, exp, 1)
    if np.isscalar(bits) or np.asarray(bits).ndim == 0:
        return int(value), int(eff_exp)
    return value, eff_exp


@dataclass(frozen=True)
class PackedWeightPair:
    """Two INT4 weights packed into one 27-bit multiplier operand.

    The high weight sits 16 bits up; the low weight is sign-extended
    into the full low field, so the packed operand is simply
    ``w_hi * 2**16 + w_lo`` and the borrow it introduces is undone when
    the high product is extracted.
    """

    w_hi: int
    w_lo: int

    def __post_init__(self):
        for w in (self.w_hi, self.w_lo):
            if not -8 <= w <= 7:
                raise ValueError(f"int4 weight {w} out of range [-8, 7]")

    @property
    def packed(self) -> int:
        return (self.w_hi << 16) + self.w_lo

    @classmethod
    def unpack(cls, packed: int) -> "PackedWeightPair":
        w_lo = ((packed & 0xF) ^ 0x8) - 0x8
        w_hi = (packed - w_lo) >> 16
        return cls(w_hi, w_lo)


def packed_dsp_multiply(m, w_hi, w_lo):
    """One wide multiply yielding two exact 16-bit products.

    Computes ``m * (w_hi * 2**16 + w_lo)`` and splits the result:
    the low 16 bits are the low product; bits [31:16] need a +1
    correction whenever the low product is negative (its sign extension
    borrows from the high field). Accepts scalars or int arrays.
    """
    m = np.asarray(m, dtype=np.int64) if not np.isscalar(m) else m
    packed = (np.asarray(w_hi, dtype=np.int64) if not np.isscalar(w_hi) else w_hi) * (1 << 16)
    packed = packed + (np.asarray(w_lo, dtype=np.int64) if not np.isscalar(w_lo) else w_lo)
    wide = m * packed
    lo = wide & 0xFFFF
    lo = lo - ((lo & 0x8000) << 1)
    hi = (wide >> 16) & 0xFFFF
    hi = hi - ((hi & 0x8000) << 1)
    hi = hi + (lo < 0)
    if np.isscalar(wide):
        return int(hi), int(lo)
    return hi, lo


def adder_tree_reduce(values) -> int:
    """Balanced pairwise reduction, zero-padded to a power of two.

    Each level grows the word one bit; partials are checked against the
    modeled 32-bit accumulator and overflow is a hard failure (it would
    mean a mis-sized datapath, not a rounding event).
    """
    a = np.asarray(values, dtype=np.int64).reshape(-1)
    if a.size == 0:
        return 0
    width = 1
    while width < a.size:
        width *= 2
    a = np.concatenate([a, np.zeros(width - a.size, dtype=np.int64)])
    while a.size > 1:
        a = a.reshape(-1, 2).sum(axis=1)
        if np.abs(a).max() >= _ACC_LIMIT:
            raise NumericError("adder tree overflow: modeled accumulator exceeded")
    return int(a[0])


def pe_accumulate(features, weights, scale: float = 1.0) -> float:
    """Vector PE pipeline up to (but excluding) the final FP16 rounding.

    features: FP16-representable reals (snapped on entry), one per lane.
    weights: INT4 integers in [-8, 7], one per lane.
    """
    feats = np.asarray(features, dtype=np.float64).reshape(-1)
    w = np.asarray(weights, dtype=np.int64).reshape(-1)
    if feats.size != w.size:
        raise ValueError(f"lane count mismatch: {feats.size} features, {w.size} weights")
    if feats.size == 0:
        return 0.0
    if w.size and (w.min() < -8 or w.max() > 7):
        raise ValueError("weights out of int4 range [-8, 7]")

    bits = fp16_bits_from_floats(feats)
    mant, exp = to_mant12(bits)
    # In hardware each DSP carries one mantissa against the weights of
    # two adjacent output channels; within one dot product that leaves a
    # single live product per lane, taken from the high field.
    prod, _ = packed_dsp_multiply(mant, w, w)
    e_max = int(np.max(exp))
    shift = e_max - exp
    aligned = np.where(shift > _SHIFT_SATURATE, 0, prod >> np.minimum(shift, _SHIFT_SATURATE))
    acc = adder_tree_reduce(aligned)
    return float(acc) * 2.0 ** (e_max - _RESULT_EXP_OFFSET) * float(scale)


def pe_dot_product(features, weights, scale: float = 1.0) -> float:
    """Full PE result: the accumulated value rounded once to FP16.

    Results beyond the FP16 range clamp to +/-FP16_MAX, matching the
    encoder's saturation behavior.
    """
    return float(fp16_snap(pe_accumulate(features, weights, scale)))
