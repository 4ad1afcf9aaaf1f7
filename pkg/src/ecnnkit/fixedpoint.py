"""Dynamic fixed-point (Q-format) arithmetic.

Every feature, weight and bias in the processor is stored as a narrow
integer code ``k`` interpreted against a per-group Q-format: the real
value is ``k * 2**-n`` where ``n`` is the fractional position of the
last effective bit.  ``Qn`` denotes a signed format, ``UQn`` an
unsigned one; the default storage width is 8 bits.

Example:
    >>> fmt = QFormat(signed=True, frac_bits=3)
    >>> quantize(1.3, fmt)
    QValue(code=10, fmt=Q3)
    >>> quantize(1.3, fmt).value
    1.25

Rounding is half-away-from-zero everywhere, and out-of-range values
saturate at the format limits.  Accumulation happens in full precision
(the worst-case 288-term leaf-module dot product stays far below 31
bits, see ``accumulator_headroom``), so the only lossy steps are the
initial quantization and the final requantization of an accumulator
back to 8 bits.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

# Search range for automatic precision selection.  Negative n trades
# precision for range (steps of 2**|n|), large n does the opposite.
N_MIN = -8
N_MAX = 15

# Worst-case terms of a single leaf-module dot product: 3x3 taps times
# 32 input channels.
LEAF_MACS = 288

_QFORMAT_RE = re.compile(r"^(U?)Q(-?\d+)(?:/w(\d+))?$")


@dataclass(frozen=True)
class QFormat:
    """A fixed-point number format: sign, fractional bits and width."""

    signed: bool
    frac_bits: int
    width: int = 8

    def __post_init__(self) -> None:
        if self.width < 2 or self.width > 16:
            raise ValueError(f"unsupported width {self.width}")

    @property
    def code_min(self) -> int:
        return -(1 << (self.width - 1)) if self.signed else 0

    @property
    def code_max(self) -> int:
        return (1 << (self.width - 1)) - 1 if self.signed else (1 << self.width) - 1

    @property
    def step(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return self.code_min * self.step

    @property
    def max_value(self) -> float:
        return self.code_max * self.step

    @property
    def notation(self) -> str:
        base = f"{'' if self.signed else 'U'}Q{self.frac_bits}"
        return base if self.width == 8 else f"{base}/w{self.width}"

    def __repr__(self) -> str:  # keep reprs short in test output
        return self.notation

    @classmethod
    def parse(cls, text: str) -> "QFormat":
        m = _QFORMAT_RE.match(text.strip())
        if m is None:
            raise ValueError(f"malformed Q-format {text!r}")
        unsigned, n, width = m.groups()
        return cls(signed=not unsigned, frac_bits=int(n), width=int(width) if width else 8)


@dataclass(frozen=True)
class QValue:
    """An integer code paired with the format it is interpreted in."""

    code: int
    fmt: QFormat

    @property
    def value(self) -> float:
        return self.code * self.fmt.step

    @property
    def exact(self) -> Fraction:
        return Fraction(self.code, 1 << self.fmt.frac_bits) if self.fmt.frac_bits >= 0 \
            else Fraction(self.code * (1 << -self.fmt.frac_bits))


@dataclass(frozen=True)
class Accumulator:
    """Full-precision partial sum at a fixed binary scale.

    ``value`` is an exact integer; the real quantity is
    ``value * 2**-scale``.
    """

    value: int
    scale: int


def round_half_away(x: float) -> int:
    """Round to the nearest integer, ties away from zero."""
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def quantize(x: float, fmt: QFormat) -> QValue:
    """Quantize a real value: scale, round half-away, saturate.

    Total over the reals; infinities saturate and NaN maps to code 0.
    """
    if math.isnan(x):
        return QValue(0, fmt)
    if math.isinf(x):
        return QValue(fmt.code_max if x > 0 else fmt.code_min, fmt)
    code = round_half_away(x * 2.0 ** fmt.frac_bits)
    code = min(max(code, fmt.code_min), fmt.code_max)
    return QValue(code, fmt)


def quantize_array(x: np.ndarray, fmt: QFormat) -> np.ndarray:
    """Vectorized ``quantize``; returns an int64 array of codes."""
    y = np.asarray(x, dtype=np.float64) * 2.0 ** fmt.frac_bits
    codes = np.floor(np.abs(y) + 0.5) * np.sign(y)
    codes = np.nan_to_num(codes, nan=0.0, posinf=fmt.code_max, neginf=fmt.code_min)
    return np.clip(codes, fmt.code_min, fmt.code_max).astype(np.int64)


def dequantize_array(codes: np.ndarray, fmt: QFormat) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) * fmt.step


def quantization_error(values: np.ndarray, fmt: QFormat, norm: str) -> float:
    """Total reconstruction error of ``values`` under ``fmt``."""
    err = np.abs(np.asarray(values, dtype=np.float64) - dequantize_array(quantize_array(values, fmt), fmt))
    if norm == "l1":
        return float(err.sum())
    if norm == "l2":
        return float((err * err).sum())
    raise ValueError(f"unknown norm {norm!r}")


def select_precision(values: Iterable[float], norm: str = "l2", signed: bool = True,
                     width: int = 8) -> QFormat:
    """Pick the fractional position minimizing total quantization error.

    Scans n over [N_MIN, N_MAX] and returns the format whose total
    |x - Q_n(x)|**l error is smallest (l=1 for "l1", l=2 for "l2").
    Ties keep the largest n, i.e. the finest step that is still
    optimal: a value set that is exactly representable at several
    scales lands on the most precise of them.
    """
    vals = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                      dtype=np.float64)
    if vals.size == 0:
        raise ValueError("select_precision needs at least one value")
    best_n, best_err = None, None
    for n in range(N_MIN, N_MAX + 1):
        fmt = QFormat(signed=signed, frac_bits=n, width=width)
        err = quantization_error(vals, fmt, norm)
        if best_err is None or err <= best_err:
            best_n, best_err = n, err
    return QFormat(signed=signed, frac_bits=best_n, width=width)


def accumulate_mac(acc: Accumulator, a: QValue, w: QValue) -> Accumulator:
    """Multiply-accumulate one pair of codes into a full-precision sum.

    The product of two codes lives at scale ``a.n + w.n``; the existing
    accumulator must already be at that scale (or be empty at any
    scale, in which case it adopts it).
    """
    scale = a.fmt.frac_bits + w.fmt.frac_bits
    if acc.value != 0 and acc.scale != scale:
        raise ValueError(f"accumulator scale {acc.scale} != product scale {scale}")
    return Accumulator(acc.value + a.code * w.code, scale)


def accumulator_headroom() -> int:
    """Worst-case magnitude of a leaf-module accumulation in bits."""
    worst = LEAF_MACS * 128 * 128  # |code| <= 128 for signed 8-bit operands
    return worst.bit_length()


def shift_round_half_away(v: int, d: int) -> int:
    """Exact ``v * 2**-d`` rounded half away from zero (d may be negative)."""
    if d <= 0:
        return v << -d
    offset = 1 << (d - 1)
    if v >= 0:
        return (v + offset) >> d
    return -((-v + offset) >> d)


def shift_round_half_away_array(v: np.ndarray, d: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.int64)
    if d <= 0:
        return v << np.int64(-d)
    offset = np.int64(1) << np.int64(d - 1)
    mag = (np.abs(v) + offset) >> np.int64(d)
    return np.where(v >= 0, mag, -mag)


def align_bias(bias: QValue, scale: int) -> int:
    """Left-shift a bias code to an accumulator scale.

    The engine only has a left shifter on the bias path, so the bias
    format must not be finer than the accumulator scale.
    """
    shift = scale - bias.fmt.frac_bits
    if shift < 0:
        raise ValueError(
            f"bias format {bias.fmt} finer than accumulator scale {scale}; "
            "the compiler must choose bias formats that avoid a right shift")
    return bias.code << shift


def requantize(acc: Accumulator, bias: QValue | None, fmt: QFormat) -> QValue:
    """Fold a bias into an accumulator and narrow the result to ``fmt``.

    The narrowing shift rounds half away from zero on the exact
    integer, so the result is identical to quantizing the exact
    rational value of the accumulator.
    """
    total = acc.value + (align_bias(bias, acc.scale) if bias is not None else 0)
    code = shift_round_half_away(total, acc.scale - fmt.frac_bits)
    code = min(max(code, fmt.code_min), fmt.code_max)
    return QValue(code, fmt)


def requantize_array(acc: np.ndarray, scale: int, fmt: QFormat) -> np.ndarray:
    """Vectorized ``requantize`` for an int64 accumulator plane."""
    codes = shift_round_half_away_array(acc, scale - fmt.frac_bits)
    return np.clip(codes, fmt.code_min, fmt.code_max)


def pack_format(fmt: QFormat) -> int:
    """6-bit wire encoding used by the binary program format."""
    if not (N_MIN <= fmt.frac_bits <= N_MAX + 8):
        raise ValueError(f"frac_bits {fmt.frac_bits} not encodable")
    return ((1 if fmt.signed else 0) << 5) | (fmt.frac_bits - N_MIN)


def unpack_format(bits: int, width: int = 8) -> QFormat:
    return QFormat(signed=bool(bits >> 5), frac_bits=(bits & 0x1F) + N_MIN, width=width)
