"""Fixed-point bitstring formats and dyadic interval geometry.

A format carries an optional sign bit, ``I`` integer bits and ``F`` fraction
bits.  Its representable range is the half-open interval ``[lo, hi)`` tiled
by ``2**B`` cells of width ``2**-F``.  Bitstrings are read most-significant
bit first, so a length-``j`` prefix names one depth-``j`` dyadic
sub-interval of the range; a full-length bitstring names one cell, whose
lower endpoint is the value it decodes to.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

Bits = tuple[int, ...]

_FORMAT_RE = re.compile(r"^([su])(\d+)i(\d+)f$")

# Exactness bound: every decode/cell endpoint is an integer multiple of the
# resolution, representable without rounding as long as B <= 53.
_MAX_TOTAL_BITS = 53


def parse_bits(text: str) -> Bits:
    """Turn a string like ``"010"`` into a bit tuple."""
    if not text or any(ch not in "01" for ch in text):
        raise ValueError(f"not a bitstring: {text!r}")
    return tuple(int(ch) for ch in text)


def bits_to_str(bits: Bits) -> str:
    return "".join(str(b) for b in bits)


def bits_to_index(bits: Bits) -> int:
    """Big-endian integer value of a bit sequence (empty -> 0)."""
    k = 0
    for b in bits:
        if b not in (0, 1):
            raise ValueError(f"bit values must be 0 or 1, got {b!r}")
        k = (k << 1) | b
    return k


def index_to_bits(k: int, length: int) -> Bits:
    if not 0 <= k < (1 << length):
        raise ValueError(f"index {k} does not fit in {length} bits")
    return tuple((k >> (length - 1 - i)) & 1 for i in range(length))


@dataclass(frozen=True)
class FixedPointFormat:
    """Bit budget and interval semantics of one quantized scalar."""

    has_sign: bool
    int_bits: int
    frac_bits: int

    def __post_init__(self) -> None:
        if self.int_bits < 0 or self.frac_bits < 0:
            raise ValueError("bit counts must be non-negative")
        if self.frac_bits > 52:
            raise ValueError("formats wider than 52 fraction bits are unsupported")
        if self.total_bits < 1:
            raise ValueError("format needs at least one bit")
        if self.total_bits > _MAX_TOTAL_BITS:
            raise ValueError(f"total bits must be <= {_MAX_TOTAL_BITS}")

    @property
    def total_bits(self) -> int:
        return int(self.has_sign) + self.int_bits + self.frac_bits

    @property
    def lo(self) -> float:
        return -math.ldexp(1.0, self.int_bits) if self.has_sign else 0.0

    @property
    def hi(self) -> float:
        return math.ldexp(1.0, self.int_bits)

    @property
    def resolution(self) -> float:
        """Cell width ``2**-F``."""
        return math.ldexp(1.0, -self.frac_bits)

    @property
    def n_cells(self) -> int:
        return 1 << self.total_bits

    @classmethod
    def from_string(cls, text: str) -> "FixedPointFormat":
        """Parse ``"s2i7f"`` (signed) or ``"u1i3f"`` (unsigned)."""
        m = _FORMAT_RE.match(text)
        if m is None:
            raise ValueError(f"bad format string {text!r}, expected e.g. 's2i7f'")
        return cls(has_sign=m.group(1) == "s",
                   int_bits=int(m.group(2)),
                   frac_bits=int(m.group(3)))

    def __str__(self) -> str:
        return f"{'s' if self.has_sign else 'u'}{self.int_bits}i{self.frac_bits}f"

    # Offset of the all-zero cell in units of the resolution: lo/Delta.
    @property
    def _lo_units(self) -> int:
        return -(1 << (self.int_bits + self.frac_bits)) if self.has_sign else 0

    def decode(self, bits: Bits) -> float:
        """Lower endpoint of the cell reached by interval halving.

        ``decode(b) = lo + int(b) * 2**-F``; exact integer arithmetic.
        """
        if len(bits) != self.total_bits:
            raise ValueError(
                f"expected {self.total_bits} bits, got {len(bits)}")
        k = bits_to_index(bits)
        return math.ldexp(k + self._lo_units, -self.frac_bits)

    def decode_sign_magnitude(self, bits: Bits) -> float:
        """Sign-magnitude reading: ``(-1)**sign * sum_i b_i 2**(i-F)``.

        Cross-check helper only.  Sign-magnitude order is not monotone under
        lexicographic bit order, so it cannot index the partition tree; all
        circuit semantics use :meth:`decode`.
        """
        if not self.has_sign:
            raise ValueError("sign-magnitude reading requires a sign bit")
        if len(bits) != self.total_bits:
            raise ValueError(
                f"expected {self.total_bits} bits, got {len(bits)}")
        magnitude = bits_to_index(bits[1:])
        value = math.ldexp(magnitude, -self.frac_bits)
        return -value if bits[0] else value

    def encode(self, x: float) -> Bits:
        """Full-length bitstring of the cell containing ``x``."""
        if not (self.lo <= x < self.hi):
            raise ValueError(
                f"{x!r} is outside the representable range [{self.lo}, {self.hi})")
        k = math.floor(math.ldexp(x - self.lo, self.frac_bits))
        # x within half an ulp of hi can round up to the cell count.
        k = min(k, self.n_cells - 1)
        return index_to_bits(k, self.total_bits)

    def cell(self, prefix: Bits) -> tuple[float, float]:
        """Half-open interval of the depth-``len(prefix)`` node at ``prefix``."""
        j = len(prefix)
        if j > self.total_bits:
            raise ValueError(
                f"prefix of length {j} exceeds total bits {self.total_bits}")
        k = bits_to_index(prefix)
        width = math.ldexp(self.hi - self.lo, -j)
        a = self.lo + k * width
        return a, a + width


def decode(bits: Bits, fmt: FixedPointFormat) -> float:
    return fmt.decode(bits)


def encode(x: float, fmt: FixedPointFormat) -> Bits:
    return fmt.encode(x)


def cell(prefix: Bits, fmt: FixedPointFormat) -> tuple[float, float]:
    return fmt.cell(prefix)
