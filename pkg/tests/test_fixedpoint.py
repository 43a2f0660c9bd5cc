"""Bitstring format semantics: decode/encode/cell geometry."""

import math

import numpy as np
import pytest

from bitvi.fixedpoint import (FixedPointFormat, bits_to_index, cell, decode,
                              encode, index_to_bits, parse_bits)


def random_format(rng, total_bits):
    has_sign = bool(rng.integers(0, 2)) if total_bits > 1 else False
    rest = total_bits - int(has_sign)
    int_bits = int(rng.integers(0, rest + 1))
    return FixedPointFormat(has_sign, int_bits, rest - int_bits)


class TestFormat:
    def test_derived_quantities(self):
        fmt = FixedPointFormat(True, 2, 7)
        assert fmt.total_bits == 10
        assert fmt.lo == -4.0 and fmt.hi == 4.0
        assert fmt.resolution == 2.0 ** -7
        # The range holds exactly 2^B cells of width Delta.
        assert fmt.hi - fmt.lo == fmt.n_cells * fmt.resolution

    def test_unsigned_range_starts_at_zero(self):
        fmt = FixedPointFormat(False, 1, 2)
        assert fmt.lo == 0.0 and fmt.hi == 2.0

    def test_format_string_roundtrip(self):
        for text in ("s2i7f", "u1i3f", "s0i1f", "u0i14f"):
            assert str(FixedPointFormat.from_string(text)) == text

    def test_bad_format_strings(self):
        for text in ("x2i7f", "s2i7", "", "si7f"):
            with pytest.raises(ValueError):
                FixedPointFormat.from_string(text)

    def test_empty_format_rejected(self):
        with pytest.raises(ValueError):
            FixedPointFormat(False, 0, 0)

    def test_wide_fraction_rejected(self):
        with pytest.raises(ValueError):
            FixedPointFormat(False, 0, 53)


class TestDecode:
    def test_paper_example_010(self):
        # 3-bit unsigned with one integer bit: 010 encodes 0.5.
        fmt = FixedPointFormat(False, 1, 2)
        assert decode(parse_bits("010"), fmt) == 0.5

    def test_all_zero_maps_to_lo(self):
        for fmt in (FixedPointFormat(False, 1, 2), FixedPointFormat(True, 3, 4)):
            assert decode((0,) * fmt.total_bits, fmt) == fmt.lo

    def test_sign_magnitude_worked_value(self):
        # phi(b) = (-1)^sign * sum b_i 2^(i-F) on sign|010|0110 gives -2.375.
        fmt = FixedPointFormat(True, 3, 4)
        assert fmt.decode_sign_magnitude(parse_bits("10100110")) == -2.375

    def test_sign_magnitude_positive(self):
        fmt = FixedPointFormat(True, 3, 4)
        assert fmt.decode_sign_magnitude(parse_bits("00100110")) == 2.375

    def test_length_mismatch_rejected(self):
        fmt = FixedPointFormat(False, 1, 2)
        with pytest.raises(ValueError):
            decode((0, 1), fmt)
        with pytest.raises(ValueError):
            fmt.decode_sign_magnitude((0, 1))


class TestEncode:
    def test_inverts_paper_example(self):
        fmt = FixedPointFormat(False, 1, 2)
        assert encode(0.5, fmt) == parse_bits("010")

    def test_lo_is_all_zero(self):
        fmt = FixedPointFormat(True, 2, 3)
        assert encode(fmt.lo, fmt) == (0,) * 6

    def test_cell_membership(self):
        # 0.374999 lies in [0.25, 0.375) of the 3-bit grid over [0, 1).
        fmt = FixedPointFormat(False, 0, 3)
        assert encode(0.374999, fmt) == parse_bits("010")

    def test_out_of_range_rejected(self):
        fmt = FixedPointFormat(False, 1, 2)
        for x in (-0.01, 2.0, 2.5):
            with pytest.raises(ValueError):
                encode(x, fmt)

    def test_roundtrip_on_all_representable_values(self):
        rng = np.random.default_rng(7)
        for total in (1, 3, 6, 10):
            fmt = random_format(rng, total)
            for k in range(fmt.n_cells):
                bits = index_to_bits(k, total)
                assert encode(decode(bits, fmt), fmt) == bits


class TestCell:
    def test_empty_prefix_is_full_range(self):
        fmt = FixedPointFormat(False, 1, 2)
        assert cell((), fmt) == (0.0, 2.0)

    def test_fig4_style_partition(self):
        # On the unit-interval tree, prefix 01 names [1/4, 1/2).
        fmt = FixedPointFormat(False, 0, 3)
        assert cell(parse_bits("01"), fmt) == (0.25, 0.5)
        fmt2 = FixedPointFormat(False, 1, 2)
        assert cell(parse_bits("01"), fmt2) == (0.5, 1.0)

    def test_children_halve_parent(self):
        rng = np.random.default_rng(1)
        fmt = FixedPointFormat(True, 2, 5)
        for _ in range(50):
            j = int(rng.integers(0, fmt.total_bits))
            prefix = tuple(int(b) for b in rng.integers(0, 2, j))
            a, b = cell(prefix, fmt)
            a0, b0 = cell(prefix + (0,), fmt)
            a1, b1 = cell(prefix + (1,), fmt)
            mid = (a + b) / 2
            assert (a0, b0) == (a, mid)
            assert (a1, b1) == (mid, b)

    def test_depth_tiling_is_exact(self):
        # Cells at every depth tile [lo, hi) with no gaps or overlaps.
        fmt = FixedPointFormat(True, 1, 5)
        for j in range(fmt.total_bits + 1):
            edges = [cell(index_to_bits(k, j), fmt) for k in range(1 << j)]
            assert edges[0][0] == fmt.lo
            assert edges[-1][1] == fmt.hi
            for (_, b1), (a2, _) in zip(edges, edges[1:]):
                assert b1 == a2

    def test_overlong_prefix_rejected(self):
        fmt = FixedPointFormat(False, 0, 2)
        with pytest.raises(ValueError):
            cell((0, 1, 0), fmt)


class TestOrdering:
    def test_decode_is_monotone_in_bit_order(self):
        rng = np.random.default_rng(3)
        fmt = random_format(rng, 8)
        values = [decode(index_to_bits(k, 8), fmt) for k in range(256)]
        assert all(v1 < v2 for v1, v2 in zip(values, values[1:]))

    def test_bits_index_roundtrip(self):
        for k in range(64):
            assert bits_to_index(index_to_bits(k, 6)) == k
