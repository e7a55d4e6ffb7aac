import math
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from numgate.quantity import (
    DEFAULT_UNITS,
    Cmp,
    NumericalCondition,
    Quantity,
    ScientificForm,
    UnitTable,
    convert,
    parse_condition,
    parse_quantities,
    satisfies,
    to_scientific,
    units_compatible,
)


def vu(qs):
    return [(q.value, q.unit) for q in qs]


class TestParseQuantities:
    def test_storage_mention(self):
        assert vu(parse_quantities("SSDs with capacity over 500 GB")) == [(500.0, "GB")]

    def test_multiplier_and_suffix_currency(self):
        assert vu(parse_quantities("revenue above 1 billion USD")) == [(1.0e9, "USD")]

    def test_empty(self):
        assert parse_quantities("") == []

    def test_count_and_percent(self):
        # hand-built reference: "20,000" has no unit ("units" is not in the table), "3.5" binds "%"
        qs = parse_quantities("20,000 units at 3.5%")
        assert vu(qs) == [(20000.0, None), (3.5, "PERCENT")]
        assert [q.span for q in qs] == [(0, 1), (3, 5)]

    def test_prefix_dollar(self):
        assert vu(parse_quantities("R&D $1.5 billion")) == [(1.5e9, "USD")]

    def test_scientific_notation(self):
        assert vu(parse_quantities("a mass of 2.5e3 kg")) == [(2500.0, "KG")]

    def test_longest_unit_match(self):
        assert vu(parse_quantities("costs 12 us dollars")) == [(12.0, "USD")]

    def test_multi_word_unit(self):
        assert vu(parse_quantities("rose 4 per cent")) == [(4.0, "PERCENT")]

    def test_deterministic(self):
        text = "storage of 1,000 GB and 3 TB at 120 mmHg"
        assert parse_quantities(text) == parse_quantities(text)

    def test_values_finite(self):
        with pytest.raises(ValueError):
            Quantity(float("nan"), "GB")


class TestParseCondition:
    def test_gt(self):
        assert parse_condition("capacity over 500 GB") == NumericalCondition(500.0, Cmp.GT, "GB")

    def test_eq_keyword(self):
        assert parse_condition("exactly 42 mg") == NumericalCondition(42.0, Cmp.EQ, "MG")

    def test_more_than(self):
        c = parse_condition("blood pressure decreased by more than 20 mmHg")
        assert c == NumericalCondition(20.0, Cmp.GT, "MMHG")

    @pytest.mark.parametrize("kw,cmp", [
        ("above", Cmp.GT), ("greater than", Cmp.GT), ("at least", Cmp.GT),
        ("under", Cmp.LT), ("below", Cmp.LT), ("less than", Cmp.LT), ("at most", Cmp.LT),
        ("equal to", Cmp.EQ),
    ])
    def test_keyword_table(self, kw, cmp):
        assert parse_condition(f"weight {kw} 3 kg").cmp is cmp

    def test_no_keyword_defaults_to_eq(self):
        assert parse_condition("sodium 200 mg").cmp is Cmp.EQ

    def test_no_quantity(self):
        assert parse_condition("revenue above expectations") is None


class TestConvert:
    def test_tb_to_gb(self):
        assert convert(Quantity(1.0, "TB"), "GB") == Quantity(1000.0, "GB")

    def test_identity(self):
        assert convert(Quantity(7.0, "GB"), "GB") == Quantity(7.0, "GB")

    def test_incompatible(self):
        assert convert(Quantity(600.0, "MBPS"), "GB") is None
        assert not units_compatible("MBPS", "GB")

    def test_unitless_requires_unit(self):
        with pytest.raises(ValueError):
            convert(Quantity(3.0), "GB")

    @settings(max_examples=300, deadline=None)
    @given(st.floats(1e-6, 1e9), st.sampled_from(DEFAULT_UNITS.dimensions), st.data())
    def test_round_trip(self, v, dim, data):
        units = [u for u in DEFAULT_UNITS.ids() if DEFAULT_UNITS[u].dimension == dim]
        a, b = data.draw(st.sampled_from(units)), data.draw(st.sampled_from(units))
        back = convert(convert(Quantity(v, a), b), a)
        assert math.isclose(back.value, v, rel_tol=1e-9)


class TestSatisfies:
    def test_reference_cases(self):
        cond = NumericalCondition(500.0, Cmp.GT, "GB")
        assert satisfies(Quantity(1000.0, "GB"), cond) is True
        assert satisfies(Quantity(1.0, "TB"), cond) is True
        assert satisfies(Quantity(256.0, "GB"), cond) is False
        assert satisfies(Quantity(600.0, "MBPS"), cond) is None
        assert satisfies(Quantity(500.0, "GB"), NumericalCondition(500.0, Cmp.EQ, "GB")) is True

    # hand-enumerated: rows are v' relative to v, columns the operator
    TRUTH = {
        ("lt", Cmp.LT): True, ("lt", Cmp.EQ): False, ("lt", Cmp.GT): False,
        ("eq", Cmp.LT): False, ("eq", Cmp.EQ): True, ("eq", Cmp.GT): False,
        ("gt", Cmp.LT): False, ("gt", Cmp.EQ): False, ("gt", Cmp.GT): True,
    }

    @pytest.mark.parametrize("rel,cmp", list(TRUTH))
    def test_truth_table(self, rel, cmp):
        v = {"lt": 40.0, "eq": 50.0, "gt": 60.0}[rel]
        assert satisfies(Quantity(v, "KG"), NumericalCondition(50.0, cmp, "KG")) is self.TRUTH[(rel, cmp)]

    def test_mixed_unit_incomparable(self):
        assert satisfies(Quantity(5.0), NumericalCondition(5.0, Cmp.EQ, "KG")) is None
        assert satisfies(Quantity(5.0, "KG"), NumericalCondition(5.0, Cmp.EQ, None)) is None
        assert satisfies(Quantity(5.0), NumericalCondition(4.0, Cmp.GT, None)) is True

    def test_negative_tolerance(self):
        with pytest.raises(ValueError):
            satisfies(Quantity(1.0), NumericalCondition(1.0, Cmp.EQ, None), -1.0)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
    def test_lt_gt_antisymmetric(self, a, b):
        eq = satisfies(Quantity(a), NumericalCondition(b, Cmp.EQ, None))
        lt = satisfies(Quantity(a), NumericalCondition(b, Cmp.LT, None))
        gt = satisfies(Quantity(a), NumericalCondition(b, Cmp.GT, None))
        assert [eq, lt, gt].count(True) == 1


class TestScientific:
    @pytest.mark.parametrize("v,expected", [
        (1.0e9, (1, 1.0, 9)), (500.0, (1, 5.0, 2)), (-0.042, (-1, 4.2, -2)), (0.0, (1, 0.0, 0)),
    ])
    def test_examples(self, v, expected):
        s = to_scientific(v)
        assert (s.sign, s.exponent) == (expected[0], expected[2])
        assert math.isclose(s.mantissa, expected[1], rel_tol=1e-15)

    @settings(max_examples=500, deadline=None)
    @given(st.floats(allow_nan=False, allow_infinity=False).filter(lambda x: x == 0 or 1e-300 < abs(x) < 1e300))
    def test_round_trip(self, v):
        s = to_scientific(v)
        assert s.value == pytest.approx(v, rel=1e-12, abs=0.0)
        assert s.mantissa == 0.0 if v == 0 else 1.0 <= s.mantissa < 10.0

    def test_value_reconstruction_type(self):
        assert ScientificForm(1, 2.5, 3).value == 2500.0


class TestUnitTable:
    def test_coverage(self):
        assert len(DEFAULT_UNITS.ids()) >= 20
        assert len(DEFAULT_UNITS.dimensions) >= 6

    def test_serialization_round_trip(self, tmp_path):
        path = tmp_path / "units.tsv"
        DEFAULT_UNITS.save(path)
        again = UnitTable.load(path)
        assert again.to_text() == DEFAULT_UNITS.to_text()

    def test_rejects_bad_factor(self):
        with pytest.raises(ValueError):
            UnitTable.from_text("# unit-table v1\nX\tdim\t0\tx\n")

    def test_rejects_duplicate_unit(self):
        with pytest.raises(ValueError):
            UnitTable.from_text("# unit-table v1\nX\tdim\t1\tx\nX\tdim\t2\ty\n")

    def test_mmhg_factor(self):
        assert Decimal(repr(DEFAULT_UNITS["MMHG"].factor)) == Decimal("133.322387415")
