"""Quantity mentions, unit normalization and numerical-condition semantics.

This module is the labeling oracle used to build training data and
supervise the auxiliary losses. Retrieval at query time never calls it.
"""

import enum
import math
from dataclasses import dataclass
from decimal import Decimal

from .text import parse_number, tokenize_with_offsets

UNIT_TABLE_VERSION = 1

# unit_id, dimension, factor to the dimension's base unit, surface forms
DEFAULT_UNITS_TSV = """\
# unit-table v1
B\tstorage\t1\tb,bytes,byte
KB\tstorage\t1e3\tkb,kilobytes,kilobyte
MB\tstorage\t1e6\tmb,megabytes,megabyte
GB\tstorage\t1e9\tgb,gigabytes,gigabyte
TB\tstorage\t1e12\ttb,terabytes,terabyte
PB\tstorage\t1e15\tpb,petabytes,petabyte
BPS\tdata_rate\t1\tbps,bits per second
KBPS\tdata_rate\t1e3\tkbps,kbit/s
MBPS\tdata_rate\t1e6\tmbps,megabits per second
GBPS\tdata_rate\t1e9\tgbps,gigabits per second
USD\tcurrency\t1\tusd,dollars,dollar,us dollars,$
UG\tmass\t1e-6\tug,mcg,micrograms,microgram
MG\tmass\t1e-3\tmg,milligrams,milligram
G\tmass\t1\tg,grams,gram
KG\tmass\t1e3\tkg,kilograms,kilogram
TONNE\tmass\t1e6\ttonnes,tonne,metric tons
PA\tpressure\t1\tpa,pascals,pascal
KPA\tpressure\t1e3\tkpa,kilopascals
MMHG\tpressure\t133.322387415\tmmhg,millimeters of mercury
BAR\tpressure\t1e5\tbar,bars
PERCENT\tpercent\t1\t%,percent,per cent
MM\tlength\t1e-3\tmm,millimeters,millimetres
CM\tlength\t1e-2\tcm,centimeters,centimetres
M\tlength\t1\tm,meters,metres,meter
KM\tlength\t1e3\tkm,kilometers,kilometres
ML\tvolume\t1e-3\tml,milliliters,millilitres
L\tvolume\t1\tliters,litres,liter
MIN\ttime\t60\tminutes,minute,min
H\ttime\t3600\thours,hour,hrs
DAY\ttime\t86400\tdays,day
"""

MULTIPLIERS = {
    "thousand": Decimal(10) ** 3,
    "million": Decimal(10) ** 6,
    "billion": Decimal(10) ** 9,
    "trillion": Decimal(10) ** 12,
}

# Only currency symbols/codes may precede the number ("$5", "USD 5").
PREFIX_UNIT_SURFACES = {"$", "usd"}


class Cmp(enum.Enum):
    EQ = "EQ"
    LT = "LT"
    GT = "GT"


@dataclass(frozen=True)
class Unit:
    unit_id: str
    dimension: str
    factor: float
    surfaces: tuple


class UnitTable:
    """Closed table of units, each in exactly one dimension.

    Serialized as one ``unit_id<TAB>dimension<TAB>factor<TAB>s1,s2,...``
    line per unit, preceded by a ``# unit-table v<N>`` header.
    """

    def __init__(self, units, version=UNIT_TABLE_VERSION):
        self.version = version
        self.units = {}
        self._surface_index = {}
        for unit in units:
            if unit.unit_id in self.units:
                raise ValueError(f"duplicate unit id {unit.unit_id!r}")
            if not (math.isfinite(unit.factor) and unit.factor > 0):
                raise ValueError(f"unit {unit.unit_id!r} needs a positive finite factor")
            self.units[unit.unit_id] = unit
            for surface in unit.surfaces:
                key = tuple(tok for tok, _, _ in tokenize_with_offsets(surface))
                if not key:
                    continue
                if key in self._surface_index:
                    raise ValueError(f"surface form {surface!r} is ambiguous")
                self._surface_index[key] = unit.unit_id
        self.max_surface_len = max((len(k) for k in self._surface_index), default=0)

    @classmethod
    def from_text(cls, text):
        version = None
        units = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                head = line[1:].split()
                if len(head) == 2 and head[0] == "unit-table" and head[1].startswith("v"):
                    version = int(head[1][1:])
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise ValueError(f"line {lineno}: expected 4 tab-separated fields")
            uid, dim, factor, surfaces = fields
            units.append(Unit(uid, dim, float(factor), tuple(s.strip() for s in surfaces.split(","))))
        if version is None:
            raise ValueError("missing '# unit-table vN' header")
        return cls(units, version=version)

    def to_text(self):
        lines = [f"# unit-table v{self.version}"]
        for u in self.units.values():
            lines.append(f"{u.unit_id}\t{u.dimension}\t{u.factor!r}\t{','.join(u.surfaces)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    def __contains__(self, unit_id):
        return unit_id in self.units

    def __getitem__(self, unit_id):
        return self.units[unit_id]

    def ids(self):
        return list(self.units)

    @property
    def dimensions(self):
        return sorted({u.dimension for u in self.units.values()})

    def lookup_surface(self, tokens):
        """Unit id for an exact token sequence, or ``None``."""
        return self._surface_index.get(tuple(tokens))

    def match_unit(self, tokens, start):
        """Longest unit surface starting at ``tokens[start]``.

        Returns ``(unit_id, n_tokens)`` or ``(None, 0)``.
        """
        for n in range(min(self.max_surface_len, len(tokens) - start), 0, -1):
            uid = self._surface_index.get(tuple(tokens[start:start + n]))
            if uid is not None:
                return uid, n
        return None, 0

    def surfaces_of(self, unit_id):
        return self.units[unit_id].surfaces

    def same_dimension(self, a, b):
        return self.units[a].dimension == self.units[b].dimension


DEFAULT_UNITS = UnitTable.from_text(DEFAULT_UNITS_TSV)


@dataclass(frozen=True)
class Quantity:
    value: float
    unit: str | None = None
    span: tuple = (0, 0)  # token index range [start, end)

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError("quantity value must be finite")


@dataclass(frozen=True)
class NumericalCondition:
    value: float
    cmp: Cmp
    unit: str | None = None

    def __post_init__(self):
        if not isinstance(self.cmp, Cmp):
            object.__setattr__(self, "cmp", Cmp(self.cmp))


@dataclass(frozen=True)
class ScientificForm:
    sign: int
    mantissa: float
    exponent: int

    @property
    def value(self):
        if self.mantissa == 0:
            return 0.0
        return float(self.sign * Decimal(self.mantissa).scaleb(self.exponent))


def _to_float(value):
    out = float(value)
    return out if math.isfinite(out) else None


def parse_quantities(text, table=DEFAULT_UNITS):
    """All quantity mentions in ``text``, left to right.

    A mention is ``[prefix-currency] NUMBER [multiplier] [unit]``; units use
    longest match against the table's surface forms. Spans index tokens.
    """
    tokens = [tok for tok, _, _ in tokenize_with_offsets(text)]
    out = []
    consumed_until = 0
    i = 0
    while i < len(tokens):
        number = parse_number(tokens[i])
        if number is None:
            i += 1
            continue
        start, j = i, i + 1
        if j < len(tokens) and tokens[j] in MULTIPLIERS:
            number *= MULTIPLIERS[tokens[j]]
            j += 1
        unit, n = table.match_unit(tokens, j)
        j += n
        if unit is None and i - 1 >= consumed_until and tokens[i - 1] in PREFIX_UNIT_SURFACES:
            unit = table.lookup_surface([tokens[i - 1]])
            if unit is not None:
                start = i - 1
        value = _to_float(number)
        if value is not None:
            out.append(Quantity(value, unit, (start, j)))
        consumed_until = j
        i = j
    return out


GT_KEYWORDS = (("over",), ("above",), ("more", "than"), ("greater",), ("at", "least"))
LT_KEYWORDS = (("under",), ("below",), ("less", "than"), ("at", "most"))
EQ_KEYWORDS = (("exactly",), ("equal",), ("of",))
_KEYWORDS = [(kw, Cmp.GT) for kw in GT_KEYWORDS] + [(kw, Cmp.LT) for kw in LT_KEYWORDS] + [
    (kw, Cmp.EQ) for kw in EQ_KEYWORDS
]


def find_operator_keywords(tokens):
    """``[(start, end, cmp), ...]`` for every operator keyword occurrence."""
    hits = []
    i = 0
    while i < len(tokens):
        for kw, cmp in _KEYWORDS:
            if tuple(tokens[i:i + len(kw)]) == kw:
                hits.append((i, i + len(kw), cmp))
                i += len(kw) - 1
                break
        i += 1
    return hits


def parse_condition(query_text, table=DEFAULT_UNITS):
    """The query's numerical condition, or ``None`` without a quantity.

    The operator keyword closest to a quantity mention decides the
    comparison; without any keyword the condition is an equality.
    """
    quantities = parse_quantities(query_text, table)
    if not quantities:
        return None
    tokens = [tok for tok, _, _ in tokenize_with_offsets(query_text)]
    best = None
    for kstart, kend, cmp in find_operator_keywords(tokens):
        for q in quantities:
            if kend <= q.span[0]:
                dist = q.span[0] - kend
            elif kstart >= q.span[1]:
                dist = kstart - q.span[1] + 1  # keyword after the mention ranks behind
            else:
                continue
            key = (dist, cmp is Cmp.EQ, kstart)
            if best is None or key < best[0]:
                best = (key, q, cmp)
    if best is None:
        q = quantities[0]
        return NumericalCondition(q.value, Cmp.EQ, q.unit)
    _, q, cmp = best
    return NumericalCondition(q.value, cmp, q.unit)


def convert(q, target, table=DEFAULT_UNITS):
    """``q`` expressed in ``target`` units, or ``None`` when incompatible."""
    if q.unit is None:
        raise ValueError("cannot convert a quantity without a unit")
    src, dst = table[q.unit], table[target]
    if src.dimension != dst.dimension:
        return None
    if src.unit_id == dst.unit_id:
        return Quantity(q.value, target, q.span)
    return Quantity(q.value * src.factor / dst.factor, target, q.span)


def units_compatible(a, b, table=DEFAULT_UNITS):
    """Both absent, or both present in the same dimension."""
    if a is None or b is None:
        return a is None and b is None
    return table.same_dimension(a, b)


def satisfies(doc_q, cond, eq_tolerance=1e-9, table=DEFAULT_UNITS):
    """Whether ``doc_q`` meets ``cond``: ``True``, ``False`` or ``None``.

    ``None`` means incomparable (dimension mismatch, or exactly one side
    without a unit). LT/GT are strict and exclude the equality band.
    """
    if eq_tolerance < 0:
        raise ValueError("eq_tolerance must be non-negative")
    if (doc_q.unit is None) != (cond.unit is None):
        return None
    value = doc_q.value
    if doc_q.unit is not None:
        converted = convert(doc_q, cond.unit, table)
        if converted is None:
            return None
        value = converted.value
    equal = abs(value - cond.value) <= eq_tolerance * max(abs(cond.value), 1.0)
    if cond.cmp is Cmp.EQ:
        return equal
    if equal:
        return False
    if cond.cmp is Cmp.LT:
        return value < cond.value
    return value > cond.value


def to_scientific(value):
    """Sign, mantissa in [1, 10) and integer exponent; 0 maps to (+1, 0, 0)."""
    if not math.isfinite(value):
        raise ValueError("value must be finite")
    if value == 0:
        return ScientificForm(1, 0.0, 0)
    sign = -1 if value < 0 else 1
    exact = abs(Decimal(value))
    exponent = exact.adjusted()
    mantissa = float(exact.scaleb(-exponent))
    if mantissa >= 10.0:
        mantissa /= 10.0
        exponent += 1
    return ScientificForm(sign, mantissa, exponent)
