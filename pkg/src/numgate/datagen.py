"""Synthetic quantity-conditioned retrieval benchmark.

Sentences instantiate templates with a concept surface form and a
rendered quantity; every sentence carries exactly one quantity mention
whose annotation is re-derived by :func:`parse_quantities`. Queries are
equality / lower-bound / upper-bound conditions per concept-unit pair and
relevance is decided by :func:`satisfies`, so judgments are exact.
"""

import json
import math
from dataclasses import asdict, dataclass, field, replace
from decimal import Decimal

import numpy as np

from .quantity import DEFAULT_UNITS, Cmp, NumericalCondition, parse_condition, parse_quantities, satisfies

PROVENANCES = ("base", "concept_expansion", "unit_permutation", "value_permutation")
AUGMENT_OPS = PROVENANCES[1:]

# name, synonyms, units (first one is the range unit), value range
CONCEPTS = [
    ("storage capacity", ["disk space", "drive capacity"], ["GB", "TB"], (32, 8000)),
    ("memory size", ["ram capacity", "system memory"], ["GB"], (2, 512)),
    ("database size", ["data volume", "dataset footprint"], ["GB", "TB"], (5, 50000)),
    ("video file size", ["clip size", "recording size"], ["MB", "GB"], (20, 9000)),
    ("cloud storage quota", ["online storage allowance", "hosted storage plan"], ["GB", "TB"], (10, 20000)),
    ("download speed", ["download bandwidth", "download rate"], ["MBPS", "GBPS"], (5, 5000)),
    ("upload speed", ["upload bandwidth", "upstream rate"], ["MBPS"], (1, 1000)),
    ("network throughput", ["link throughput", "backbone capacity"], ["GBPS", "MBPS"], (1, 400)),
    ("revenue", ["sales", "turnover"], ["USD"], (2e6, 9e10)),
    ("net profit", ["earnings", "net income"], ["USD"], (1e6, 2e10)),
    ("research spending", ["r&d budget", "research and development expenditure"], ["USD"], (5e5, 9e9)),
    ("market capitalization", ["market cap", "market value"], ["USD"], (5e7, 9e11)),
    ("operating costs", ["operating expenses", "running costs"], ["USD"], (1e6, 5e10)),
    ("total debt", ["borrowings", "outstanding liabilities"], ["USD"], (1e6, 8e10)),
    ("acquisition price", ["purchase price", "deal value"], ["USD"], (1e6, 6e10)),
    ("funding round", ["venture funding", "capital raised"], ["USD"], (2e5, 2e9)),
    ("annual salary", ["yearly pay", "base compensation"], ["USD"], (18000, 900000)),
    ("home price", ["house price", "property value"], ["USD"], (60000, 9000000)),
    ("marketing budget", ["advertising spend", "promotion outlay"], ["USD"], (1e5, 3e9)),
    ("regulatory fine", ["penalty", "settlement amount"], ["USD"], (1e4, 5e9)),
    ("daily dose", ["dosage", "medication dose"], ["MG"], (0.5, 2000)),
    ("body weight", ["patient weight", "bodyweight"], ["KG"], (3, 180)),
    ("protein intake", ["dietary protein", "protein consumption"], ["G"], (10, 300)),
    ("vitamin d supplementation", ["cholecalciferol dose", "vitamin d intake"], ["UG", "MG"], (5, 250)),
    ("sodium intake", ["salt consumption", "dietary sodium"], ["MG", "G"], (500, 9000)),
    ("cargo load", ["freight weight", "shipment mass"], ["TONNE", "KG"], (2, 400000)),
    ("birth weight", ["neonatal weight", "weight at delivery"], ["G", "KG"], (500, 5500)),
    ("systolic blood pressure", ["systolic pressure", "upper pressure reading"], ["MMHG"], (80, 220)),
    ("diastolic blood pressure", ["diastolic pressure", "lower pressure reading"], ["MMHG"], (40, 140)),
    ("intraocular pressure", ["eye pressure", "ocular tension"], ["MMHG"], (6, 60)),
    ("tire pressure", ["tyre pressure", "inflation pressure"], ["KPA", "BAR"], (100, 900)),
    ("interest rate", ["lending rate", "borrowing cost"], ["PERCENT"], (0.1, 25)),
    ("unemployment rate", ["jobless rate", "unemployment level"], ["PERCENT"], (1, 30)),
    ("inflation", ["price growth", "consumer price inflation"], ["PERCENT"], (0.1, 40)),
    ("profit margin", ["operating margin", "net margin"], ["PERCENT"], (0.5, 60)),
    ("ejection fraction", ["lvef", "cardiac output fraction"], ["PERCENT"], (10, 75)),
    ("response rate", ["treatment response", "remission rate"], ["PERCENT"], (2, 95)),
    ("market share", ["share of the market", "sales share"], ["PERCENT"], (0.5, 80)),
    ("vaccination coverage", ["immunization rate", "vaccine uptake"], ["PERCENT"], (5, 99)),
    ("race distance", ["route length", "course length"], ["KM", "M"], (1, 250)),
    ("tumor size", ["lesion diameter", "nodule size"], ["MM", "CM"], (2, 120)),
    ("body height", ["patient height", "stature"], ["CM", "M"], (45, 210)),
    ("fluid intake", ["water consumption", "daily fluids"], ["ML", "L"], (300, 6000)),
    ("blood loss", ["hemorrhage volume", "estimated bleeding"], ["ML"], (20, 3000)),
    ("fuel tank capacity", ["tank volume", "fuel capacity"], ["L"], (20, 1200)),
    ("sleep duration", ["nightly sleep", "time asleep"], ["H", "MIN"], (2, 12)),
    ("hospital stay", ["length of stay", "admission duration"], ["DAY"], (1, 90)),
    ("commute time", ["travel time to work", "daily commute"], ["MIN", "H"], (5, 180)),
    ("battery life", ["battery runtime", "battery endurance"], ["H"], (2, 100)),
    ("warranty period", ["coverage period", "guarantee length"], ["DAY"], (30, 3650)),
]

DOC_TEMPLATES = [
    "{C} reached {q} in the latest quarterly filing.",
    "According to the annual report, {c} stood at {q}.",
    "The study recorded {c} at {q} among participants.",
    "Officials confirmed that {c} was {q} this year.",
    "In its statement the firm said {c} came in at {q}.",
    "Researchers measured {c} at {q} during the trial.",
    "Data released on Monday put {c} at {q}.",
    "A new review found {c} to be {q} on average.",
    "Sources said {c} hit {q} last month.",
    "The dashboard showed {c} holding at {q} overnight.",
]

QUERY_TEMPLATES = [
    "{c} {op} {q}",
    "documents reporting {c} {op} {q}",
    "which reports mention {c} {op} {q}",
    "find sentences where {c} is {op} {q}",
]

OP_PHRASES = {
    Cmp.GT: ["over", "above", "more than", "greater than"],
    Cmp.LT: ["under", "below", "less than"],
    Cmp.EQ: ["exactly", "equal to", "of"],
}


@dataclass(frozen=True)
class CorpusSpec:
    n_concepts: int = 50
    synonyms_per_concept: int = 3
    max_units_per_concept: int = 2
    values_per_pair: int = 40
    n_templates: int = 8
    seed: int = 0
    heldout_fraction: float = 0.2
    train_queries_per_op: int = 4
    triplet_cap: int = 64
    significant_digits: int = 3
    positive_scope: str = "pair"  # "pair" or "concept"

    def __post_init__(self):
        if not 1 <= self.n_concepts <= len(CONCEPTS):
            raise ValueError(f"n_concepts must be in [1, {len(CONCEPTS)}]")
        if not 1 <= self.n_templates <= len(DOC_TEMPLATES):
            raise ValueError(f"n_templates must be in [1, {len(DOC_TEMPLATES)}]")
        if self.positive_scope not in ("pair", "concept"):
            raise ValueError("positive_scope must be 'pair' or 'concept'")
        if self.values_per_pair < 1 or self.synonyms_per_concept < 1:
            raise ValueError("values_per_pair and synonyms_per_concept must be positive")


@dataclass(frozen=True)
class Sentence:
    id: int
    text: str
    concept: str
    value: float
    unit: str | None
    value_text: str = ""
    unit_surface: str = ""
    template: int = 0
    concept_surface: str = ""

    @property
    def quantity(self):
        return parse_quantities(self.text)[0]

    def to_json(self):
        return {"id": self.id, "text": self.text, "concept": self.concept, "value": self.value, "unit": self.unit}


@dataclass(frozen=True)
class Query:
    qid: str
    text: str
    condition: NumericalCondition
    concept: str
    template: int = 0
    op_phrase: str = ""
    concept_surface: str = ""
    quantity_text: str = ""

    def to_json(self):
        c = self.condition
        return {"qid": self.qid, "text": self.text, "value": c.value, "cmp": c.cmp.value, "unit": c.unit}


@dataclass(frozen=True)
class Triplet:
    query: Query
    positive: Sentence
    negative: Sentence
    provenance: str = "base"

    def check(self, eq_tolerance=1e-9):
        cond = self.query.condition
        pos = satisfies(self.positive.quantity, cond, eq_tolerance)
        neg = satisfies(self.negative.quantity, cond, eq_tolerance)
        return pos is True and neg is not True and self.positive.concept == self.negative.concept


@dataclass
class Benchmark:
    corpus: list
    test_queries: list
    qrels: dict
    train_queries: list
    triplets: list
    augmented: list = field(default_factory=list)
    spec: CorpusSpec = None


# -- rendering ----------------------------------------------------------------


def _round_sig(x, digits):
    d = Decimal(repr(float(x)))
    exp = d.adjusted() - digits + 1
    return d.quantize(Decimal(1).scaleb(exp)).normalize()


def format_number(d):
    """Plain decimal text for a ``Decimal``: thousands separators, no exponent."""
    d = d.normalize()
    if d == d.to_integral_value():
        n = int(d)
        return f"{n:,}" if abs(n) >= 10000 else str(n)
    text = format(d, "f")
    return text


def render_value(d, unit_id):
    """Number text, using word multipliers for large currency amounts."""
    if unit_id == "USD" and abs(d) >= Decimal(10) ** 6:
        for word, power in (("trillion", 12), ("billion", 9), ("million", 6)):
            scale = Decimal(10) ** power
            if abs(d) >= scale:
                return f"{format_number(d / scale)} {word}"
    return format_number(d)


def render_quantity(d, unit_id, surface):
    text = render_value(d, unit_id)
    if surface == "$":
        return f"${text}"
    if surface == "%":
        return f"{text}%"
    return f"{text} {surface}"


def _capitalize(text):
    return text[0].upper() + text[1:] if text else text


def render_sentence(template, concept_surface, quantity_text):
    return _capitalize(DOC_TEMPLATES[template].format(C=concept_surface, c=concept_surface, q=quantity_text))


def render_query(template, concept_surface, op_phrase, quantity_text):
    return QUERY_TEMPLATES[template].format(c=concept_surface, op=op_phrase, q=quantity_text)


def _make_sentence(sid, concept, value_dec, unit_id, surface, template, concept_surface):
    qtext = render_quantity(value_dec, unit_id, surface)
    text = render_sentence(template, concept_surface, qtext)
    found = parse_quantities(text)
    if len(found) != 1 or found[0].unit != unit_id:
        raise AssertionError(f"sentence does not parse to one {unit_id} quantity: {text!r}")
    return Sentence(sid, text, concept, found[0].value, unit_id, qtext, surface, template, concept_surface)


def _primary_surface(unit_id):
    surfaces = DEFAULT_UNITS[unit_id].surfaces
    return "%" if unit_id == "PERCENT" else surfaces[0]


# -- corpus -------------------------------------------------------------------


def _concept_table(spec):
    rows = []
    for name, synonyms, units, rng in CONCEPTS[: spec.n_concepts]:
        surfaces = [name] + synonyms[: spec.synonyms_per_concept - 1]
        rows.append((name, surfaces, units[: spec.max_units_per_concept], rng))
    return rows


def _pair_values(rng, lo, hi, n, digits, scale=1.0):
    values = set()
    attempts = 0
    while len(values) < n and attempts < 50 * n:
        attempts += 1
        x = math.exp(rng.uniform(math.log(lo), math.log(hi))) * scale
        values.add(_round_sig(x, digits))
    return sorted(values)


def generate_corpus(spec):
    """Sentences for every (concept, unit, value, template) combination."""
    rng = np.random.default_rng([spec.seed, 0])
    out = []
    for name, surfaces, units, (lo, hi) in _concept_table(spec):
        base_factor = DEFAULT_UNITS[units[0]].factor
        for unit_id in units:
            scale = base_factor / DEFAULT_UNITS[unit_id].factor
            values = _pair_values(rng, lo, hi, spec.values_per_pair, spec.significant_digits, scale)
            for value in values:
                for t in range(spec.n_templates):
                    surface = surfaces[int(rng.integers(len(surfaces)))]
                    out.append(_make_sentence(len(out), name, value, unit_id, _primary_surface(unit_id), t, surface))
    return out


def pair_index(corpus):
    """``{(concept, unit): [sentences]}`` preserving corpus order."""
    pairs = {}
    for s in corpus:
        pairs.setdefault((s.concept, s.unit), []).append(s)
    return pairs


def relevant_ids(query, corpus, eq_tolerance=1e-9):
    return [s.id for s in corpus if s.concept == query.concept and satisfies(s.quantity, query.condition, eq_tolerance) is True]


def _query(qid, concept, surfaces, cond_value, cmp, unit_id, rng):
    template = int(rng.integers(len(QUERY_TEMPLATES)))
    phrases = OP_PHRASES[cmp]
    op = phrases[int(rng.integers(len(phrases)))]
    surface = surfaces[int(rng.integers(len(surfaces)))]
    qtext = render_quantity(cond_value, unit_id, _primary_surface(unit_id))
    text = render_query(template, surface, op, qtext)
    cond = parse_condition(text)
    if cond is None or cond.cmp is not cmp or cond.unit != unit_id:
        raise AssertionError(f"query does not parse back to its condition: {text!r}")
    return Query(qid, text, cond, concept, template, op, surface, qtext)


def split_thresholds(values, heldout_fraction, rng):
    values = list(values)
    n_held = max(1, int(round(heldout_fraction * len(values)))) if len(values) > 1 else 0
    perm = rng.permutation(len(values))
    held = sorted(values[i] for i in perm[:n_held])
    train = sorted(values[i] for i in perm[n_held:])
    return train, held


def generate_queries(corpus, spec=CorpusSpec(), split="test"):
    """Queries with qrels.

    ``split="test"`` emits one EQ, GT and LT query per concept-unit pair,
    thresholds drawn from the held-out values; ``split="train"`` emits
    ``train_queries_per_op`` per operator from the remaining values.
    Returns ``[(query, relevant_ids), ...]``.
    """
    rng = np.random.default_rng([spec.seed, 1, 0 if split == "test" else 1])
    surfaces_of = {name: surfaces for name, surfaces, _, _ in _concept_table(spec)}
    by_concept = {}
    for s in corpus:
        by_concept.setdefault(s.concept, []).append(s)
    out = []
    for k, ((concept, unit_id), sents) in enumerate(pair_index(corpus).items()):
        values = sorted({_sentence_decimal(s) for s in sents})
        # the split has its own stream so both calls agree on it
        split_rng = np.random.default_rng([spec.seed, 4, k])
        train_vals, held_vals = split_thresholds(values, spec.heldout_fraction, split_rng)
        pool = held_vals if split == "test" else train_vals
        if not pool:
            continue
        surfaces = surfaces_of.get(concept, [concept])
        per_op = 1 if split == "test" else spec.train_queries_per_op
        for cmp in (Cmp.EQ, Cmp.GT, Cmp.LT):
            for _ in range(per_op):
                value = pool[int(rng.integers(len(pool)))]
                qid = f"{split[:2]}{len(out):05d}"
                q = _query(qid, concept, surfaces, value.normalize(), cmp, unit_id, rng)
                out.append((q, relevant_ids(q, by_concept[concept])))
    return out


def build_triplets(corpus, queries, cap=64, seed=0, positive_scope="pair"):
    """Pair satisfying sentences with violating same-pair ones.

    Positives come from the query's concept-unit pair (``"pair"``) or from
    any unit of the concept (``"concept"``). Up to ``cap`` (positive,
    negative) combinations are sampled per query without replacement.
    """
    rng = np.random.default_rng([seed, 2])
    pairs = pair_index(corpus)
    by_concept = {}
    for s in corpus:
        by_concept.setdefault(s.concept, []).append(s)
    out = []
    for q in queries:
        pool = pairs.get((q.concept, q.condition.unit), []) if positive_scope == "pair" else by_concept.get(q.concept, [])
        pos = [s for s in pool if satisfies(s.quantity, q.condition) is True]
        neg = [s for s in pairs.get((q.concept, q.condition.unit), []) if satisfies(s.quantity, q.condition) is not True]
        total = len(pos) * len(neg)
        if total == 0:
            continue
        if cap is None or total <= cap:
            picks = range(total)
        else:
            picks = sorted(rng.choice(total, size=cap, replace=False).tolist())
        for flat in picks:
            t = Triplet(q, pos[flat // len(neg)], neg[flat % len(neg)], "base")
            if not t.check():
                raise AssertionError(f"invalid triplet for query {q.qid}")
            out.append(t)
    return out


# -- augmentation ------------------------------------------------------------


class _IdAllocator:
    def __init__(self, start):
        self.next = start

    def __call__(self):
        self.next += 1
        return self.next - 1


def _sentence_decimal(s):
    return Decimal(repr(s.value))


def _convert_decimal(value, src, dst):
    return (value * Decimal(repr(DEFAULT_UNITS[src].factor)) / Decimal(repr(DEFAULT_UNITS[dst].factor))).normalize()


def _unit_permute(s, rng, new_id):
    """Rewrite the unit surface form (possibly another unit of the same dimension)."""
    dim = DEFAULT_UNITS[s.unit].dimension
    options = []
    for uid, unit in DEFAULT_UNITS.units.items():
        if unit.dimension != dim:
            continue
        value = _convert_decimal(_sentence_decimal(s), s.unit, uid)
        if not (Decimal("0.001") <= value < Decimal(10) ** 7) or len(value.as_tuple().digits) > 9:
            continue
        for surface in unit.surfaces:
            if (uid, surface) != (s.unit, s.unit_surface) and (surface != "$" or uid == "USD"):
                options.append((uid, surface, value))
    if not options:
        return None
    uid, surface, value = options[int(rng.integers(len(options)))]
    return _make_sentence(new_id(), s.concept, value, uid, surface, s.template, s.concept_surface)


def _value_permute(s, observed, rng, new_id):
    value = observed[int(rng.integers(len(observed)))]
    return _make_sentence(new_id(), s.concept, value, s.unit, s.unit_surface, s.template, s.concept_surface)


def augment(triplets, corpus, ops, seed=0, rate=0.25, synonyms=None):
    """Original triplets plus augmented copies.

    Each op is applied to each triplet with probability ``rate``.
    Returns ``(triplets, new_sentences)``; every emitted triplet is
    re-validated against the rendered text.
    """
    unknown = set(ops) - set(AUGMENT_OPS)
    if unknown:
        raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
    ops = [op for op in AUGMENT_OPS if op in set(ops)]
    if not ops:
        return list(triplets), []
    rng = np.random.default_rng([seed, 3])
    synonyms = synonyms or {name: [name] + syn for name, syn, _, _ in CONCEPTS}
    observed = {}
    for s in corpus:
        observed.setdefault((s.concept, s.unit), set()).add(_sentence_decimal(s))
    observed = {k: sorted(v) for k, v in observed.items()}
    new_id = _IdAllocator(max((s.id for s in corpus), default=-1) + 1)
    out, new_sentences = list(triplets), []
    for t in triplets:
        for op in ops:
            if rng.random() >= rate:
                continue
            aug = None
            if op == "concept_expansion":
                q = t.query
                choices = [c for c in synonyms.get(q.concept, []) if c != q.concept_surface]
                if choices:
                    surface = choices[int(rng.integers(len(choices)))]
                    text = render_query(q.template, surface, q.op_phrase, q.quantity_text)
                    aug = replace(t, query=replace(q, text=text, concept_surface=surface), provenance=op)
            elif op == "unit_permutation":
                role = "positive" if rng.random() < 0.5 else "negative"
                s2 = _unit_permute(getattr(t, role), rng, new_id)
                if s2 is not None:
                    new_sentences.append(s2)
                    aug = replace(t, provenance=op, **{role: s2})
            else:
                src = t.positive if rng.random() < 0.5 else t.negative
                s2 = _value_permute(src, observed[(src.concept, src.unit)], rng, new_id)
                new_sentences.append(s2)
                verdict = satisfies(s2.quantity, t.query.condition)
                if verdict is True:
                    aug = replace(t, positive=s2, provenance=op)
                else:
                    aug = replace(t, negative=s2, provenance=op)
            if aug is not None and aug.check() and parse_condition(aug.query.text) == aug.query.condition:
                out.append(aug)
    return out, new_sentences


# -- full benchmark and file formats ------------------------------------------


def generate_benchmark(spec=CorpusSpec(), ops=AUGMENT_OPS, augment_rate=0.25):
    corpus = generate_corpus(spec)
    test = generate_queries(corpus, spec, "test")
    train = generate_queries(corpus, spec, "train")
    train_queries = [q for q, _ in train]
    triplets = build_triplets(corpus, train_queries, spec.triplet_cap, spec.seed, spec.positive_scope)
    triplets, augmented = augment(triplets, corpus, ops, spec.seed, augment_rate)
    return Benchmark(
        corpus=corpus,
        test_queries=[q for q, _ in test],
        qrels={q.qid: rel for q, rel in test},
        train_queries=train_queries,
        triplets=triplets,
        augmented=augmented,
        spec=spec,
    )


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_qrels(path, qrels):
    with open(path, "w", encoding="utf-8") as fh:
        for qid, rel in qrels.items():
            for doc_id in rel:
                fh.write(f"{qid} 0 {doc_id} 1\n")


def read_qrels(path):
    qrels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 'qid 0 docid grade'")
            qid, _, doc, grade = parts
            qrels.setdefault(qid, {})
            if int(grade) > 0:
                qrels[qid][int(doc)] = int(grade)
    return qrels


def write_triplets(path, triplets):
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(f"{t.query.text}\t{t.positive.id}\t{t.negative.id}\t{t.provenance}\n")


def read_triplets(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4 or parts[3] not in PROVENANCES:
                raise ValueError(f"{path}:{lineno}: expected query<TAB>pos<TAB>neg<TAB>provenance")
            rows.append((parts[0], int(parts[1]), int(parts[2]), parts[3]))
    return rows


def sentence_rows(sentences):
    return [s.to_json() for s in sentences]


def save_benchmark(bench, out_dir):
    import os

    os.makedirs(out_dir, exist_ok=True)
    write_jsonl(os.path.join(out_dir, "corpus.jsonl"), sentence_rows(bench.corpus))
    write_jsonl(os.path.join(out_dir, "augmented.jsonl"), sentence_rows(bench.augmented))
    write_jsonl(os.path.join(out_dir, "queries.jsonl"), [q.to_json() for q in bench.test_queries])
    write_jsonl(os.path.join(out_dir, "train_queries.jsonl"), [q.to_json() for q in bench.train_queries])
    write_qrels(os.path.join(out_dir, "qrels.txt"), bench.qrels)
    write_triplets(os.path.join(out_dir, "triplets.tsv"), bench.triplets)
    with open(os.path.join(out_dir, "spec.json"), "w", encoding="utf-8") as fh:
        json.dump(asdict(bench.spec), fh, sort_keys=True, indent=1)
