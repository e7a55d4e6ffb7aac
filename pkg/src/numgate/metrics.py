"""Ranking metrics, run files, per-operator reports, latency benchmarks, embedding export."""

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import silhouette_score

from .quantity import Cmp, parse_condition
from .model import detection_labels
from .scoring import pack_documents, score_packed

METRICS = ("ndcg@10", "mrr@10", "p@10", "r@100")
OPERATORS = ("EQ", "GT", "LT")


class RunFormatError(ValueError):
    pass


def _ids(ranking):
    return [r[0] if isinstance(r, tuple) else r for r in ranking]


def _relevant(qrels):
    if isinstance(qrels, dict):
        return {d for d, g in qrels.items() if g > 0}
    return set(qrels)


def ndcg_at_k(ranking, qrels, k=10):
    """Binary-gain nDCG with log2 discount; 0 when nothing is relevant."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = _relevant(qrels)
    if not rel:
        return 0.0
    dcg = sum(1.0 / math.log2(i + 2) for i, d in enumerate(_ids(ranking)[:k]) if d in rel)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(len(rel), k)))
    return dcg / idcg


def mrr_at_k(ranking, qrels, k=10):
    rel = _relevant(qrels)
    for i, d in enumerate(_ids(ranking)[:k]):
        if d in rel:
            return 1.0 / (i + 1)
    return 0.0


def precision_at_k(ranking, qrels, k=10):
    rel = _relevant(qrels)
    return sum(d in rel for d in _ids(ranking)[:k]) / k


def recall_at_k(ranking, qrels, k=100):
    rel = _relevant(qrels)
    if not rel:
        return 0.0
    return sum(d in rel for d in _ids(ranking)[:k]) / len(rel)


def query_metrics(ranking, qrels):
    return {
        "ndcg@10": ndcg_at_k(ranking, qrels, 10),
        "mrr@10": mrr_at_k(ranking, qrels, 10),
        "p@10": precision_at_k(ranking, qrels, 10),
        "r@100": recall_at_k(ranking, qrels, 100),
    }


# -- run files ----------------------------------------------------------------


def validate_run(run):
    """Reject rankings with increasing scores or repeated doc ids."""
    for qid, ranking in run.items():
        scores = [s for _, s in ranking]
        if any(b > a for a, b in zip(scores, scores[1:])):
            raise RunFormatError(f"scores of query {qid} are not non-increasing")
        ids = [d for d, _ in ranking]
        if len(set(ids)) != len(ids):
            raise RunFormatError(f"duplicate doc id in query {qid}")
    return run


def write_run(path_or_fh, run, tag="numgate"):
    validate_run(run)
    lines = []
    for qid, ranking in run.items():
        for r, (doc, score) in enumerate(ranking, 1):
            lines.append(f"{qid} Q0 {doc} {r} {score!r} {tag}\n")
    if hasattr(path_or_fh, "write"):
        path_or_fh.writelines(lines)
    else:
        with open(path_or_fh, "w", encoding="utf-8") as fh:
            fh.writelines(lines)


def read_run(path):
    run = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise RunFormatError(f"{path}:{lineno}: expected 'qid Q0 docid rank score tag'")
            qid, _, doc, _, score, _ = parts
            try:
                doc = int(doc)
            except ValueError:
                pass
            run.setdefault(qid, []).append((doc, float(score)))
    return validate_run(run)


# -- reports ----------------------------------------------------------------


@dataclass
class MetricReport:
    overall: dict
    slices: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    n_queries: int = 0

    def rows(self):
        yield ("all", self.n_queries, *(self.overall[m] for m in METRICS))
        for op in OPERATORS:
            if op in self.slices:
                yield (op, self.counts[op], *(self.slices[op][m] for m in METRICS))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("slice", "queries") + METRICS)
        for row in self.rows():
            w.writerow([row[0], row[1]] + [f"{x:.6f}" for x in row[2:]])
        return buf.getvalue()

    def to_text(self):
        lines = [f"{'slice':<6}{'queries':>9}" + "".join(f"{m:>10}" for m in METRICS)]
        for row in self.rows():
            lines.append(f"{row[0]:<6}{row[1]:>9}" + "".join(f"{x:>10.4f}" for x in row[2:]))
        return "\n".join(lines) + "\n"


def evaluate(run, qrels, conditions=None):
    """Mean metrics over queries with at least one relevant document.

    ``conditions`` maps qid to a ``NumericalCondition`` (or a ``Cmp``) and
    drives the per-operator slices. Queries missing from ``run`` count as
    empty rankings.
    """
    per_query = {}
    for qid, rel in qrels.items():
        if not _relevant(rel):
            continue
        per_query[qid] = query_metrics(run.get(qid, []), rel)
    if not per_query:
        raise ValueError("no query has a relevant document")
    mean = {m: float(np.mean([v[m] for v in per_query.values()])) for m in METRICS}
    slices, counts = {}, {}
    for op in OPERATORS:
        qids = [q for q in per_query if conditions and _op_of(conditions.get(q)) == op]
        if qids:
            slices[op] = {m: float(np.mean([per_query[q][m] for q in qids])) for m in METRICS}
            counts[op] = len(qids)
    return MetricReport(mean, slices, counts, len(per_query))


def _op_of(cond):
    if cond is None:
        return None
    if isinstance(cond, Cmp):
        return cond.value
    if isinstance(cond, str):
        return cond
    return cond.cmp.value


# -- latency ------------------------------------------------------------------


@dataclass
class BenchResult:
    mean_ms: float
    median_ms: float
    brute_mean_ms: float
    brute_median_ms: float
    index_bytes: int
    code_bytes: int

    @property
    def speedup(self):
        return self.brute_mean_ms / self.mean_ms if self.mean_ms > 0 else math.inf


def _time_calls(fn, items, warmup):
    for q in items[:warmup]:
        fn(q)
    out = []
    for q in items:
        t0 = time.perf_counter()
        fn(q)
        out.append((time.perf_counter() - t0) * 1000.0)
    return np.array(out)


def bench_search(index, queries, corpus, top_k=10, nprobe=None, warmup=5):
    """Per-query latency of ``index.search`` against exhaustive MaxSim.

    ``queries`` are gated query matrices, ``corpus`` the raw document
    matrices the index was built from.
    """
    if not queries:
        raise ValueError("no queries to benchmark")
    tokens, offsets = pack_documents(corpus, np.float32)

    def brute(Q):
        s = score_packed(Q, tokens, offsets)
        top = np.argpartition(-s, min(top_k, len(s) - 1))[:top_k]
        return top[np.argsort(-s[top], kind="stable")]

    fast = _time_calls(lambda Q: index.search(Q, top_k, nprobe), queries, warmup)
    slow = _time_calls(brute, queries, warmup)
    return BenchResult(float(fast.mean()), float(np.median(fast)), float(slow.mean()), float(np.median(slow)),
                       len(index.to_bytes()), index.code_bytes())


# -- embedding export ---------------------------------------------------------


def export_embeddings(model, queries, gold=False):
    """Rows ``(qid, token, operator, vector)`` for numeric query tokens.

    ``queries`` is an iterable of ``(qid, text)``; vectors are the
    unit-norm rows before gating. Tokens are those the detector flags, or
    the parser-labelled quantity tokens when ``gold`` is set.
    """
    rows = []
    for qid, text in queries:
        cond = parse_condition(text)
        if cond is None:
            continue
        q = model.encode_query(text)
        flagged = detection_labels(text) if gold else q.num_probs > model.tau
        for i in np.flatnonzero(flagged):
            rows.append((qid, q.tokens[i], cond.cmp.value, q.ungated[i].copy()))
    return rows


def write_embeddings_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        dim = len(rows[0][3]) if rows else 0
        w.writerow(["qid", "token", "cmp"] + [f"e{i}" for i in range(dim)])
        for qid, tok, op, vec in rows:
            w.writerow([qid, tok, op] + [repr(float(x)) for x in vec])


def operator_silhouette(rows):
    """Silhouette of exported vectors grouped by operator label."""
    labels = [r[2] for r in rows]
    if len(set(labels)) < 2:
        raise ValueError("need at least two operator classes")
    X = np.stack([r[3] for r in rows])
    return float(silhouette_score(X, labels))
