"""Exact late-interaction scoring: the brute-force reference for the index."""

from dataclasses import dataclass

import numpy as np


class NoNumericTokens(ValueError):
    """Raised when a query has no token flagged numeric."""


@dataclass
class Score:
    value: float
    per_token_argmax: np.ndarray
    per_token_max: np.ndarray


def maxsim(Q, D):
    """Sum over query rows of the best dot product with any document row.

    Ties resolve to the lowest document-token index.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if D.shape[0] == 0 or D.size == 0:
        raise ValueError("document has no token embeddings")
    if Q.shape[0] == 0 or Q.size == 0:
        raise ValueError("query has no token embeddings")
    sim = Q @ D.T
    arg = sim.argmax(axis=1)  # first maximum wins
    best = sim[np.arange(len(arg)), arg]
    return Score(float(best.sum()), arg, best)


def gated_maxsim(query, D):
    """MaxSim over the gated query rows of a :class:`QueryEmbeddings`."""
    return maxsim(query.E, D)


def mean_pool_numeric(query, gated=False):
    """Mean of the rows flagged in ``numeric_mask`` (ungated rows by default)."""
    mask = np.asarray(query.numeric_mask, dtype=bool)
    if not mask.any():
        raise NoNumericTokens("query has no numeric token")
    rows = query.E if gated else query.ungated
    return rows[mask].mean(axis=0)


def s_cont(q_num, D):
    """Largest dot product between the pooled numeric vector and a document row."""
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if D.shape[0] == 0 or D.size == 0:
        raise ValueError("document has no token embeddings")
    return float((D @ np.asarray(q_num, dtype=float)).max())


def pack_documents(docs, dtype=np.float64):
    """Concatenate document matrices; returns ``(tokens, offsets)`` (CSR layout)."""
    lengths = np.array([len(d) for d in docs], dtype=np.int64)
    offsets = np.zeros(len(docs) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    dim = docs[0].shape[1] if docs else 0
    tokens = np.concatenate(docs).astype(dtype, copy=False) if docs else np.zeros((0, dim), dtype)
    return tokens, offsets


def score_packed(Q, tokens, offsets, chunk=65536):
    """MaxSim of ``Q`` against every packed document, vectorized in token chunks."""
    n_docs = len(offsets) - 1
    if n_docs == 0:
        return np.zeros(0)
    if np.any(np.diff(offsets) == 0):
        raise ValueError("empty document in packed corpus")
    Q = np.asarray(Q, dtype=tokens.dtype)
    best = np.empty((Q.shape[0], n_docs), dtype=np.float64)
    starts = offsets[:-1]
    d0 = 0
    while d0 < n_docs:
        d1 = int(np.searchsorted(offsets, offsets[d0] + chunk, side="right")) - 1
        d1 = min(max(d1, d0 + 1), n_docs)
        lo, hi = offsets[d0], offsets[d1]
        sim = Q @ tokens[lo:hi].T
        best[:, d0:d1] = np.maximum.reduceat(sim, starts[d0:d1] - lo, axis=1)
        d0 = d1
    return best.sum(axis=0)


def rank(scores, doc_ids=None, top_k=None):
    """Indices (or ids) sorted by score descending, ties by ascending id."""
    scores = np.asarray(scores)
    ids = np.arange(len(scores)) if doc_ids is None else np.asarray(doc_ids)
    order = np.lexsort((ids, -scores))
    if top_k is not None:
        order = order[:top_k]
    return [(ids[i].item(), float(scores[i])) for i in order]


def brute_force_search(Q, corpus, top_k=10, doc_ids=None):
    """Exact ranking of ``corpus`` (list of ``n_j x d`` matrices) for ``Q``."""
    tokens, offsets = pack_documents(corpus)
    return rank(score_packed(Q, tokens, offsets), doc_ids, top_k)
