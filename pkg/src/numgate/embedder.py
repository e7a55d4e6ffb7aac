"""Frozen hashed token featurizer plus the trainable projection head.

Each token is mapped to ``f`` base features: dense numeric slots (flag,
digit count, decimal point, magnitude), signed hashed character n-grams,
and for query tokens a hashed bag of neighbouring words. A linear
projection followed by L2 normalization gives the ``d``-dimensional token
embedding. Documents never see the context block or any gate parameters.
"""

import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .gate import GateConfig, apply_gate
from .text import parse_number, tokenize

# dense numeric slots
IS_NUMERIC = 0
DIGIT_COUNT = 1
HAS_DECIMAL = 2
MAGNITUDE = 3  # floor(log10|v|) clamped to [MIN_BUCKET, MAX_BUCKET]
LOG_FRACTION = 4  # log10|v| - floor(log10|v|)
BUCKET_ONEHOT = 5
MIN_BUCKET, MAX_BUCKET = -6, 12
N_DENSE = BUCKET_ONEHOT + (MAX_BUCKET - MIN_BUCKET + 1)  # 24
PERIODIC = N_DENSE  # cos/sin of 2*pi*log10|v|/P for each period P

NUM_PLACEHOLDER = "<num>"


@dataclass(frozen=True)
class EmbedderConfig:
    dim: int = 64
    feature_dim: int = 512
    seed: int = 0
    char_ngram_range: tuple = (2, 3)
    context_slots: int = 96
    context_window: tuple = (3, 2)  # words to the left, to the right
    context_weight: float = 1.0
    digit_scale: float = 0.25
    log_periods: tuple = (1, 4, 16)
    periodic_scale: float = 1.0
    number_ngrams: bool = True

    def __post_init__(self):
        if self.dim < 1 or self.feature_dim < 1:
            raise ValueError("dim and feature_dim must be positive")
        if self.dim > self.feature_dim:
            raise ValueError("dim must not exceed feature_dim")
        if self.feature_dim < self.dense_slots + self.context_slots + 16:
            raise ValueError("feature_dim too small for the slot layout")

    @property
    def dense_slots(self):
        return N_DENSE + 2 * len(self.log_periods)

    @property
    def context_offset(self):
        return self.dense_slots

    @property
    def ngram_offset(self):
        return self.dense_slots + self.context_slots

    @property
    def ngram_slots(self):
        return self.feature_dim - self.ngram_offset


def _hash(seed, kind, key, modulo):
    h = hashlib.blake2b(f"{kind}\x00{key}".encode(), digest_size=8, key=str(seed).encode())
    n = int.from_bytes(h.digest(), "little")
    return n % modulo, 1.0 if (n >> 63) & 1 else -1.0


def magnitude_bucket(value):
    if value == 0:
        return 0
    return int(min(max(math.floor(math.log10(abs(value))), MIN_BUCKET), MAX_BUCKET))


@lru_cache(maxsize=200_000)
def _token_features(token, cfg):
    phi = np.zeros(cfg.feature_dim)
    number = parse_number(token)
    if number is not None and math.isfinite(float(number)):
        value = float(number)
        phi[IS_NUMERIC] = 1.0
        phi[DIGIT_COUNT] = cfg.digit_scale * sum(ch.isdigit() for ch in token)
        phi[HAS_DECIMAL] = 1.0 if "." in token else 0.0
        bucket = magnitude_bucket(value)
        phi[MAGNITUDE] = bucket
        if value != 0:
            frac = math.log10(abs(value)) - math.floor(math.log10(abs(value)))
            phi[LOG_FRACTION] = frac if MIN_BUCKET <= bucket < MAX_BUCKET else 0.0
        phi[BUCKET_ONEHOT + bucket - MIN_BUCKET] = 1.0
        if value != 0:
            x = math.log10(abs(value))
            for k, period in enumerate(cfg.log_periods):
                phi[PERIODIC + 2 * k] = cfg.periodic_scale * math.cos(2 * math.pi * x / period)
                phi[PERIODIC + 2 * k + 1] = cfg.periodic_scale * math.sin(2 * math.pi * x / period)
        if not cfg.number_ngrams:
            phi.setflags(write=False)
            return phi
    block = np.zeros(cfg.ngram_slots)
    padded = f"<{token}>"
    lo, hi = cfg.char_ngram_range
    for n in range(lo, hi + 1):
        for i in range(len(padded) - n + 1):
            slot, sign = _hash(cfg.seed, "ng", padded[i:i + n], cfg.ngram_slots)
            block[slot] += sign
    slot, sign = _hash(cfg.seed, "tok", token, cfg.ngram_slots)
    block[slot] += sign
    norm = np.linalg.norm(block)
    if norm > 0:
        block /= norm
    phi[cfg.ngram_offset:] = block
    phi.setflags(write=False)
    return phi


@lru_cache(maxsize=50_000)
def _context_word(word, cfg):
    vec = np.zeros(cfg.context_slots)
    slot, sign = _hash(cfg.seed, "ctx", word, cfg.context_slots)
    vec[slot] = sign
    return vec


def base_embed(token, cfg):
    """Base feature vector of a single token (read-only array of length f)."""
    return _token_features(token, cfg)


def context_features(tokens, i, cfg):
    """Hashed bag of the words around position ``i``, scaled to ``context_weight``."""
    left, right = cfg.context_window
    vec = np.zeros(cfg.context_slots)
    for j in range(max(0, i - left), min(len(tokens), i + right + 1)):
        if j == i:
            continue
        word = NUM_PLACEHOLDER if parse_number(tokens[j]) is not None else tokens[j]
        vec += _context_word(word, cfg)
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec *= cfg.context_weight / norm
    return vec


def document_features(tokens, cfg):
    """``n x f`` base features of a document; purely per token."""
    if not tokens:
        return np.zeros((0, cfg.feature_dim))
    return np.stack([_token_features(t, cfg) for t in tokens])


def query_features(tokens, cfg):
    """``m x f`` features of a query: per-token features plus the context block."""
    X = document_features(tokens, cfg).copy()
    lo = cfg.context_offset
    for i in range(len(tokens)):
        X[i, lo:lo + cfg.context_slots] = context_features(tokens, i, cfg)
    return X


def init_projection(dim, feature_dim, rng):
    """Gaussian projection with 1/sqrt(f) scale and zero bias."""
    W = rng.standard_normal((dim, feature_dim)) / math.sqrt(feature_dim)
    return W, np.zeros(dim)


def project(X, W, b):
    """Row-normalized ``X W^T + b``; returns ``(E, U, norms)``."""
    U = X @ W.T + b
    norms = np.linalg.norm(U, axis=1)
    norms = np.where(norms > 0, norms, 1.0)
    return U / norms[:, None], U, norms


@dataclass
class DocEmbeddings:
    """Unit-norm token embeddings of one document."""

    tokens: list
    E: np.ndarray
    doc_id: object = None

    def to_bytes(self):
        return np.ascontiguousarray(self.E, dtype="<f8").tobytes()


@dataclass
class QueryEmbeddings:
    """Query token embeddings with detector and gate diagnostics.

    ``E`` holds the gated rows used for scoring; ``ungated`` the unit-norm
    rows before gating.
    """

    tokens: list
    E: np.ndarray
    ungated: np.ndarray
    num_probs: np.ndarray
    gates: np.ndarray
    numeric_mask: np.ndarray
    applied: np.ndarray = field(default=None)


def encode_document(text, W, b, cfg, doc_id=None):
    tokens = tokenize(text)
    if not tokens:
        return DocEmbeddings([], np.zeros((0, cfg.dim)), doc_id)
    E, _, _ = project(document_features(tokens, cfg), W, b)
    return DocEmbeddings(tokens, E, doc_id)


def encode_query(text, W, b, det, gate, cfg, tau=0.5, labels=None, enabled=True):
    """Gated query embeddings.

    Rows are projected and normalized, scored by the detector, and the
    rows whose probability exceeds ``tau`` (or, with ``labels``, the
    ground-truth numeric rows) are scaled by their gate value.
    """
    tokens = tokenize(text)
    if not tokens:
        raise ValueError("query has no tokens")
    E, _, _ = project(query_features(tokens, cfg), W, b)
    route = None if labels is None else np.asarray(labels, dtype=bool)
    gated, probs, gates, cache = apply_gate(E, det, gate, GateConfig(tau), route=route, enabled=enabled)
    mask = probs > tau if route is None else route
    return QueryEmbeddings(tokens, gated, E, probs, gates, mask, cache.route)


class HashedTokenFeaturizer(TransformerMixin, BaseEstimator):
    """Stateless transformer from texts to per-token base feature matrices.

    ``fit`` is a no-op kept for pipeline compatibility.
    """

    def __init__(self, feature_dim=512, seed=0, char_ngram_range=(2, 3), query=False):
        self.feature_dim = feature_dim
        self.seed = seed
        self.char_ngram_range = char_ngram_range
        self.query = query

    def fit(self, X=None, y=None):
        self.config_ = EmbedderConfig(
            dim=min(64, self.feature_dim),
            feature_dim=self.feature_dim,
            seed=self.seed,
            char_ngram_range=tuple(self.char_ngram_range),
        )
        return self

    def transform(self, X):
        cfg = getattr(self, "config_", None) or self.fit().config_
        feats = query_features if self.query else document_features
        return [feats(tokenize(text), cfg) for text in X]
