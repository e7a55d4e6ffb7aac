"""Estimator wrapper tying featurization, gating, training and search together."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .embedder import EmbedderConfig, QueryEmbeddings, document_features, encode_query, project, query_features
from .losses import LossConfig, TrainingBatch, unit_classes
from .params import ModelParams, ModelShape, load_checkpoint, save_checkpoint
from .quantity import DEFAULT_UNITS, parse_condition, parse_quantities
from .scoring import pack_documents, rank, score_packed
from .text import tokenize
from .trainer import TrainConfig, train


def detection_labels(text, table=DEFAULT_UNITS):
    """1 for tokens inside a quantity mention (number, multiplier, unit), else 0."""
    tokens = tokenize(text)
    labels = np.zeros(len(tokens), dtype=bool)
    for q in parse_quantities(text, table):
        labels[q.span[0]:q.span[1]] = True
    return labels


class FeatureCache:
    """Memoized base features; queries and documents are cached separately."""

    def __init__(self, cfg, table=DEFAULT_UNITS):
        self.cfg = cfg
        self.table = table
        self._queries = {}
        self._docs = {}

    def query(self, text):
        hit = self._queries.get(text)
        if hit is None:
            tokens = tokenize(text)
            if not tokens:
                raise ValueError(f"query has no tokens: {text!r}")
            hit = (query_features(tokens, self.cfg), detection_labels(text, self.table))
            self._queries[text] = hit
        return hit

    def document(self, text):
        hit = self._docs.get(text)
        if hit is None:
            tokens = tokenize(text)
            if not tokens:
                raise ValueError(f"document has no tokens: {text!r}")
            quantities = parse_quantities(text, self.table)
            hit = (document_features(tokens, self.cfg), quantities[0] if quantities else None)
            self._docs[text] = hit
        return hit

    def batch(self, triplets):
        """:class:`TrainingBatch` from triplets with ``query``/``positive``/``negative`` texts."""
        qf, ql, conds, texts = [], [], [], []
        pos, neg = [], []
        for t in triplets:
            feats, labels = self.query(t.query.text)
            qf.append(feats)
            ql.append(labels)
            conds.append(t.query.condition)
            texts.append(t.query.text)
            pos.append(self.document(t.positive.text))
            neg.append(self.document(t.negative.text))
        docs = pos + neg
        return TrainingBatch(qf, ql, [d[0] for d in docs], conds, [d[1] for d in docs], texts)


class NumericGatedRetriever(BaseEstimator):
    """Late-interaction retriever with a query-side numeric gate.

    ``fit`` takes training triplets (objects exposing ``query.text``,
    ``query.condition``, ``positive.text`` and ``negative.text``).
    """

    def __init__(self, dim=64, feature_dim=512, hidden=32, prop_hidden=32, seed=0, tau=0.5,
                 loss_config=None, train_config=None):
        self.dim = dim
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.prop_hidden = prop_hidden
        self.seed = seed
        self.tau = tau
        self.loss_config = loss_config
        self.train_config = train_config

    # -- setup ------------------------------------------------------------
    def _embedder_config(self):
        return EmbedderConfig(dim=self.dim, feature_dim=self.feature_dim, seed=self.seed)

    def _shape(self):
        return ModelShape(self.dim, self.feature_dim, self.hidden, self.prop_hidden, len(unit_classes()))

    def initialize(self):
        """Fresh parameters without training (the untrained reference model)."""
        self.embedder_config_ = self._embedder_config()
        self.params_ = ModelParams.init(self._shape(), self.seed)
        self.log_ = []
        return self

    @property
    def gate_enabled(self):
        return (self.loss_config or LossConfig()).gate_enabled

    def fit(self, triplets, y=None, log_path=None, checkpoint_path=None):
        if len(triplets) == 0:
            raise ValueError("no training triplets")
        self.initialize()
        tcfg = self.train_config or TrainConfig(seed=self.seed)
        lcfg = self.loss_config or LossConfig()
        # the cache only lives for the training run
        cache = FeatureCache(self.embedder_config_)
        result = train(list(triplets), self.params_, cache.batch, tcfg, lcfg, log_path, checkpoint_path)
        self.log_ = result.log
        self.epoch_means_ = result.epoch_means
        return self

    # -- encoding ---------------------------------------------------------
    def encode_query(self, text, labels=None):
        check_is_fitted(self, "params_")
        p = self.params_
        return encode_query(text, p.W, p.b, p.mlp("det"), p.mlp("gate"), self.embedder_config_,
                            self.tau, labels, self.gate_enabled)

    def encode_document(self, text):
        check_is_fitted(self, "params_")
        tokens = tokenize(text)
        if not tokens:
            raise ValueError(f"document has no tokens: {text!r}")
        feats = document_features(tokens, self.embedder_config_)
        E, _, _ = project(feats, self.params_.W, self.params_.b)
        return E

    def encode_corpus(self, texts):
        return [self.encode_document(t) for t in texts]

    def transform(self, texts):
        """Per-document token embedding matrices."""
        return self.encode_corpus(texts)

    # -- search ---------------------------------------------------------------
    def search(self, query, corpus_tokens, offsets, doc_ids=None, top_k=10):
        """Exact gated-MaxSim ranking of a packed corpus."""
        q = query if isinstance(query, QueryEmbeddings) else self.encode_query(query)
        return rank(score_packed(q.E, corpus_tokens, offsets), doc_ids, top_k)

    def rank_corpus(self, queries, doc_texts, doc_ids=None, top_k=100):
        tokens, offsets = pack_documents(self.encode_corpus(doc_texts))
        return [self.search(q, tokens, offsets, doc_ids, top_k) for q in queries]

    def condition_of(self, text):
        return parse_condition(text)

    # -- persistence ------------------------------------------------------
    def save(self, path):
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, self.seed)

    @classmethod
    def load(cls, path, tau=0.5, gate_enabled=True):
        params, seed = load_checkpoint(path)
        s = params.shape
        model = cls(s.dim, s.feature_dim, s.hidden, s.prop_hidden, seed, tau,
                    loss_config=LossConfig(gate_enabled=gate_enabled))
        model.embedder_config_ = model._embedder_config()
        model.params_ = params
        model.log_ = []
        return model
