import json
from pathlib import Path

import numpy as np
import pytest

from numgate.embedder import (
    IS_NUMERIC,
    MAGNITUDE,
    EmbedderConfig,
    HashedTokenFeaturizer,
    base_embed,
    document_features,
    encode_document,
    encode_query,
    init_projection,
    query_features,
)
from numgate.gate import GateConfig, MlpParams, apply_gate, detect, gate_backward, gate_value
from numgate.text import tokenize

GOLDEN = Path(__file__).parent / "golden" / "tokenize.json"
CFG = EmbedderConfig()


@pytest.fixture(scope="module")
def proj():
    return init_projection(CFG.dim, CFG.feature_dim, np.random.default_rng(0))


def mlp_const(logit, d=CFG.dim):
    """An MLP whose output is ``logit`` for every input."""
    p = MlpParams.zeros(d, 4, 1)
    p.b2[:] = logit
    return p


@pytest.mark.parametrize("case", json.loads(GOLDEN.read_text(encoding="utf-8")), ids=lambda c: c["text"] or "empty")
def test_tokenize_golden(case):
    assert tokenize(case["text"]) == case["tokens"]


def test_numbers_are_single_tokens():
    assert tokenize("20,000 and 3.25") == ["20,000", "and", "3.25"]


class TestBaseEmbed:
    def test_deterministic(self):
        assert np.array_equal(base_embed("500", CFG), base_embed("500", CFG))

    def test_magnitude_slot(self):
        assert base_embed("2000", CFG)[MAGNITUDE] == 3
        assert base_embed("20000", CFG)[MAGNITUDE] == 4
        assert base_embed("20,000", CFG)[MAGNITUDE] == 4

    def test_magnitude_clamped(self):
        assert base_embed("1e30", CFG)[MAGNITUDE] == 12
        assert base_embed("1e-30", CFG)[MAGNITUDE] == -6

    def test_numeric_slots_zero_for_words(self):
        phi = base_embed("revenue", CFG)
        assert not phi[: CFG.context_offset].any()
        assert base_embed("42", CFG)[IS_NUMERIC] == 1.0

    def test_finite_and_readonly(self):
        phi = base_embed("1,234.5", CFG)
        assert np.all(np.isfinite(phi))
        with pytest.raises(ValueError):
            phi[0] = 3.0

    def test_distinct_words_not_parallel(self, proj):
        W, b = proj
        a = encode_document("revenue", W, b, CFG).E[0]
        c = encode_document("profit", W, b, CFG).E[0]
        assert a @ c < 1.0 - 1e-6

    def test_seed_changes_hashing(self):
        other = EmbedderConfig(seed=1)
        assert not np.array_equal(base_embed("revenue", CFG), base_embed("revenue", other))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EmbedderConfig(dim=600, feature_dim=512)


class TestEncodeDocument:
    def test_bitwise_deterministic(self, proj):
        W, b = proj
        a = encode_document("Revenue reached 3 billion USD", W, b, CFG)
        c = encode_document("Revenue reached 3 billion USD", W, b, CFG)
        assert a.to_bytes() == c.to_bytes()

    def test_unit_rows(self, proj):
        W, b = proj
        E = encode_document("GB", W, b, CFG).E
        assert E.shape == (1, CFG.dim)
        assert abs(np.linalg.norm(E[0]) - 1.0) < 1e-12

    def test_permutation_equivariant(self, proj):
        W, b = proj
        a = encode_document("disk 500 gb", W, b, CFG).E
        c = encode_document("gb disk 500", W, b, CFG).E
        assert np.array_equal(a[[2, 0, 1]], c)

    def test_empty(self, proj):
        W, b = proj
        assert encode_document("", W, b, CFG).E.shape == (0, CFG.dim)

    def test_no_gate_fields(self):
        from dataclasses import fields

        from numgate.embedder import DocEmbeddings

        assert {f.name for f in fields(DocEmbeddings)} == {"tokens", "E", "doc_id"}


class TestEncodeQuery:
    def test_tau_one_is_neutral(self, proj):
        W, b = proj
        q = encode_query("storage over 500 GB", W, b, mlp_const(30.0), mlp_const(2.0), CFG, tau=1.0)
        assert np.array_equal(q.E, q.ungated)

    def test_quiet_detector_is_neutral(self, proj):
        W, b = proj
        q = encode_query("storage capacity", W, b, mlp_const(-5.0), mlp_const(2.0), CFG, tau=0.5)
        assert np.array_equal(q.E, q.ungated)
        assert not q.numeric_mask.any()

    def test_gated_row_norm(self, proj):
        # sigma(0) = 0.5 and |Q| = 4, so a routed row has norm 2
        W, b = proj
        labels = [False, False, True, False]
        q = encode_query("capacity over 500 gb", W, b, mlp_const(0.0), mlp_const(0.0), CFG, labels=labels)
        norms = np.linalg.norm(q.E, axis=1)
        assert norms[2] == pytest.approx(2.0, abs=1e-12)
        assert np.allclose(norms[[0, 1, 3]], 1.0, atol=1e-12)

    def test_detector_routing(self, proj):
        W, b = proj
        q = encode_query("capacity over 500 gb", W, b, mlp_const(10.0), mlp_const(0.0), CFG, tau=0.5)
        assert q.numeric_mask.all()
        assert np.allclose(np.linalg.norm(q.E, axis=1), 2.0)

    def test_empty_query(self, proj):
        W, b = proj
        with pytest.raises(ValueError):
            encode_query("!!", W, b, mlp_const(0.0), mlp_const(0.0), CFG)

    def test_gate_bounds(self, proj):
        W, b = proj
        rng = np.random.default_rng(3)
        gate = MlpParams.random(CFG.dim, 8, 1, rng, scale=5.0)
        q = encode_query("net profit above 2 million usd this year", W, b, mlp_const(1.0), gate, CFG)
        m = len(q.tokens)
        assert np.all(q.gates > 0) and np.all(q.gates < m)
        assert np.allclose(np.linalg.norm(q.ungated, axis=1), 1.0, atol=1e-6)

    def test_context_only_on_queries(self):
        toks = tokenize("revenue over 500 usd")
        d, q = document_features(toks, CFG), query_features(toks, CFG)
        lo, hi = CFG.context_offset, CFG.context_offset + CFG.context_slots
        assert not d[:, lo:hi].any()
        assert q[:, lo:hi].any()
        assert np.array_equal(np.delete(d, np.s_[lo:hi], axis=1), np.delete(q, np.s_[lo:hi], axis=1))


class TestGate:
    def test_detect_shapes(self):
        det = mlp_const(0.0)
        assert detect(np.zeros(CFG.dim), det) == 0.5
        assert detect(np.zeros((3, CFG.dim)), det).shape == (3,)

    def test_gate_value(self):
        assert gate_value(np.zeros(CFG.dim), 4, mlp_const(0.0)) == 2.0
        with pytest.raises(ValueError):
            gate_value(np.zeros(CFG.dim), 0, mlp_const(0.0))

    def test_disabled_gate(self):
        E = np.eye(3, CFG.dim)
        gated, _, _, _ = apply_gate(E, mlp_const(10.0), mlp_const(3.0), GateConfig(0.5), enabled=False)
        assert np.array_equal(gated, E)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        d = 5
        E = rng.standard_normal((4, d))
        gate = MlpParams.random(d, 3, 1, rng)
        route = np.array([True, False, True, True])
        up = rng.standard_normal((4, d))

        def f(E_):
            g, *_ = apply_gate(E_, mlp_const(0.0, d), gate, route=route)
            return float((g * up).sum())

        _, _, _, cache = apply_gate(E, mlp_const(0.0, d), gate, route=route)
        _, dE = gate_backward(gate, cache, up)
        num = np.zeros_like(E)
        for idx in np.ndindex(E.shape):
            e = np.zeros_like(E)
            e[idx] = 1e-6
            num[idx] = (f(E + e) - f(E - e)) / 2e-6
        assert np.allclose(dE, num, atol=1e-7)


def test_featurizer_transformer():
    feats = HashedTokenFeaturizer().fit_transform(["over 500 GB", "revenue"])
    assert [f.shape for f in feats] == [(3, 512), (1, 512)]
    assert HashedTokenFeaturizer(feature_dim=256).get_params()["feature_dim"] == 256
