import numpy as np
import pytest

from numgate.index import (
    BadMagic,
    IndexFormatError,
    PlaidIndex,
    TruncatedIndex,
    UnsupportedVersion,
    build_index,
    code_region_bytes,
    dequantize_rows,
    expected_file_size,
    kmeans,
    pack_codes,
    quantize_residual,
    unpack_codes,
)
from numgate.scoring import (
    NoNumericTokens,
    brute_force_search,
    maxsim,
    mean_pool_numeric,
    pack_documents,
    rank,
    s_cont,
    score_packed,
)


def unit_rows(rng, n, d):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


@pytest.fixture(scope="module")
def corpus():
    rng = np.random.default_rng(0)
    return [unit_rows(rng, int(rng.integers(3, 9)), 8) for _ in range(150)]


class TestMaxSim:
    def test_hand_example(self):
        Q = np.array([[1.0, 0.0], [0.0, 1.0]])
        D = np.array([[0.6, 0.8], [1.0, 0.0]])
        s = maxsim(Q, D)
        assert s.value == pytest.approx(1.8)
        assert list(s.per_token_argmax) == [1, 0]

    def test_tie_takes_first(self):
        s = maxsim(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]))
        assert s.per_token_argmax[0] == 1

    def test_empty_doc(self):
        with pytest.raises(ValueError):
            maxsim(np.ones((1, 2)), np.zeros((0, 2)))

    def test_packed_matches_loop(self, corpus):
        rng = np.random.default_rng(1)
        Q = unit_rows(rng, 5, 8)
        tokens, offsets = pack_documents(corpus)
        fast = score_packed(Q, tokens, offsets, chunk=50)
        slow = [maxsim(Q, D).value for D in corpus]
        assert np.allclose(fast, slow, atol=1e-12)

    def test_s_cont(self):
        assert s_cont(np.array([1.0, 0.0]), np.array([[0.2, 0.9], [0.5, 0.5]])) == 0.5

    def test_mean_pool_requires_numeric(self):
        from numgate.embedder import QueryEmbeddings

        q = QueryEmbeddings(["a"], np.ones((1, 2)), np.ones((1, 2)), np.zeros(1), np.ones(1), np.zeros(1, bool))
        with pytest.raises(NoNumericTokens):
            mean_pool_numeric(q)

    def test_rank_ties_by_id(self):
        assert rank(np.array([1.0, 2.0, 2.0]), np.array([7, 5, 3])) == [(3, 2.0), (5, 2.0), (7, 1.0)]


class TestKMeans:
    def test_separated_blobs(self):
        rng = np.random.default_rng(0)
        centers = np.array([[0, 0], [10, 0], [0, 10]], float)
        X = np.concatenate([c + 0.1 * rng.standard_normal((50, 2)) for c in centers])
        C = kmeans(X, 3, iters=20, seed=0)
        found = sorted(map(tuple, np.round(C).astype(int)))
        assert found == [(0, 0), (0, 10), (10, 0)]

    def test_deterministic(self, corpus):
        X = np.concatenate(corpus)
        assert np.array_equal(kmeans(X, 8, 10, 3), kmeans(X, 8, 10, 3))


class TestQuantization:
    @pytest.mark.parametrize("nbits", [1, 2, 4, 8])
    def test_error_bound(self, nbits):
        rng = np.random.default_rng(nbits)
        r = rng.standard_normal(16)
        codes, scale, offset = quantize_residual(r, nbits)
        back = dequantize_rows(codes[None, :], np.array([scale]), np.array([offset]))[0]
        assert np.max(np.abs(back - r)) <= scale / 2 + 1e-6

    def test_constant_residual(self):
        codes, scale, offset = quantize_residual(np.full(4, 0.25), 4)
        assert not codes.any()
        assert offset == pytest.approx(0.25)

    @pytest.mark.parametrize("nbits", [1, 2, 4, 8])
    def test_pack_round_trip(self, nbits):
        rng = np.random.default_rng(0)
        codes = rng.integers(0, 2 ** nbits, size=(7, 5)).astype(np.uint8)
        buf = pack_codes(codes, nbits)
        assert len(buf) == code_region_bytes(7, 5, nbits)
        assert np.array_equal(unpack_codes(buf, 35, nbits).reshape(7, 5), codes)

    def test_lsb_first(self):
        assert pack_codes(np.array([[1, 0, 0, 0, 0, 0, 0, 0]], np.uint8), 1) == b"\x01"
        assert pack_codes(np.array([[3, 0, 0, 1]], np.uint8), 2) == bytes([0b01000011])


class TestIndex:
    def test_size_formula(self, corpus):
        for nbits in (1, 2, 4, 8):
            idx = build_index(corpus, k_centroids=8, nbits=nbits)
            n_tok = sum(len(d) for d in corpus)
            assert len(idx.to_bytes()) == expected_file_size(n_tok, len(corpus), 8, 8, nbits)

    def test_round_trip(self, corpus, tmp_path):
        idx = build_index(corpus, k_centroids=8, nbits=4)
        path = tmp_path / "x.idx"
        idx.save(path)
        again = PlaidIndex.load(path)
        assert again.to_bytes() == idx.to_bytes()
        Q = corpus[3][:2]
        assert again.search(Q, 5, 3) == idx.search(Q, 5, 3)

    def test_lossless_matches_brute_force(self, corpus):
        idx = build_index(corpus, k_centroids=8, raw_residuals=True)
        rng = np.random.default_rng(5)
        for _ in range(10):
            Q = unit_rows(rng, 4, 8) * rng.uniform(0.5, 3.0, (4, 1))
            exact = brute_force_search(Q, corpus, top_k=150)
            assert idx.search(Q, 150, nprobe=8) == exact

    def test_nprobe_restricts_candidates(self, corpus):
        idx = build_index(corpus, k_centroids=16)
        Q = corpus[0][:1]
        assert len(idx.candidates(Q, 1)) < len(corpus)
        assert set(idx.candidates(Q, 1)) <= set(idx.candidates(Q, 4))
        assert 0 in idx.candidates(Q, 1)

    def test_reconstruction_close(self, corpus):
        idx = build_index(corpus, k_centroids=8, nbits=8)
        X = np.concatenate(corpus)
        assert np.max(np.abs(idx.reconstruct() - X)) < 1e-2

    def test_rejects_bad_files(self, corpus):
        data = build_index(corpus, k_centroids=8).to_bytes()
        with pytest.raises(BadMagic):
            PlaidIndex.from_bytes(b"XXXX" + data[4:])
        with pytest.raises(UnsupportedVersion):
            PlaidIndex.from_bytes(data[:4] + (9).to_bytes(4, "little") + data[8:])
        with pytest.raises(TruncatedIndex):
            PlaidIndex.from_bytes(data[:-10])
        with pytest.raises(IndexFormatError):
            PlaidIndex.from_bytes(data + b"\0")

    def test_rejects_bad_config(self, corpus):
        with pytest.raises(ValueError):
            PlaidIndex(nbits=3).fit(corpus)
        with pytest.raises(ValueError):
            PlaidIndex(k_centroids=4, nprobe=8).fit(corpus)
        with pytest.raises(ValueError):
            PlaidIndex().fit([np.zeros((0, 8))])
