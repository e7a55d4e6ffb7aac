"""Compressed late-interaction index with centroid pruning.

Document token embeddings are clustered with k-means; every token stores
its centroid id and a residual quantized per token to ``nbits`` with a
uniform scalar quantizer (offset = min, scale = range / (2^nbits - 1)).
Search probes the ``nprobe`` best centroids of every query row, takes the
union of documents owning tokens there, decompresses those documents and
reranks them with exact MaxSim.

File layout (little-endian, no padding)::

    magic "NCBI" | version u32 | d u32 | k u32 | nbits u8 | n_docs u64 | n_tokens u64
    centroids        k*d f32
    token records    n_tokens * (doc_id u32, centroid_id u32, scale f32, offset f32)
    residual codes   ceil(n_tokens*d*nbits/8) bytes, bit-packed LSB first
    doc lengths      n_docs u32
    raw flag         u8
    raw vectors      n_tokens*d f64 (only when raw flag == 1)
"""

import math
import struct

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .scoring import rank, score_packed

MAGIC = b"NCBI"
VERSION = 1
HEADER = struct.Struct("<4sIIIBQQ")
RECORD_DTYPE = np.dtype([("doc_id", "<u4"), ("centroid_id", "<u4"), ("scale", "<f4"), ("offset", "<f4")])
VALID_NBITS = (1, 2, 4, 8)


class IndexFormatError(ValueError):
    """Malformed index file."""


class BadMagic(IndexFormatError):
    pass


class UnsupportedVersion(IndexFormatError):
    pass


class TruncatedIndex(IndexFormatError):
    pass


def _sq_dists(X, C, c_sq):
    # squared distance up to the per-row constant |x|^2
    return c_sq[None, :] - 2.0 * (X @ C.T)


def _assign(X, C, chunk=32768):
    c_sq = np.einsum("ij,ij->i", C, C)
    labels = np.empty(len(X), dtype=np.int64)
    dists = np.empty(len(X))
    x_sq = np.einsum("ij,ij->i", X, X)
    for lo in range(0, len(X), chunk):
        part = _sq_dists(X[lo:lo + chunk], C, c_sq)
        lab = part.argmin(axis=1)
        labels[lo:lo + chunk] = lab
        dists[lo:lo + chunk] = part[np.arange(len(lab)), lab] + x_sq[lo:lo + chunk]
    return labels, np.maximum(dists, 0.0)


def kmeans_plus_plus(X, k, rng):
    n = len(X)
    centers = np.empty((k, X.shape[1]))
    first = int(rng.integers(n))
    centers[0] = X[first]
    closest = np.einsum("ij,ij->i", X - X[first], X - X[first])
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[c] = X[idx]
        diff = X - X[idx]
        np.minimum(closest, np.einsum("ij,ij->i", diff, diff), out=closest)
    return centers


def kmeans(points, k, iters=20, seed=0):
    """Lloyd's algorithm from a seeded k-means++ start.

    Empty clusters are re-seeded with the points farthest from their
    current centroid.
    """
    X = np.asarray(points, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be positive")
    if len(X) < k:
        raise ValueError(f"need at least k={k} points, got {len(X)}")
    rng = np.random.default_rng(seed)
    C = kmeans_plus_plus(X, k, rng)
    for _ in range(iters):
        labels, dists = _assign(X, C)
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        nonempty = counts > 0
        C_new = C.copy()
        C_new[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if len(empty):
            far = np.argsort(-dists, kind="stable")[: len(empty)]
            C_new[empty] = X[far]
        if np.array_equal(C_new, C):
            break
        C = C_new
    return C


def quantize_residual(r, nbits):
    """Uniform scalar quantization of one residual vector.

    Returns ``(codes, scale, offset)`` with ``r ~ offset + scale * codes``.
    """
    if nbits not in VALID_NBITS:
        raise ValueError(f"nbits must be one of {VALID_NBITS}")
    r = np.asarray(r, dtype=np.float64)
    codes, scale, offset = quantize_rows(r[None, :], nbits)
    return codes[0], float(scale[0]), float(offset[0])


def quantize_rows(R, nbits):
    levels = (1 << nbits) - 1
    offset = R.min(axis=1)
    scale = (R.max(axis=1) - offset) / levels
    safe = np.where(scale > 0, scale, 1.0)
    codes = np.rint((R - offset[:, None]) / safe[:, None])
    codes = np.clip(codes, 0, levels)
    codes[scale == 0] = 0
    return codes.astype(np.uint8), scale, offset


def dequantize_rows(codes, scale, offset):
    return offset[:, None] + scale[:, None] * codes


def pack_codes(codes, nbits):
    flat = np.asarray(codes, dtype=np.uint8).reshape(-1)
    if nbits == 8:
        return flat.tobytes()
    bits = (flat[:, None] >> np.arange(nbits, dtype=np.uint8)) & 1
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def unpack_codes(buf, n_values, nbits):
    raw = np.frombuffer(buf, dtype=np.uint8)
    if nbits == 8:
        return raw[:n_values].copy()
    bits = np.unpackbits(raw, count=n_values * nbits, bitorder="little")
    weights = (1 << np.arange(nbits)).astype(np.uint8)
    return (bits.reshape(n_values, nbits) * weights).sum(axis=1).astype(np.uint8)


def code_region_bytes(n_tokens, dim, nbits):
    return math.ceil(n_tokens * dim * nbits / 8)


def expected_file_size(n_tokens, n_docs, dim, k, nbits, raw=False):
    """Closed-form size of an index file."""
    size = HEADER.size + 4 * k * dim + RECORD_DTYPE.itemsize * n_tokens
    size += code_region_bytes(n_tokens, dim, nbits) + 4 * n_docs + 1
    if raw:
        size += 8 * n_tokens * dim
    return size


def default_k(n_tokens):
    """4*sqrt(N) rounded to the nearest power of two, at least 16 and at most N."""
    target = 4.0 * math.sqrt(max(n_tokens, 1))
    k = 1 << max(int(round(math.log2(target))), 0)
    return int(min(max(k, 16), max(n_tokens, 1)))


class PlaidIndex(BaseEstimator):
    """Centroid-pruned, residual-quantized token index.

    ``fit`` takes a list of per-document ``n_j x d`` embedding matrices; the
    document id of entry ``j`` is ``j``. ``raw_residuals=True`` additionally
    stores the exact f64 token vectors and reranks with them (lossless mode).
    """

    def __init__(self, k_centroids=None, nbits=8, nprobe=8, kmeans_iters=20, seed=0, raw_residuals=False):
        self.k_centroids = k_centroids
        self.nbits = nbits
        self.nprobe = nprobe
        self.kmeans_iters = kmeans_iters
        self.seed = seed
        self.raw_residuals = raw_residuals

    def fit(self, X, y=None):
        if self.nbits not in VALID_NBITS:
            raise ValueError(f"nbits must be one of {VALID_NBITS}")
        docs = [np.asarray(doc, dtype=np.float64) for doc in X]
        if not docs:
            raise ValueError("cannot index an empty corpus")
        if any(doc.ndim != 2 or len(doc) == 0 for doc in docs):
            raise ValueError("every document needs at least one token embedding")
        tokens = np.concatenate(docs)
        if not np.all(np.isfinite(tokens)):
            raise ValueError("non-finite token embeddings")
        n_tokens, dim = tokens.shape
        k = self.k_centroids or default_k(n_tokens)
        if self.nprobe > k:
            raise ValueError("nprobe must not exceed the number of centroids")
        centroids = kmeans(tokens, k, self.kmeans_iters, self.seed).astype(np.float32)
        labels, _ = _assign(tokens, centroids.astype(np.float64))
        residual = tokens - centroids[labels].astype(np.float64)
        codes, scale, offset = quantize_rows(residual, self.nbits)
        lengths = np.array([len(d) for d in docs], dtype=np.uint32)
        records = np.empty(n_tokens, dtype=RECORD_DTYPE)
        records["doc_id"] = np.repeat(np.arange(len(docs), dtype=np.uint32), lengths)
        records["centroid_id"] = labels
        records["scale"] = scale
        records["offset"] = offset
        raw = tokens.copy() if self.raw_residuals else None
        self._set_state(centroids, records, codes, lengths, raw)
        return self

    def _set_state(self, centroids, records, codes, lengths, raw):
        self.centroids_ = centroids
        self.records_ = records
        self.codes_ = codes  # unpacked (n_tokens, d) uint8
        self.doc_lengths_ = lengths
        self.raw_vectors_ = raw
        self.doc_offsets_ = np.zeros(len(lengths) + 1, dtype=np.int64)
        np.cumsum(lengths, out=self.doc_offsets_[1:])
        self.k_ = len(centroids)
        self.n_docs_ = len(lengths)
        self.n_tokens_ = len(records)
        self.dim_ = centroids.shape[1]
        # centroid -> sorted unique doc ids (CSR)
        cid = records["centroid_id"].astype(np.int64)
        order = np.lexsort((records["doc_id"], cid))
        pairs = np.stack([cid[order], records["doc_id"][order].astype(np.int64)], axis=1)
        keep = np.ones(len(pairs), dtype=bool)
        keep[1:] = np.any(pairs[1:] != pairs[:-1], axis=1)
        pairs = pairs[keep]
        self.postings_ = pairs[:, 1].astype(np.int64)
        self.posting_offsets_ = np.zeros(self.k_ + 1, dtype=np.int64)
        np.cumsum(np.bincount(pairs[:, 0], minlength=self.k_), out=self.posting_offsets_[1:])
        self._scale32 = records["scale"].astype(np.float32)
        self._offset32 = records["offset"].astype(np.float32)
        self._cid = cid

    # -- reconstruction -------------------------------------------------

    def token_ids_of(self, doc_ids):
        doc_ids = np.asarray(doc_ids, dtype=np.int64)
        starts = self.doc_offsets_[doc_ids]
        lengths = self.doc_offsets_[doc_ids + 1] - starts
        total = int(lengths.sum())
        shift = np.repeat(starts - np.concatenate(([0], np.cumsum(lengths)[:-1])), lengths)
        return np.arange(total, dtype=np.int64) + shift, lengths

    def decompress(self, token_ids):
        """Reconstruction of the given tokens (f32, or the stored f64 rows in lossless mode)."""
        if self.raw_vectors_ is not None:
            return self.raw_vectors_[token_ids]
        out = self.codes_[token_ids].astype(np.float32)
        out *= self._scale32[token_ids, None]
        out += self._offset32[token_ids, None]
        out += self.centroids_[self._cid[token_ids]]
        return out

    def reconstruct(self):
        return self.decompress(np.arange(self.n_tokens_))

    # -- search ---------------------------------------------------------

    def candidates(self, Q, nprobe=None):
        """Sorted doc ids owning a token in any query row's top-``nprobe`` centroids."""
        check_is_fitted(self, "centroids_")
        nprobe = self.nprobe if nprobe is None else nprobe
        if nprobe >= self.k_:
            return np.arange(self.n_docs_)
        cs = np.asarray(Q, dtype=np.float32) @ self.centroids_.T
        top = np.argpartition(-cs, nprobe - 1, axis=1)[:, :nprobe]
        probed = np.unique(top)
        mask = np.zeros(self.n_docs_, dtype=bool)
        lo, hi = self.posting_offsets_[probed], self.posting_offsets_[probed + 1]
        for a, b in zip(lo, hi):
            mask[self.postings_[a:b]] = True
        return np.flatnonzero(mask)

    def search(self, Q, top_k=10, nprobe=None):
        """Top-``top_k`` ``(doc_id, score)`` pairs for gated query rows ``Q``."""
        if top_k < 1:
            raise ValueError("top_k must be >= 1")
        Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
        cand = self.candidates(Q, nprobe)
        if len(cand) == 0:
            return []
        token_ids, lengths = self.token_ids_of(cand)
        vectors = self.decompress(token_ids)
        offsets = np.zeros(len(cand) + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        scores = score_packed(Q, vectors, offsets)
        return rank(scores, cand, top_k)

    # -- sizes and serialization -----------------------------------------

    def code_bytes(self):
        return code_region_bytes(self.n_tokens_, self.dim_, self.nbits)

    def to_bytes(self):
        check_is_fitted(self, "centroids_")
        parts = [
            HEADER.pack(MAGIC, VERSION, self.dim_, self.k_, self.nbits, self.n_docs_, self.n_tokens_),
            self.centroids_.astype("<f4").tobytes(),
            self.records_.astype(RECORD_DTYPE).tobytes(),
            pack_codes(self.codes_, self.nbits),
            self.doc_lengths_.astype("<u4").tobytes(),
            bytes([1 if self.raw_vectors_ is not None else 0]),
        ]
        if self.raw_vectors_ is not None:
            parts.append(self.raw_vectors_.astype("<f8").tobytes())
        return b"".join(parts)

    def save(self, path):
        data = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(data)
        return len(data)

    @classmethod
    def from_bytes(cls, data, nprobe=8):
        if len(data) < HEADER.size:
            raise TruncatedIndex("file shorter than header")
        magic, version, d, k, nbits, n_docs, n_tokens = HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise BadMagic(f"bad magic {magic!r}")
        if version != VERSION:
            raise UnsupportedVersion(f"index version {version} not supported")
        if nbits not in VALID_NBITS:
            raise IndexFormatError(f"invalid nbits {nbits}")
        pos = HEADER.size

        def take(n):
            nonlocal pos
            if pos + n > len(data):
                raise TruncatedIndex(f"need {pos + n} bytes, file has {len(data)}")
            chunk = data[pos:pos + n]
            pos += n
            return chunk

        centroids = np.frombuffer(take(4 * k * d), dtype="<f4").reshape(k, d).astype(np.float32)
        records = np.frombuffer(take(RECORD_DTYPE.itemsize * n_tokens), dtype=RECORD_DTYPE).copy()
        codes = unpack_codes(take(code_region_bytes(n_tokens, d, nbits)), n_tokens * d, nbits)
        codes = codes.reshape(n_tokens, d)
        lengths = np.frombuffer(take(4 * n_docs), dtype="<u4").astype(np.uint32)
        raw_flag = take(1)[0]
        raw = None
        if raw_flag == 1:
            raw = np.frombuffer(take(8 * n_tokens * d), dtype="<f8").reshape(n_tokens, d).astype(np.float64)
        elif raw_flag != 0:
            raise IndexFormatError(f"invalid raw flag {raw_flag}")
        if pos != len(data):
            raise IndexFormatError(f"{len(data) - pos} trailing bytes")
        if int(lengths.sum()) != n_tokens:
            raise IndexFormatError("doc lengths do not sum to n_tokens")
        if n_tokens and int(records["centroid_id"].max()) >= k:
            raise IndexFormatError("centroid id out of range")

        index = cls(k_centroids=k, nbits=nbits, nprobe=min(nprobe, k), raw_residuals=raw is not None)
        index._set_state(centroids, records, codes, lengths, raw)
        return index

    @classmethod
    def load(cls, path, nprobe=8):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), nprobe=nprobe)


def build_index(corpus, k_centroids=None, nbits=8, nprobe=8, kmeans_iters=20, seed=0, raw_residuals=False):
    """Fit a :class:`PlaidIndex` on a list of ``DocEmbeddings`` or matrices."""
    docs = [getattr(doc, "E", doc) for doc in corpus]
    return PlaidIndex(k_centroids, nbits, nprobe, kmeans_iters, seed, raw_residuals).fit(docs)
