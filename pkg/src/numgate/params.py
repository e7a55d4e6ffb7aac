"""Flat parameter vector with named views, plus the binary checkpoint format.

Checkpoint layout (little-endian)::

    magic "NCBM" | version u32 | d u32 | f u32 | seed u64 | h u32 | h_prop u32 | n_unit_classes u32
    all parameter blocks as f64, in LAYOUT order
"""

import struct
from dataclasses import dataclass

import numpy as np

from .embedder import init_projection
from .gate import MlpParams

MAGIC = b"NCBM"
VERSION = 1
HEADER = struct.Struct("<4sIIIQIII")

HEADS = ("unit", "mant", "expo", "cond")
MLPS = ("det", "gate") + HEADS


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelShape:
    dim: int
    feature_dim: int
    hidden: int = 32
    prop_hidden: int = 32
    n_unit_classes: int = 31

    def head_outputs(self, name):
        return {"det": 1, "gate": 1, "unit": self.n_unit_classes, "mant": 1, "expo": 1, "cond": 3}[name]

    def layout(self):
        d, f = self.dim, self.feature_dim
        blocks = [("proj.W", (d, f)), ("proj.b", (d,))]
        for name in MLPS:
            h = self.hidden if name in ("det", "gate") else self.prop_hidden
            k = self.head_outputs(name)
            blocks += [(f"{name}.W1", (h, d)), (f"{name}.b1", (h,)), (f"{name}.W2", (k, h)), (f"{name}.b2", (k,))]
        return blocks


class ModelParams:
    """All trainable parameters in one f64 vector; blocks are views into it."""

    def __init__(self, shape, vector=None):
        self.shape = shape
        self.layout = shape.layout()
        size = sum(int(np.prod(s)) for _, s in self.layout)
        if vector is None:
            vector = np.zeros(size)
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (size,):
            raise ValueError(f"expected {size} parameters, got {vector.shape}")
        self.vector = vector
        self.blocks = {}
        self.slices = {}
        pos = 0
        for name, s in self.layout:
            n = int(np.prod(s))
            self.slices[name] = slice(pos, pos + n)
            self.blocks[name] = vector[pos:pos + n].reshape(s)
            pos += n

    def __getitem__(self, name):
        return self.blocks[name]

    def mlp(self, name):
        return MlpParams(self[f"{name}.W1"], self[f"{name}.b1"], self[f"{name}.W2"], self[f"{name}.b2"])

    @property
    def W(self):
        return self["proj.W"]

    @property
    def b(self):
        return self["proj.b"]

    def zeros_like(self):
        return ModelParams(self.shape)

    def copy(self):
        return ModelParams(self.shape, self.vector.copy())

    def group_slices(self):
        """Parameter groups used for per-block gradient checks."""
        groups = {"proj": [self.slices["proj.W"], self.slices["proj.b"]]}
        for name in MLPS:
            groups[name] = [self.slices[f"{name}.{p}"] for p in ("W1", "b1", "W2", "b2")]
        return groups

    @classmethod
    def init(cls, shape, seed=0):
        params = cls(shape)
        W, b = init_projection(shape.dim, shape.feature_dim, np.random.default_rng(seed))
        params["proj.W"][...] = W
        params["proj.b"][...] = b
        rng = np.random.default_rng([seed, 1])
        for name in MLPS:
            h = shape.hidden if name in ("det", "gate") else shape.prop_hidden
            mlp = MlpParams.random(shape.dim, h, shape.head_outputs(name), rng)
            for part in ("W1", "b1", "W2", "b2"):
                params[f"{name}.{part}"][...] = getattr(mlp, part)
        return params


def save_checkpoint(path, params, seed):
    s = params.shape
    header = HEADER.pack(MAGIC, VERSION, s.dim, s.feature_dim, seed, s.hidden, s.prop_hidden, s.n_unit_classes)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(params.vector.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(params, seed)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, d, f, seed, h, hp, n_units = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    shape = ModelShape(d, f, h, hp, n_units)
    body = data[HEADER.size:]
    size = sum(int(np.prod(sz)) for _, sz in shape.layout())
    if len(body) != 8 * size:
        raise CheckpointError(f"expected {8 * size} parameter bytes, found {len(body)}")
    return ModelParams(shape, np.frombuffer(body, dtype="<f8").copy()), seed
