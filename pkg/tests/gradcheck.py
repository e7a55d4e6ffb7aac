"""Shared fixtures for finite-difference gradient checks on tiny models."""

import numpy as np

from numgate.losses import PROP_TERMS, TrainingBatch, compute_losses, unit_classes
from numgate.params import ModelParams, ModelShape
from numgate.quantity import Cmp, NumericalCondition, Quantity

SHAPE = ModelShape(dim=6, feature_dim=10, hidden=4, prop_hidden=3, n_unit_classes=len(unit_classes()))
STEP = 1e-6


def random_batch(rng, B=2):
    """``B`` triples of random features with mixed units, values and operators."""
    qf, ql, conds = [], [], []
    for _ in range(B):
        m = int(rng.integers(3, 6))
        qf.append(rng.standard_normal((m, SHAPE.feature_dim)))
        labels = np.zeros(m, dtype=bool)
        labels[rng.choice(m, size=int(rng.integers(1, 3)), replace=False)] = True
        ql.append(labels)
        conds.append(NumericalCondition(float(rng.uniform(10, 90)), list(Cmp)[rng.integers(3)], "GB"))
    docs = [rng.standard_normal((int(rng.integers(2, 6)), SHAPE.feature_dim)) for _ in range(2 * B)]
    units = ["GB", "TB", "MB", "KG"]
    quantities = [Quantity(float(rng.uniform(0.01, 100)), units[rng.integers(4)]) for _ in range(2 * B)]
    return TrainingBatch(qf, ql, docs, conds, quantities)


def random_params(rng):
    params = ModelParams.init(SHAPE, seed=int(rng.integers(1 << 30)))
    params.vector[...] += 0.3 * rng.standard_normal(params.vector.shape)
    return params


def numeric_gradients(fn, params, step=STEP):
    """Central differences of every entry of the dict returned by ``fn``."""
    v = params.vector
    grads = {}
    for i in range(v.size):
        old = v[i]
        v[i] = old + step
        hi = fn(params)
        v[i] = old - step
        lo = fn(params)
        v[i] = old
        for key in hi:
            grads.setdefault(key, np.zeros_like(v))[i] = (hi[key] - lo[key]) / (2 * step)
    return grads


def block_errors(params, analytic, numeric, floor=1e-4):
    """Per-block relative error ``|a - n|_2 / max(|a|_2 + |n|_2, floor)``."""
    out = {}
    for name, slices in params.group_slices().items():
        a = np.concatenate([analytic[s] for s in slices])
        n = np.concatenate([numeric[s] for s in slices])
        out[name] = float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), floor))
    return out


def objectives(cfg):
    """Name to ``(weights, prop_terms)`` for each checked objective under ``cfg``."""
    w = {"loss": (None, PROP_TERMS), "ret": ({"ret": 1.0}, PROP_TERMS), "cont": ({"cont": 1.0}, PROP_TERMS),
         "det": ({"det": 1.0}, PROP_TERMS)}
    for term in PROP_TERMS:
        w[term] = ({"prop": 1.0}, (term,))
    return w


def check_all(params, batch, cfg):
    """Worst per-block relative error of each objective, from one finite-difference sweep."""
    targets = objectives(cfg)

    def values(p):
        parts = dict(compute_losses(p, batch, cfg, weights={}).parts)
        parts["loss"] = parts["ret"] + cfg.lambda_cont * parts["cont"] + cfg.lambda_det * parts["det"] \
            + cfg.lambda_prop * parts["prop"]
        return {k: parts[k] for k in targets}

    numeric = numeric_gradients(values, params)
    worst = {}
    for name, (weights, terms) in targets.items():
        analytic = compute_losses(params, batch, cfg, weights, prop_terms=terms).grad.vector
        worst[name] = max(block_errors(params, analytic, numeric[name]).values())
    return worst
