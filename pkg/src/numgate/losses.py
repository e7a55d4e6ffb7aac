"""Training objectives with exact analytic gradients.

All four losses share one forward pass over an in-batch candidate set
``[D_1^+, ..., D_B^+, D_1^-, ..., D_B^-]``:

* retrieval: in-batch softmax cross-entropy over gated MaxSim scores;
* contrastive: multi-positive InfoNCE over ``max_j q_num . d_j``;
* detection: token-level binary cross-entropy of the detector;
* property: unit / mantissa / exponent / operator heads on ``q_num``.

Gradients are accumulated into a :class:`ModelParams` of the same layout.
"""

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .embedder import project
from .gate import mlp_backward, mlp_forward, sigmoid
from .params import HEADS
from .quantity import DEFAULT_UNITS, Cmp, satisfies, to_scientific, units_compatible

log = logging.getLogger(__name__)

CMP_CLASSES = (Cmp.EQ, Cmp.GT, Cmp.LT)
PROP_TERMS = ("unit", "mant", "expo", "cond")


class Strategy(str, enum.Enum):
    UNIT_ONLY = "unit_only"
    NUMERIC_ONLY = "numeric_only"
    JOINT = "joint"
    SEPARATE = "separate"


@dataclass(frozen=True)
class LossConfig:
    tau_ret: float = 0.02
    tau_cont: float = 0.02
    lambda_cont: float = 0.05
    lambda_det: float = 0.05
    lambda_prop: float = 0.05
    strategy: Strategy = Strategy.UNIT_ONLY
    gate_tau: float = 0.5
    gate_enabled: bool = True
    teacher_forcing: bool = True
    pool_gated: bool = False
    eq_tolerance: float = 1e-9

    def __post_init__(self):
        if self.tau_ret <= 0 or self.tau_cont <= 0:
            raise ValueError("temperatures must be positive")
        if min(self.lambda_cont, self.lambda_det, self.lambda_prop) < 0:
            raise ValueError("loss weights must be non-negative")
        object.__setattr__(self, "strategy", Strategy(self.strategy))


def unit_classes(table=DEFAULT_UNITS):
    """Unit-head class labels: every table unit, then ``None``."""
    return table.ids() + [None]


@dataclass
class TrainingBatch:
    """Featurized triples. Candidates are ordered positives first, then negatives."""

    query_feats: list
    query_labels: list
    doc_feats: list
    conditions: list
    doc_quantities: list
    query_texts: list = field(default_factory=list)

    @property
    def size(self):
        return len(self.query_feats)

    def __post_init__(self):
        if len(self.doc_feats) != 2 * len(self.query_feats):
            raise ValueError("candidate set must hold exactly 2B documents")


def build_positive_set(cond, doc_quantities, strategy, eq_tolerance=1e-9, table=DEFAULT_UNITS):
    """Boolean positive mask over candidates (a pair of masks for ``SEPARATE``)."""
    strategy = Strategy(strategy)
    unit = np.array([q is not None and units_compatible(q.unit, cond.unit, table) for q in doc_quantities], dtype=bool)
    numeric = np.array(
        [q is not None and satisfies(q, cond, eq_tolerance, table) is True for q in doc_quantities], dtype=bool
    )
    if strategy is Strategy.UNIT_ONLY:
        return unit
    if strategy is Strategy.NUMERIC_ONLY:
        return numeric
    if strategy is Strategy.JOINT:
        return unit & numeric
    return unit, numeric


def prop_targets(cond, table=DEFAULT_UNITS):
    """``(unit class, mantissa, exponent, operator class)`` for a condition."""
    classes = unit_classes(table)
    sci = to_scientific(cond.value)
    return classes.index(cond.unit), sci.mantissa, float(sci.exponent), CMP_CLASSES.index(cond.cmp)


@dataclass
class LossResult:
    total: float
    parts: dict
    grad: object
    scores: np.ndarray = None
    num_probs: np.ndarray = None


def _log_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _segments(mats):
    lengths = np.array([len(m) for m in mats], dtype=np.int64)
    offsets = np.zeros(len(mats) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    return lengths, offsets


def _multi_positive_infonce(scores, pos, tau):
    """Loss and d loss / d scores for rows with at least one positive."""
    keep = pos.any(axis=1)
    grad = np.zeros_like(scores)
    if not keep.any():
        return 0.0, grad, 0
    logits = scores / tau
    logp = _log_softmax(logits)
    n_pos = pos.sum(axis=1)
    per_query = -(np.where(pos, logp, 0.0).sum(axis=1)) / np.maximum(n_pos, 1)
    K = int(keep.sum())
    loss = float(per_query[keep].sum() / K)
    soft = np.exp(logp)
    d_logits = (soft - pos / np.maximum(n_pos, 1)[:, None]) / K
    d_logits[~keep] = 0.0
    return loss, d_logits / tau, K


def compute_losses(params, batch, cfg=LossConfig(), weights=None, prop_terms=PROP_TERMS, table=DEFAULT_UNITS):
    """Weighted sum of the objectives and its gradient.

    ``weights`` maps ``ret/cont/det/prop`` to coefficients; by default the
    composite ``ret + lambda_cont*cont + lambda_det*det + lambda_prop*prop``.
    ``prop_terms`` restricts which property-head terms enter ``prop``.
    """
    if weights is None:
        weights = {"ret": 1.0, "cont": cfg.lambda_cont, "det": cfg.lambda_det, "prop": cfg.lambda_prop}
    w_ret, w_cont = weights.get("ret", 0.0), weights.get("cont", 0.0)
    w_det, w_prop = weights.get("det", 0.0), weights.get("prop", 0.0)

    B = batch.size
    W, b = params.W, params.b
    grad = params.zeros_like()

    # --- encode -----------------------------------------------------------
    q_len, q_off = _segments(batch.query_feats)
    Xq = np.concatenate(batch.query_feats)
    Eq, _, q_norm = project(Xq, W, b)
    M = len(Eq)
    qid = np.repeat(np.arange(B), q_len)
    labels = np.concatenate(batch.query_labels).astype(float)

    d_len, d_off = _segments(batch.doc_feats)
    Xd = np.concatenate(batch.doc_feats)
    Ed, _, d_norm = project(Xd, W, b)
    n_cand = 2 * B
    n_max = int(d_len.max())
    valid = np.arange(n_max)[None, :] < d_len[:, None]
    pad_idx = np.where(valid, d_off[:-1, None] + np.arange(n_max)[None, :], 0)
    Epad = np.where(valid[..., None], Ed[pad_idx], 0.0)

    # --- gating -----------------------------------------------------------
    det, gate = params.mlp("det"), params.mlp("gate")
    z_det, det_cache = mlp_forward(det, Eq)
    p_num = sigmoid(z_det[:, 0])
    z_gate, gate_cache = mlp_forward(gate, Eq)
    sig = sigmoid(z_gate[:, 0])
    row_len = q_len[qid].astype(float)
    g = row_len * sig
    route = labels > 0.5 if cfg.teacher_forcing else p_num > cfg.gate_tau
    route = route & cfg.gate_enabled
    c = np.where(route, g, 1.0)
    Qt = c[:, None] * Eq

    dEq = np.zeros_like(Eq)
    dQt = np.zeros_like(Eq)
    dEd = np.zeros_like(Ed)
    parts = {}

    def scatter_docs(coef, arg, vecs_of):
        # dEd[pad_idx[j, arg[r, j]]] += coef[r, j] * vecs_of[r]
        rows = pad_idx[np.arange(n_cand)[None, :], arg]
        R = coef.shape[0]
        mat = sparse.coo_matrix(
            (coef.ravel(), (rows.ravel(), np.repeat(np.arange(R), n_cand))), shape=(len(Ed), R)
        ).tocsr()
        dEd[...] += mat @ vecs_of

    # --- retrieval --------------------------------------------------------
    sim = np.einsum("md,jtd->mjt", Qt, Epad)
    sim[:, ~valid] = -np.inf
    arg = sim.argmax(axis=2)
    tok_max = np.take_along_axis(sim, arg[..., None], axis=2)[..., 0]
    S = np.add.reduceat(tok_max, q_off[:-1], axis=0)
    logp = _log_softmax(S / cfg.tau_ret)
    parts["ret"] = float(-logp[np.arange(B), np.arange(B)].mean())
    if w_ret:
        d_logits = np.exp(logp)
        d_logits[np.arange(B), np.arange(B)] -= 1.0
        dS = w_ret * d_logits / (B * cfg.tau_ret)
        dT = dS[qid]
        G = Epad[np.arange(n_cand)[None, :], arg]
        dQt += np.einsum("mj,mjd->md", dT, G)
        scatter_docs(dT, arg, Qt)

    # --- pooled numeric embedding ------------------------------------------
    has_num = np.add.reduceat(labels, q_off[:-1]) > 0
    counts = np.maximum(np.add.reduceat(labels, q_off[:-1]), 1.0)
    pool = sparse.csr_matrix((labels / counts[qid], (qid, np.arange(M))), shape=(B, M))
    pool_rows = Qt if cfg.pool_gated else Eq
    q_num = pool @ pool_rows
    d_qnum = np.zeros_like(q_num)
    has_cond = np.array([cond is not None for cond in batch.conditions], dtype=bool)
    usable = has_num & has_cond

    # --- contrastive --------------------------------------------------------
    simc = np.einsum("kd,jtd->kjt", q_num, Epad)
    simc[:, ~valid] = -np.inf
    argc = simc.argmax(axis=2)
    Sc = np.take_along_axis(simc, argc[..., None], axis=2)[..., 0]
    masks = []
    for k, cond in enumerate(batch.conditions):
        if not usable[k]:
            masks.append(None)
            continue
        masks.append(build_positive_set(cond, batch.doc_quantities, cfg.strategy, cfg.eq_tolerance, table))
    objectives = [0, 1] if cfg.strategy is Strategy.SEPARATE else [None]
    cont_total, d_Sc = 0.0, np.zeros_like(Sc)
    for which in objectives:
        P = np.zeros((B, n_cand), dtype=bool)
        for k, m in enumerate(masks):
            if m is not None:
                P[k] = m if which is None else m[which]
        loss, dsc, K = _multi_positive_infonce(Sc, P, cfg.tau_cont)
        if K == 0:
            log.debug("contrastive objective has no query with a positive")
        cont_total += loss / len(objectives)
        d_Sc += dsc / len(objectives)
    parts["cont"] = cont_total
    if w_cont:
        d_Sc *= w_cont
        G = Epad[np.arange(n_cand)[None, :], argc]
        d_qnum += np.einsum("kj,kjd->kd", d_Sc, G)
        scatter_docs(d_Sc, argc, q_num)

    # --- detection ----------------------------------------------------------
    z = z_det[:, 0]
    parts["det"] = float(np.mean(np.logaddexp(0.0, z) - labels * z))
    if w_det:
        dz = w_det * (p_num - labels) / M
        dW1, db1, dW2, db2, dX = mlp_backward(det, det_cache, dz[:, None])
        for name, val in zip(("W1", "b1", "W2", "b2"), (dW1, db1, dW2, db2)):
            grad[f"det.{name}"][...] += val
        dEq += dX

    # --- property heads -----------------------------------------------------
    prop_idx = np.flatnonzero(usable)
    term_totals = dict.fromkeys(PROP_TERMS, 0.0)
    if len(prop_idx):
        targets = [prop_targets(batch.conditions[k], table) for k in prop_idx]
        x = q_num[prop_idx]
        n = len(prop_idx)
        for head in HEADS:
            mlp = params.mlp(head)
            out, cache = mlp_forward(mlp, x)
            if head in ("unit", "cond"):
                col = 0 if head == "unit" else 3
                tgt = np.array([t[col] for t in targets])
                lp = _log_softmax(out)
                term = float(-lp[np.arange(n), tgt].mean())
                d_out = np.exp(lp)
                d_out[np.arange(n), tgt] -= 1.0
                d_out /= n
            else:
                col = 1 if head == "mant" else 2
                tgt = np.array([t[col] for t in targets])
                resid = out[:, 0] - tgt
                term = float(np.mean(resid**2))
                d_out = (2.0 * resid / n)[:, None]
            term_totals[head] = term
            if w_prop and head in prop_terms:
                dW1, db1, dW2, db2, dx = mlp_backward(mlp, cache, w_prop * d_out)
                for name, val in zip(("W1", "b1", "W2", "b2"), (dW1, db1, dW2, db2)):
                    grad[f"{head}.{name}"][...] += val
                d_qnum[prop_idx] += dx
    parts.update(term_totals)
    parts["prop"] = float(sum(term_totals[t] for t in prop_terms))

    # --- back through pooling, gate and normalization -----------------------
    d_pool_rows = pool.T @ d_qnum
    if cfg.pool_gated:
        dQt += d_pool_rows
    else:
        dEq += d_pool_rows
    scale = c
    dEq += scale[:, None] * dQt
    dg = np.where(route, np.einsum("md,md->m", Eq, dQt), 0.0)
    if np.any(dg):
        dz_gate = (dg * row_len * sig * (1.0 - sig))[:, None]
        dW1, db1, dW2, db2, dX = mlp_backward(gate, gate_cache, dz_gate)
        for name, val in zip(("W1", "b1", "W2", "b2"), (dW1, db1, dW2, db2)):
            grad[f"gate.{name}"][...] += val
        dEq += dX

    dUq = (dEq - Eq * np.einsum("md,md->m", Eq, dEq)[:, None]) / q_norm[:, None]
    dUd = (dEd - Ed * np.einsum("nd,nd->n", Ed, dEd)[:, None]) / d_norm[:, None]
    grad["proj.W"][...] += dUq.T @ Xq + dUd.T @ Xd
    grad["proj.b"][...] += dUq.sum(axis=0) + dUd.sum(axis=0)

    total = w_ret * parts["ret"] + w_cont * parts["cont"] + w_det * parts["det"] + w_prop * parts["prop"]
    parts["loss"] = total
    return LossResult(total, parts, grad, scores=S, num_probs=p_num)


def l_ret(batch, params, tau_ret=0.02, cfg=None):
    cfg = cfg or LossConfig(tau_ret=tau_ret)
    return compute_losses(params, batch, cfg, {"ret": 1.0})


def l_cont(batch, params, tau_cont=0.02, strategy=Strategy.UNIT_ONLY, cfg=None):
    cfg = cfg or LossConfig(tau_cont=tau_cont, strategy=strategy)
    return compute_losses(params, batch, cfg, {"cont": 1.0})


def l_det(batch, params, cfg=None):
    return compute_losses(params, batch, cfg or LossConfig(), {"det": 1.0})


def l_prop(batch, params, cfg=None, terms=PROP_TERMS):
    return compute_losses(params, batch, cfg or LossConfig(), {"prop": 1.0}, prop_terms=terms)


def composite(batch, params, cfg=LossConfig()):
    return compute_losses(params, batch, cfg)


# Scalar reference forms, used by tests and as documentation of each formula.


def retrieval_loss_from_scores(S, tau):
    """In-batch cross-entropy for a ``B x 2B`` score matrix (positive of row k at column k)."""
    S = np.asarray(S, dtype=float)
    logp = _log_softmax(S / tau)
    B = S.shape[0]
    return float(-logp[np.arange(B), np.arange(B)].mean())


def contrastive_loss_from_scores(S, positives, tau):
    loss, _, _ = _multi_positive_infonce(np.asarray(S, dtype=float), np.asarray(positives, dtype=bool), tau)
    return loss


def bce_from_probs(probs, labels):
    p = np.asarray(probs, dtype=float)
    y = np.asarray(labels, dtype=float)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))
