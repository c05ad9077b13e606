"""Instance and fine-grained contrastive losses, gaze-supervised multi-label CE.

All losses take embeddings through cosine similarity, so they are invariant to
row scaling; gradients are returned with respect to the raw (possibly
unnormalized) inputs.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch
from .numeric import (
    check_temperature,
    cosine_matrix,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    log_softmax,
    softmax,
)

TAU_INIT = 0.07


@dataclass
class EmbeddingBundle:
    """Patch features ``P`` (n x d) and sentence features ``S`` (m x d) of one pair."""
    P: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=np.float64))
        self.S = np.atleast_2d(np.asarray(self.S, dtype=np.float64))
        if self.P.shape[1] != self.S.shape[1]:
            raise ShapeMismatch(f"P has d={self.P.shape[1]} but S has d={self.S.shape[1]}")

    @classmethod
    def normalized(cls, P, S):
        return cls(l2_normalize_rows(P)[0], l2_normalize_rows(S)[0])

    @property
    def n(self):
        return self.P.shape[0]

    @property
    def m(self):
        return self.S.shape[0]


@dataclass(frozen=True)
class FineSimPair:
    x_s2p: np.ndarray  # m x n
    x_p2s: np.ndarray  # n x m


@dataclass
class ContrastiveConfig:
    log_tau: float = math.log(TAU_INIT)
    batch_size: int = 16

    @property
    def tau(self):
        return math.exp(self.log_tau)


@dataclass
class BatchGrads:
    """Gradients w.r.t. every bundle's P and S, and w.r.t. log(tau)."""
    dP: list
    dS: list
    dlog_tau: float = 0.0

    @classmethod
    def zeros_like(cls, batch):
        return cls([np.zeros_like(e.P) for e in batch], [np.zeros_like(e.S) for e in batch], 0.0)

    def add(self, other):
        for a, b in zip(self.dP, other.dP):
            a += b
        for a, b in zip(self.dS, other.dS):
            a += b
        self.dlog_tau += other.dlog_tau
        return self


def instance_similarities(z_i, z_t):
    s_i2t = cosine_matrix(z_i, z_t)
    return s_i2t, s_i2t.T.copy()


def clip_loss(sim, tau):
    """Per-anchor losses ``-(1/b) log softmax(sim[k] / tau)[k]``.

    Row ``k`` of ``sim`` holds anchor ``k``'s similarities to every candidate;
    pass ``s_i2t`` for the image-anchored loss and ``s_t2i`` for the text one.
    """
    sim = np.asarray(sim, dtype=np.float64)
    b = sim.shape[0]
    if sim.shape != (b, b):
        raise ShapeMismatch(f"similarity matrix must be square, got {sim.shape}")
    return -np.diagonal(log_softmax(sim, tau, axis=1)) / b


def clip_loss_backward(sim, tau, weights=1.0):
    """Gradient of ``sum_k weights[k] * clip_loss(sim, tau)[k]`` w.r.t. ``sim`` and ``tau``."""
    sim = np.asarray(sim, dtype=np.float64)
    b = sim.shape[0]
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), (b,))
    p = softmax(sim, tau, axis=1)
    onehot = np.eye(b)
    dsim = (w / b)[:, None] * (p - onehot) / tau
    expected = np.sum(p * sim, axis=1)
    dtau = float(np.sum(w / b * (np.diagonal(sim) - expected))) / (tau * tau)
    return dsim, dtau


def _mlce_rows(labels):
    labels = np.asarray(labels, dtype=np.float64)
    counts = labels.sum(axis=1)
    active = counts > 0
    target = np.zeros_like(labels)
    target[active] = labels[active] / counts[active, None]
    return target, active


def mlce_loss(logits, labels, tau):
    """Soft-target cross-entropy of ``softmax(logits / tau)`` against row-normalized labels.

    Rows without any positive label are skipped; the result is the mean over the
    remaining rows, or 0 when none remain.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.shape != labels.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs labels {labels.shape}")
    check_temperature(tau)
    target, active = _mlce_rows(labels)
    n_active = int(active.sum())
    if n_active == 0:
        return 0.0
    ls = log_softmax(logits[active], tau, axis=1)
    return float(-np.sum(target[active] * ls) / n_active)


def mlce_loss_backward(logits, labels, tau, upstream=1.0):
    logits = np.asarray(logits, dtype=np.float64)
    target, active = _mlce_rows(labels)
    dlogits = np.zeros_like(logits)
    n_active = int(active.sum())
    if n_active == 0:
        return dlogits, 0.0
    x = logits[active]
    q = target[active]
    p = softmax(x, tau, axis=1)
    scale = upstream / n_active
    dlogits[active] = scale * (p - q) / tau
    dtau = scale * float(np.sum(q * x) - np.sum(p * x)) / (tau * tau)
    return dlogits, dtau


def fine_similarities(e):
    x_s2p = cosine_matrix(e.S, e.P)
    return FineSimPair(x_s2p=x_s2p, x_p2s=cosine_matrix(e.P, e.S))


def _mean_max(block):
    """Mean over rows of the row-wise max, plus the (first) argmax per row."""
    arg = np.argmax(block, axis=1)
    return float(np.mean(block[np.arange(block.shape[0]), arg])), arg


def i2t_score(P, S):
    """Mean over patches of the best-matching sentence cosine."""
    return _mean_max(cosine_matrix(P, S))[0]


def t2i_score(S, P):
    """Mean over sentences of the best-matching patch cosine."""
    return _mean_max(cosine_matrix(S, P))[0]


def fine_instance_similarity(e_k, e_l):
    """Token-wise max-mean similarity of pair ``(k, l)``: image k vs text l and text k vs image l."""
    return i2t_score(e_k.P, e_l.S), t2i_score(e_k.S, e_l.P)


@dataclass
class _Normalized:
    U: list
    Un: list
    V: list
    Vn: list

    @classmethod
    def of(cls, batch):
        U, Un, V, Vn = [], [], [], []
        for e in batch:
            u, un = l2_normalize_rows(e.P)
            v, vn = l2_normalize_rows(e.S)
            U.append(u), Un.append(un), V.append(v), Vn.append(vn)
        return cls(U, Un, V, Vn)

    def backward(self, dU, dV):
        dP = [l2_normalize_rows_backward(u, un, g) for u, un, g in zip(self.U, self.Un, dU)]
        dS = [l2_normalize_rows_backward(v, vn, g) for v, vn, g in zip(self.V, self.Vn, dV)]
        return dP, dS


def _ordered_map(fn, items, executor):
    if executor is None:
        return [fn(x) for x in items]
    return list(executor.map(fn, items))


def fine_similarity_matrices(batch, executor=None):
    """b x b matrices of fine-grained similarities (image->text, text->image)."""
    norm = _Normalized.of(batch)
    f_i2t, f_t2i, _ = _fine_forward(norm, executor)
    return f_i2t, f_t2i


def _segments(sizes):
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return offsets[:-1], offsets


def _fine_forward(norm, executor):
    """All cross-pair token cosines in one product, reduced segment by segment.

    Returns the two b x b similarity matrices plus the argmax bookkeeping the
    backward pass needs.
    """
    n_sizes = np.array([u.shape[0] for u in norm.U])
    m_sizes = np.array([v.shape[0] for v in norm.V])
    n_starts, n_off = _segments(n_sizes)
    m_starts, m_off = _segments(m_sizes)
    ucat = np.concatenate(norm.U)
    vcat = np.concatenate(norm.V)
    big = ucat @ vcat.T  # (sum n) x (sum m)
    b = len(norm.U)

    def col_arg(l):
        return m_off[l] + np.argmax(big[:, m_off[l]:m_off[l + 1]], axis=1)

    def row_arg(k):
        return n_off[k] + np.argmax(big[n_off[k]:n_off[k + 1], :], axis=0)

    # best sentence of text l for every patch row, and best patch of image k for every sentence column
    arg_j = np.stack(_ordered_map(col_arg, range(b), executor), axis=1)  # (sum n) x b
    arg_i = np.stack(_ordered_map(row_arg, range(b), executor), axis=0)  # b x (sum m)
    rows = np.arange(big.shape[0])[:, None]
    cols = np.arange(big.shape[1])[None, :]
    best_sent = big[rows, arg_j]
    best_patch = big[arg_i, cols]
    f_i2t = np.add.reduceat(best_sent, n_starts, axis=0) / n_sizes[:, None]
    # text k (sentence segment) vs image l (row of best_patch)
    f_t2i = (np.add.reduceat(best_patch, m_starts, axis=1) / m_sizes[None, :]).T
    return f_i2t, f_t2i, (ucat, vcat, arg_j, arg_i, n_sizes, m_sizes, n_off, m_off)


def _fine_backward(norm, args, g_i2t, g_t2i, dU, dV):
    ucat, vcat, arg_j, arg_i, n_sizes, m_sizes, n_off, m_off = args
    patch_owner = np.repeat(np.arange(len(n_sizes)), n_sizes)
    sent_owner = np.repeat(np.arange(len(m_sizes)), m_sizes)
    dbig = np.zeros((ucat.shape[0], vcat.shape[0]))
    rows = np.broadcast_to(np.arange(ucat.shape[0])[:, None], arg_j.shape)
    np.add.at(dbig, (rows, arg_j), (g_i2t / n_sizes[:, None])[patch_owner])
    cols = np.broadcast_to(np.arange(vcat.shape[0])[None, :], arg_i.shape)
    np.add.at(dbig, (arg_i, cols), (g_t2i / m_sizes[:, None])[sent_owner].T)
    ducat = dbig @ vcat
    dvcat = dbig.T @ ucat
    for k in range(len(n_sizes)):
        dU[k] += ducat[n_off[k]:n_off[k + 1]]
        dV[k] += dvcat[m_off[k]:m_off[k + 1]]


@dataclass
class EGFResult:
    fl_s2p: float
    fl_p2s: float
    fg_i2t: float
    fg_t2i: float
    value: float
    grads: BatchGrads = field(repr=False, default=None)


def _check_batch(batch, gaze):
    if len(batch) < 1:
        raise ShapeMismatch("batch must contain at least one sample")
    if len(gaze) != len(batch):
        raise ShapeMismatch(f"{len(gaze)} gaze entries for {len(batch)} samples")
    for k, (e, g) in enumerate(zip(batch, gaze)):
        if g is not None and g.gs.shape != (e.m, e.n):
            raise ShapeMismatch(f"sample {k}: gaze matrices {g.gs.shape} vs (m, n)=({e.m}, {e.n})")


def egf_loss(batch, gaze, cfg, executor=None, with_grad=True, _norm=None):
    """Gaze-guided fine-grained alignment loss and its gradients.

    ``gaze[k]`` is a :class:`GazeMatrices` or ``None`` for gaze-free samples,
    which contribute nothing to the multi-label terms.  Reported components are
    their weighted contributions, so ``fl_s2p + fl_p2s + fg_i2t + fg_t2i == value``.
    """
    _check_batch(batch, gaze)
    tau = cfg.tau
    b = len(batch)
    norm = _norm or _Normalized.of(batch)
    dU = [np.zeros_like(u) for u in norm.U]
    dV = [np.zeros_like(v) for v in norm.V]
    dtau = 0.0

    def mlce_terms(k):
        g = gaze[k]
        if g is None:
            return 0.0, 0.0, None
        c = norm.U[k] @ norm.V[k].T  # n x m, patch-to-sentence
        s2p = mlce_loss(c.T, g.gl, tau)
        p2s = mlce_loss(c, g.gl.T, tau)
        if not with_grad:
            return s2p, p2s, None
        d_s2p, t1 = mlce_loss_backward(c.T, g.gl, tau, 1.0 / (2 * b))
        d_p2s, t2 = mlce_loss_backward(c, g.gl.T, tau, 1.0 / (2 * b))
        dc = d_s2p.T + d_p2s
        return s2p, p2s, (dc @ norm.V[k], dc.T @ norm.U[k], t1 + t2)

    fl_s2p = fl_p2s = 0.0
    for k, (s2p, p2s, back) in enumerate(_ordered_map(mlce_terms, range(b), executor)):
        fl_s2p += s2p
        fl_p2s += p2s
        if back is not None:
            dU[k] += back[0]
            dV[k] += back[1]
            dtau += back[2]
    fl_s2p /= 2 * b
    fl_p2s /= 2 * b

    f_i2t, f_t2i, args = _fine_forward(norm, executor)
    fg_i2t = 0.5 * float(np.sum(clip_loss(f_i2t, tau)))
    fg_t2i = 0.5 * float(np.sum(clip_loss(f_t2i, tau)))
    value = fl_s2p + fl_p2s + fg_i2t + fg_t2i
    if not with_grad:
        return EGFResult(fl_s2p, fl_p2s, fg_i2t, fg_t2i, value, None)
    g_i2t, t1 = clip_loss_backward(f_i2t, tau, 0.5)
    g_t2i, t2 = clip_loss_backward(f_t2i, tau, 0.5)
    dtau += t1 + t2
    _fine_backward(norm, args, g_i2t, g_t2i, dU, dV)

    dP, dS = norm.backward(dU, dV)
    return EGFResult(fl_s2p, fl_p2s, fg_i2t, fg_t2i, value, BatchGrads(dP, dS, dtau * tau))
