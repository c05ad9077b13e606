"""Gaze-weighted cross-modal feature mapping, its loss, and the combined objective."""
import math
from dataclasses import dataclass, field

import numpy as np

from .contrastive import (
    TAU_INIT,
    BatchGrads,
    ContrastiveConfig,
    EGFResult,
    FineSimPair,
    _check_batch,
    _Normalized,
    _ordered_map,
    clip_loss,
    clip_loss_backward,
    egf_loss,
)
from .errors import ShapeMismatch
from .numeric import cosine_matrix, cosine_matrix_backward

LOSS_CSV_HEADER = ["step", "fl_s2p", "fl_p2s", "fg_i2t", "fg_t2i", "l_egf",
                   "ml_i", "ml_t", "l_egm", "total", "tau"]


@dataclass
class MappingConfig(ContrastiveConfig):
    """Shared temperature plus the keep-fraction of the sparse-binarize step."""
    rho: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must be in (0, 1], got {self.rho}")


@dataclass(frozen=True)
class WeightMatrices:
    w_i2t: np.ndarray  # n x m
    w_t2i: np.ndarray  # m x n


def sparse_binarize(x, rho):
    """Per row, mark the top ``ceil(rho * c)`` entries with 1 (ties: lower column first)."""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must be in (0, 1], got {rho}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    r, c = x.shape
    keep = min(c, math.ceil(rho * c - 1e-12))
    order = np.argsort(-x, axis=1, kind="stable")[:, :keep]
    out = np.zeros_like(x)
    out[np.arange(r)[:, None], order] = 1.0
    return out


def row_normalize(x):
    """Divide each row by its sum; an all-zero row becomes uniform."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if np.any(x < 0):
        raise ValueError("row_normalize expects non-negative entries")
    sums = x.sum(axis=1, keepdims=True)
    uniform = np.full_like(x, 1.0 / x.shape[1])
    return np.where(sums > 0, x / np.where(sums > 0, sums, 1.0), uniform)


def alignment_weights(fine, gaze, cfg):
    """Row-stochastic mapping weights from sparsified similarities plus gaze mass.

    The gaze term is dropped when ``gaze`` is None.
    """
    w_i2t = sparse_binarize(fine.x_p2s, cfg.rho)
    w_t2i = sparse_binarize(fine.x_s2p, cfg.rho)
    if gaze is not None:
        if gaze.gs.shape != fine.x_s2p.shape:
            raise ShapeMismatch(f"GS {gaze.gs.shape} vs sentence-to-patch {fine.x_s2p.shape}")
        w_i2t = w_i2t + gaze.gs.T
        w_t2i = w_t2i + gaze.gs
    return WeightMatrices(row_normalize(w_i2t), row_normalize(w_t2i))


def cross_map(e, w):
    """Map sentences onto patches and patches onto sentences through ``w``."""
    if w.w_i2t.shape != (e.n, e.m) or w.w_t2i.shape != (e.m, e.n):
        raise ShapeMismatch(f"weights {w.w_i2t.shape}/{w.w_t2i.shape} vs (n, m)=({e.n}, {e.m})")
    return w.w_i2t @ e.S, w.w_t2i @ e.P


@dataclass
class EGMResult:
    ml_i: float
    ml_t: float
    value: float
    grads: BatchGrads = field(repr=False, default=None)


def _egm_sample(u, v, gaze, cfg, batch_size, with_grad=True):
    """Forward and backward of both mapping losses for one pair of unit-row features.

    Each loss is the token-level contrast (mean over token anchors) carrying the
    batch-level ``1/b`` prefactor of the instance loss.
    """
    tau = cfg.tau
    scale = 1.0 / batch_size
    x_p2s = u @ v.T
    fine = FineSimPair(x_p2s.T, x_p2s)
    w = alignment_weights(fine, gaze, cfg)
    cross_p = w.w_i2t @ v
    cross_s = w.w_t2i @ u

    sim_i = cosine_matrix(cross_p, u)  # n x n, positives on the diagonal
    sim_t = cosine_matrix(cross_s, v)  # m x m
    ml_i = scale * float(np.sum(clip_loss(sim_i, tau)))
    ml_t = scale * float(np.sum(clip_loss(sim_t, tau)))
    if not with_grad:
        return ml_i, ml_t, None, None, 0.0

    # the sparse-binarize mask is piecewise constant, so w carries no gradient
    g_i, tau_i = clip_loss_backward(sim_i, tau, 0.5 * scale)
    g_t, tau_t = clip_loss_backward(sim_t, tau, 0.5 * scale)
    d_cross_p, du = cosine_matrix_backward(cross_p, u, g_i)
    d_cross_s, dv = cosine_matrix_backward(cross_s, v, g_t)
    dv = dv + w.w_i2t.T @ d_cross_p
    du = du + w.w_t2i.T @ d_cross_s
    return ml_i, ml_t, du, dv, tau_i + tau_t


def egm_loss(batch, gaze, cfg, executor=None, with_grad=True, _norm=None):
    """Half the batch sum of per-sample token-level mapping losses, with gradients.

    Reported ``ml_i``/``ml_t`` are weighted contributions summing to ``value``.
    """
    _check_batch(batch, gaze)
    norm = _norm or _Normalized.of(batch)
    b = len(batch)
    results = _ordered_map(lambda k: _egm_sample(norm.U[k], norm.V[k], gaze[k], cfg, b, with_grad),
                           range(len(batch)), executor)
    ml_i = ml_t = dtau = 0.0
    dU, dV = [], []
    for mi, mt, du, dv, t in results:
        ml_i += mi
        ml_t += mt
        dU.append(du)
        dV.append(dv)
        dtau += t
    ml_i *= 0.5
    ml_t *= 0.5
    if not with_grad:
        return EGMResult(ml_i, ml_t, ml_i + ml_t, None)
    dP, dS = norm.backward(dU, dV)
    return EGMResult(ml_i, ml_t, ml_i + ml_t, BatchGrads(dP, dS, dtau * cfg.tau))


@dataclass
class LossBreakdown:
    fl_s2p: float
    fl_p2s: float
    fg_i2t: float
    fg_t2i: float
    l_egf: float
    ml_i: float
    ml_t: float
    l_egm: float
    total: float
    tau: float
    grads: BatchGrads = field(repr=False, default=None)

    def csv_row(self, step):
        return [step] + [repr(float(getattr(self, k))) for k in LOSS_CSV_HEADER[1:]]


def total_loss(batch, gaze, cfg, executor=None, with_grad=True):
    """Full objective: fine-grained alignment plus cross-modal mapping."""
    _check_batch(batch, gaze)
    norm = _Normalized.of(batch)
    egf: EGFResult = egf_loss(batch, gaze, cfg, executor, with_grad, _norm=norm)
    egm: EGMResult = egm_loss(batch, gaze, cfg, executor, with_grad, _norm=norm)
    grads = egf.grads.add(egm.grads) if with_grad else None
    return LossBreakdown(
        fl_s2p=egf.fl_s2p, fl_p2s=egf.fl_p2s, fg_i2t=egf.fg_i2t, fg_t2i=egf.fg_t2i,
        l_egf=egf.value, ml_i=egm.ml_i, ml_t=egm.ml_t, l_egm=egm.value,
        total=egf.value + egm.value, tau=cfg.tau, grads=grads,
    )


def default_config(rho=0.25, tau=TAU_INIT):
    return MappingConfig(log_tau=math.log(tau), rho=rho)
