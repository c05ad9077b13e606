"""Finite-difference validation of every hand-written backward pass.

Each component is checked on random small instances.  The cheap scalar losses
(clip, multi-label CE) are checked on every coordinate; the batch losses and
the encoder chain are checked on a seeded random subset of coordinates that
always includes log-temperature.
"""
import math
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from .contrastive import TAU_INIT, EmbeddingBundle, clip_loss, clip_loss_backward, egf_loss, mlce_loss, mlce_loss_backward
from .encoders import EncoderParams, encode_image, encode_sentences
from .heatmap import GazeMatrices, PatchGrid
from .mapping import MappingConfig, egm_loss, total_loss
from .numeric import GradCheckReport, relative_error

COMPONENTS = ("clip_loss", "mlce_loss", "egf_loss", "egm_loss", "total_loss", "encoders")
TOLERANCE = 1e-4
EPS = 1e-5


@dataclass(frozen=True)
class Shapes:
    b: int = 4
    n: int = 4
    m: int = 3
    d: int = 8


def _check(f, x, analytic, coords, eps=EPS, tol=TOLERANCE):
    """Central differences of ``f`` at ``x`` restricted to ``coords``."""
    x = np.array(x, dtype=np.float64)
    num = np.empty(len(coords))
    for i, c in enumerate(coords):
        orig = x[c]
        x[c] = orig + eps
        fp = f(x)
        x[c] = orig - eps
        fm = f(x)
        x[c] = orig
        num[i] = (fp - fm) / (2 * eps)
    err = relative_error(np.asarray(analytic)[coords], num)
    worst = int(np.argmax(err))
    return GradCheckReport(float(err[worst]), (int(coords[worst]),), bool(err[worst] < tol), tol)


def _pick(rng, size, coords):
    """All coordinates when ``coords`` is None, else a random subset plus the last one."""
    if coords is None or coords >= size:
        return np.arange(size)
    chosen = rng.choice(size - 1, size=coords - 1, replace=False)
    return np.sort(np.append(chosen, size - 1))


def random_gaze(rng, m, n, p_missing=0.25, density=0.4):
    """Random gaze matrices: sparse non-negative GS rows, max-normalized; None sometimes."""
    if rng.random() < p_missing:
        return None
    gs = rng.random((m, n)) * (rng.random((m, n)) < density)
    gs[rng.random(m) < 0.2] = 0.0  # some sentences without gaze
    peak = gs.max(axis=1, keepdims=True)
    gs = np.where(peak > 0, gs / np.where(peak > 0, peak, 1.0), 0.0)
    return GazeMatrices(gs, (gs > 0).astype(np.float64))


def _random_log_tau(rng, low=TAU_INIT):
    return math.log(rng.uniform(low, 1.0))


# Raw-logit instances keep sim / tau within a few nats: deeper in the softmax
# tail, gradient entries drop below what float64 central differences resolve.
SCALAR_TAU_LOW = 0.25


# --- per-component instances -------------------------------------------------

def _clip_instance(rng, shapes):
    b = shapes.b
    sim = rng.uniform(-1, 1, size=(b, b))
    log_tau = _random_log_tau(rng, SCALAR_TAU_LOW)
    weights = rng.uniform(0.5, 1.5, size=b)
    x = np.append(sim.ravel(), log_tau)

    def f(v):
        return float(np.sum(weights * clip_loss(v[:-1].reshape(b, b), math.exp(v[-1]))))

    dsim, dtau = clip_loss_backward(sim, math.exp(log_tau), weights)
    return f, x, np.append(dsim.ravel(), dtau * math.exp(log_tau))


def _mlce_instance(rng, shapes):
    m, n = shapes.m, shapes.n
    logits = rng.uniform(-1, 1, size=(m, n))
    labels = (rng.random((m, n)) < 0.4).astype(np.float64)
    labels[0, rng.integers(n)] = 1.0  # at least one active row
    log_tau = _random_log_tau(rng, SCALAR_TAU_LOW)
    x = np.append(logits.ravel(), log_tau)

    def f(v):
        return mlce_loss(v[:-1].reshape(m, n), labels, math.exp(v[-1]))

    dl, dtau = mlce_loss_backward(logits, labels, math.exp(log_tau))
    return f, x, np.append(dl.ravel(), dtau * math.exp(log_tau))


def _batch_instance(loss_fn):
    def make(rng, shapes):
        b, n, m, d = shapes.b, shapes.n, shapes.m, shapes.d
        P = rng.normal(size=(b, n, d))
        S = rng.normal(size=(b, m, d))
        gaze = [random_gaze(rng, m, n) for _ in range(b)]
        log_tau = _random_log_tau(rng)
        x = np.concatenate([P.ravel(), S.ravel(), [log_tau]])

        def unpack(v):
            Pv = v[:P.size].reshape(P.shape)
            Sv = v[P.size:P.size + S.size].reshape(S.shape)
            batch = [EmbeddingBundle(Pv[k], Sv[k]) for k in range(b)]
            return batch, MappingConfig(log_tau=float(v[-1]))

        def f(v):
            batch, cfg = unpack(v)
            return loss_fn(batch, gaze, cfg, with_grad=False)[0]

        batch, cfg = unpack(x)
        _, grads = loss_fn(batch, gaze, cfg)
        analytic = np.concatenate([np.stack(grads.dP).ravel(), np.stack(grads.dS).ravel(),
                                   [grads.dlog_tau]])
        return f, x, analytic
    return make


def _encoder_instance(rng, shapes):
    # local import: trainer depends on this module's siblings, not the other way round
    from .trainer import loss_and_grads

    b, m, d = shapes.b, shapes.m, shapes.d
    grid = PatchGrid(2, 2)
    size, vocab = 8, 10
    params = EncoderParams.init(16, vocab, d, seed=int(rng.integers(1 << 31)), grid=(2, 2))
    params = params.with_flat(rng.normal(scale=0.5, size=params.flat().size))
    samples = []
    for _ in range(b):
        sentences = [list(rng.integers(0, vocab, size=rng.integers(1, 5))) for _ in range(m)]
        samples.append(SimpleNamespace(image=rng.random((size, size)), sentences=sentences,
                                       gaze=random_gaze(rng, m, grid.n)))
    log_tau = _random_log_tau(rng)
    x = np.append(params.flat(), log_tau)

    def f(v):
        p = params.with_flat(v[:-1])
        batch = [EmbeddingBundle(encode_image(s.image, grid, p), encode_sentences(s.sentences, p))
                 for s in samples]
        cfg = MappingConfig(log_tau=float(v[-1]))
        return total_loss(batch, [s.gaze for s in samples], cfg, with_grad=False).total

    _, grad, dlog_tau = loss_and_grads(params, log_tau, samples, grid)
    return f, x, np.append(grad.flat(), dlog_tau)


def _egf(batch, gaze, cfg, with_grad=True):
    r = egf_loss(batch, gaze, cfg, with_grad=with_grad)
    return r.value, r.grads


def _egm(batch, gaze, cfg, with_grad=True):
    r = egm_loss(batch, gaze, cfg, with_grad=with_grad)
    return r.value, r.grads


def _total(batch, gaze, cfg, with_grad=True):
    r = total_loss(batch, gaze, cfg, with_grad=with_grad)
    return r.total, r.grads


_INSTANCES = {
    "clip_loss": (_clip_instance, None),
    "mlce_loss": (_mlce_instance, None),
    "egf_loss": (_batch_instance(_egf), 24),
    "egm_loss": (_batch_instance(_egm), 24),
    "total_loss": (_batch_instance(_total), 24),
    "encoders": (_encoder_instance, 24),
}


def check_component(name, seed=0, trials=100, shapes=Shapes(), coords="default", corrupt=False):
    """Worst-case report for one component over ``trials`` random instances.

    ``coords="default"`` uses the component's usual subset size; None checks
    every coordinate.  ``corrupt`` adds a unit offset to one analytic entry, so
    the check must fail (a harness self-test).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    make, default_coords = _INSTANCES[name]
    n_coords = default_coords if coords == "default" else coords
    rng = np.random.default_rng([seed, COMPONENTS.index(name)])
    report = None
    for _ in range(trials):
        f, x, analytic = make(rng, shapes)
        if corrupt:
            analytic = analytic.copy()
            analytic[-1] += 1.0
        r = _check(f, x, analytic, _pick(rng, x.size, n_coords))
        report = r if report is None else report.merge(r)
    return report


def run_suite(seed=0, trials=100, shapes=Shapes(), coords="default", corrupt=None, components=COMPONENTS):
    """``{component: GradCheckReport}`` for every component; ``corrupt`` names one to sabotage."""
    return {name: check_component(name, seed, trials, shapes, coords, corrupt == name)
            for name in components}
