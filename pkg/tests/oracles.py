"""Straight-line reference implementations built from scalar loops.

Nothing here imports the package's numeric code, so agreement with it is a
genuine second evaluation rather than a re-run of the same expressions.
"""
import math


def _unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def cos(a, b):
    return _dot(_unit(a), _unit(b))


def log_softmax_entry(row, k, tau):
    top = max(x / tau for x in row)
    z = sum(math.exp(x / tau - top) for x in row)
    return row[k] / tau - top - math.log(z)


def clip_total(sim, tau):
    """Sum over anchors k of -(1/b) log softmax(sim[k] / tau)[k]."""
    b = len(sim)
    return sum(-log_softmax_entry(sim[k], k, tau) / b for k in range(b))


def mlce(logits, labels, tau):
    total, active = 0.0, 0
    for row, lab in zip(logits, labels):
        cnt = sum(lab)
        if cnt == 0:
            continue
        active += 1
        total += -sum(lab[i] / cnt * log_softmax_entry(row, i, tau) for i in range(len(row)))
    return total / active if active else 0.0


def i2t(P, S):
    return sum(max(cos(p, s) for s in S) for p in P) / len(P)


def t2i(S, P):
    return sum(max(cos(s, p) for p in P) for s in S) / len(S)


def egf(batch, gaze, tau):
    """batch: list of (P, S) nested lists; gaze: list of (gs, gl) nested lists or None."""
    b = len(batch)
    fl = 0.0
    for (P, S), g in zip(batch, gaze):
        if g is None:
            continue
        gl = g[1]
        x_s2p = [[cos(s, p) for p in P] for s in S]
        x_p2s = [[cos(p, s) for s in S] for p in P]
        gl_t = [[gl[j][i] for j in range(len(S))] for i in range(len(P))]
        fl += mlce(x_s2p, gl, tau) + mlce(x_p2s, gl_t, tau)
    fl /= 2 * b
    s_i2t = [[i2t(batch[k][0], batch[l][1]) for l in range(b)] for k in range(b)]
    s_t2i = [[t2i(batch[k][1], batch[l][0]) for l in range(b)] for k in range(b)]
    return fl + 0.5 * (clip_total(s_i2t, tau) + clip_total(s_t2i, tau))


def top_mask(row, rho):
    c = len(row)
    keep = min(c, math.ceil(rho * c - 1e-12))
    ranked = sorted(range(c), key=lambda i: (-row[i], i))[:keep]
    return [1.0 if i in ranked else 0.0 for i in range(c)]


def normalize_row(row):
    s = sum(row)
    return [x / s for x in row] if s > 0 else [1.0 / len(row)] * len(row)


def mix(weights, feats):
    d = len(feats[0])
    return [sum(w * f[t] for w, f in zip(weights, feats)) for t in range(d)]


def egm(batch, gaze, tau, rho):
    b = len(batch)
    total = 0.0
    for (P, S), g in zip(batch, gaze):
        # tokens are mixed as unit vectors, which keeps the loss scale-free per row
        P, S = [_unit(p) for p in P], [_unit(s) for s in S]
        n, m = len(P), len(S)
        w_i2t = [top_mask([cos(P[i], S[j]) for j in range(m)], rho) for i in range(n)]
        w_t2i = [top_mask([cos(S[j], P[i]) for i in range(n)], rho) for j in range(m)]
        if g is not None:
            gs = g[0]
            w_i2t = [[w_i2t[i][j] + gs[j][i] for j in range(m)] for i in range(n)]
            w_t2i = [[w_t2i[j][i] + gs[j][i] for i in range(n)] for j in range(m)]
        w_i2t = [normalize_row(r) for r in w_i2t]
        w_t2i = [normalize_row(r) for r in w_t2i]
        cross_p = [mix(w_i2t[i], S) for i in range(n)]
        cross_s = [mix(w_t2i[j], P) for j in range(m)]
        sim_i = [[cos(cross_p[a], P[c]) for c in range(n)] for a in range(n)]
        sim_t = [[cos(cross_s[a], S[c]) for c in range(m)] for a in range(m)]
        total += (clip_total(sim_i, tau) + clip_total(sim_t, tau)) / b
    return 0.5 * total
