"""Slow reference implementations used only for verification.

Nothing in the production path imports this module.  Each function is a
direct loop transcription of its definition, written without the tensor
engine, so agreement with the fast path is an independent check.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def matmul_loops(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    n, d = a.shape
    k = b.shape[1]
    out = np.zeros((n, k))
    for i in range(n):
        for j in range(k):
            s = 0.0
            for t in range(d):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv2d_loops(x, w, b, pad):
    """Cross-correlation of a (1, C, H, W) input with zero padding."""
    x, w, b = np.asarray(x, float), np.asarray(w, float), np.asarray(b, float)
    _, c, h, wd = x.shape
    o, _, k, _ = w.shape
    out = np.zeros((1, o, h, wd))
    for oc in range(o):
        for y in range(h):
            for xx in range(wd):
                s = b[oc]
                for ic in range(c):
                    for dy in range(k):
                        for dx in range(k):
                            yy, xs = y + dy - pad, xx + dx - pad
                            if 0 <= yy < h and 0 <= xs < wd:
                                s += w[oc, ic, dy, dx] * x[0, ic, yy, xs]
                out[0, oc, y, xx] = s
    return out


def sigmoid(v: float) -> float:
    return 1.0 / (1.0 + math.exp(-v))


def grid_cells_brute(coords, width, height, fov):
    """(H', W', idx, counts) by per-patch bucketing of normalised coordinates."""
    gw = -(-width // fov)
    gh = -(-height // fov)
    idx = []
    for x, y in np.asarray(coords):
        u = min(int(math.floor(x / width * gw)), gw - 1)
        v = min(int(math.floor(y / height * gh)), gh - 1)
        idx.append(v * gw + u)
    counts = [0] * (gw * gh)
    for m in idx:
        counts[m] += 1
    return gh, gw, np.array(idx), np.array(counts)


def cell_means_brute(features, idx, n_cells):
    """(n_cells, D) per-cell mean, one cell at a time; empty cells are zero."""
    f = np.asarray(features, float)
    out = np.zeros((n_cells, f.shape[1]))
    for m in range(n_cells):
        members = [i for i in range(len(idx)) if idx[i] == m]
        if members:
            out[m] = sum(f[i] for i in members) / len(members)
    return out


def cgn_reference(h, idx, gh, gw, weights):
    """Straight-line CGN: remap, three convs, gather, score.  Returns (H_k, P)."""
    h = np.asarray(h, float)
    d = h.shape[1]
    cells = cell_means_brute(h, idx, gh * gw)
    fmap = np.zeros((1, d, gh, gw))
    for m in range(gh * gw):
        v, u = divmod(m, gw)
        fmap[0, :, v, u] = cells[m]
    z = conv2d_loops(fmap, weights["conv1.weight"], weights["conv1.bias"], 1)
    z = np.maximum(z, 0.0)
    z = conv2d_loops(z, weights["conv2.weight"], weights["conv2.bias"], 1)
    z = np.maximum(z, 0.0)
    z = conv2d_loops(z, weights["conv3.weight"], weights["conv3.bias"], 0)
    p = np.vectorize(sigmoid)(z)
    scored = np.zeros_like(h)
    for n in range(h.shape[0]):
        v, u = divmod(int(idx[n]), gw)
        scored[n] = h[n] * p[0, 0, v, u]
    return scored, p


def abmil_reference(h, V, U, w, head_w, head_b):
    """Gated attention pooling, unrolled per instance.  Returns (logits, attention)."""
    h = np.asarray(h, float)
    n, d = h.shape
    scores = []
    for i in range(n):
        s = 0.0
        for j in range(V.shape[0]):
            a = math.tanh(sum(V[j, t] * h[i, t] for t in range(d)))
            g = sigmoid(sum(U[j, t] * h[i, t] for t in range(d)))
            s += w[0, j] * a * g
        scores.append(s)
    m = max(scores)
    ex = [math.exp(s - m) for s in scores]
    z = sum(ex)
    attn = [e / z for e in ex]
    bag = [sum(attn[i] * h[i, t] for i in range(n)) for t in range(d)]
    logits = [head_b[c] + sum(head_w[c, t] * bag[t] for t in range(d)) for c in range(head_w.shape[0])]
    return np.array(logits), np.array(attn)


def auc_pairs(scores, labels) -> float:
    conc = ties = total = 0
    for i, j in itertools.product(range(len(scores)), repeat=2):
        if labels[i] and not labels[j]:
            total += 1
            if scores[i] > scores[j]:
                conc += 1
            elif scores[i] == scores[j]:
                ties += 1
    return (conc + 0.5 * ties) / total


def c_index_pairs(risks, times, events) -> float:
    conc = ties = total = 0
    for i, j in itertools.permutations(range(len(risks)), 2):
        if events[i] and times[i] < times[j]:
            total += 1
            if risks[i] > risks[j]:
                conc += 1
            elif risks[i] == risks[j]:
                ties += 1
    return (conc + 0.5 * ties) / total


def nll_surv_direct(h, t, censored, beta):
    h = [min(max(v, 1e-7), 1 - 1e-7) for v in h]
    surv = 1.0
    for i in range(t + 1):
        surv *= 1 - h[i]
    if censored:
        return (1 - beta) * -math.log(surv)
    before = 1.0
    for i in range(t):
        before *= 1 - h[i]
    return beta * (-math.log(before) - math.log(h[t]))


def bootstrap_enumeration(metric, preds, labels):
    """Std (ddof=1) of ``metric`` over every one of the K^K index resamples."""
    k = len(preds)
    vals = []
    for idx in itertools.product(range(k), repeat=k):
        idx = list(idx)
        try:
            vals.append(metric([preds[i] for i in idx], [labels[i] for i in idx]))
        except (ZeroDivisionError, ValueError):
            continue
    mean = sum(vals) / len(vals)
    return math.sqrt(sum((v - mean) ** 2 for v in vals) / (len(vals) - 1))


def central_difference(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (array), slot by slot."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g
