"""Builders and numerical oracles shared by the test modules."""

import math
from fractions import Fraction

import numpy as np

from utal.batch import Batch
from utal.ccta import MODES, discover_matches
from utal.embedding import EmbeddingModel
from utal.pctd import build_affinity, soft_labels

REL_FLOOR = 1e-6

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def tiny_model(rng, raw_dim=5, classes=(3, 4), hidden=6, embed=4, activation="tanh", scale=1.0):
    """Small model with non-zero biases so every parameter block matters."""
    model = EmbeddingModel.init(raw_dim, list(classes), rng, hidden, embed, activation)
    for p in model.parameters().values():
        p += scale * rng.normal(size=p.shape)
    return model


def random_batch(rng, classes, raw_dim, frames=2, per_cam=None):
    cams, labels, xs = [], [], []
    for t, m in enumerate(classes):
        count = per_cam if per_cam is not None else m
        chosen = rng.choice(m, size=count, replace=count > m)
        for i in chosen.tolist():
            cams += [t] * frames
            labels += [i] * frames
            xs.append(rng.normal(size=(frames, raw_dim)))
    labels = np.array(labels)
    return Batch(np.array(cams), labels, labels.copy(), np.concatenate(xs))


def random_problem(rng):
    """Tiny model, batch, soft targets, repr banks and matches (raw, d <= 8; T <= 3; M_t <= 5)."""
    T = int(rng.integers(2, 4))
    classes = [int(m) for m in rng.integers(2, 6, size=T)]
    raw_dim = int(rng.integers(2, 9))
    embed = int(rng.integers(2, 9))
    model = tiny_model(rng, raw_dim, classes, int(rng.integers(2, 9)), embed, scale=0.5)
    batch = random_batch(rng, classes, raw_dim, frames=int(rng.integers(1, 4)), per_cam=int(rng.integers(1, 4)))
    reprs = [rng.normal(size=(m, embed)) for m in classes]
    targets = [soft_labels(build_affinity(r, int(rng.integers(0, m)))) for r, m in zip(reprs, classes)]
    matches = discover_matches(reprs, MODES[int(rng.integers(len(MODES)))], int(rng.integers(1, 3)))
    return model, batch, targets, reprs, matches


def numeric_grads(model, loss_fn, h=1e-5):
    """Central finite differences of ``loss_fn()`` w.r.t. every model parameter."""
    out = {}
    for name, p in model.parameters().items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss_fn()
            p[idx] = old - h
            down = loss_fn()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out


def max_rel_err(analytic, numeric):
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


def naive_forward(model, x):
    """Triple-loop forward pass with plain Python floats."""
    act = np.tanh if model.activation == "tanh" else (lambda v: v)
    W1, b1, W2, b2 = model.W1.tolist(), model.b1.tolist(), model.W2.tolist(), model.b2.tolist()
    out = []
    for row in np.atleast_2d(x).tolist():
        h = [act(b1[j] + sum(row[i] * W1[i][j] for i in range(len(row)))) for j in range(len(b1))]
        out.append([b2[k] + sum(h[j] * W2[j][k] for j in range(len(h))) for k in range(len(b2))])
    return np.array(out)


def brute_cmc_map(features, cameras, identities, max_rank=20):
    """Pure-Python ranking with exact rational AP."""
    n = len(features)
    hits = [0] * max_rank
    aps = []
    for q in range(n):
        gallery = [g for g in range(n) if cameras[g] != cameras[q]]
        if not any(identities[g] == identities[q] for g in gallery):
            continue
        dist = {g: sum((a - b) ** 2 for a, b in zip(features[q], features[g])) for g in gallery}
        ranked = sorted(gallery, key=lambda g: (dist[g], g))
        correct = [r + 1 for r, g in enumerate(ranked) if identities[g] == identities[q]]
        for k in range(correct[0] - 1, max_rank):
            hits[k] += 1
        aps.append(sum(Fraction(i + 1, pos) for i, pos in enumerate(correct)) / len(correct))
    valid = len(aps)
    return [Fraction(h, valid) for h in hits], sum(aps) / valid, n - valid


def brute_nmi(p, q):
    """Set-intersection NMI, arithmetic-mean normalisation, 0/0 -> 1."""
    n = sum(len(c) for c in p)
    h = lambda part: -sum(len(c) / n * math.log(len(c) / n) for c in part)  # noqa: E731
    mi = 0.0
    for a in p:
        for b in q:
            k = len(set(a) & set(b))
            if k:
                mi += k / n * math.log(n * k / (len(a) * len(b)))
    denom = (h(p) + h(q)) / 2
    return 1.0 if denom == 0 else mi / denom
