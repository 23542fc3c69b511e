"""Cross-camera tracklet association.

Matches are discovered over the pooled representations of all *other*
cameras.  The default reciprocal rule keeps a pair only when each tracklet
is the other's nearest cross-camera neighbour, which is deliberately
conservative early in training.  The loss pulls a tracklet's in-batch mean
embedding towards the (frozen) representations of its matches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from utal.batch import Batch
from utal.errors import ConfigError
from utal.pctd import pairwise_sq_dists

__all__ = ["MODES", "DIST_EPS", "MatchSet", "batch_ccta_loss", "ccta_loss", "discover_matches"]

MODES = ("two_way_1nn", "one_way_1nn", "two_way_knn")
DIST_EPS = 1e-8

Key = tuple[int, int]


@dataclass(frozen=True)
class MatchSet:
    """R(t, i) for every tracklet (t, i) that has at least one match."""

    matches: dict[Key, tuple[Key, ...]] = field(default_factory=dict)
    mode: str = "two_way_1nn"
    k: int = 1

    def get(self, key: Key) -> tuple[Key, ...]:
        return self.matches.get(key, ())

    def edges(self) -> set[tuple[Key, Key]]:
        """Directed anchor -> partner edges."""
        return {(a, b) for a, partners in self.matches.items() for b in partners}

    def pairs(self) -> set[tuple[Key, Key]]:
        """Unordered pairs, each stored as (smaller key, larger key)."""
        return {(min(a, b), max(a, b)) for a, b in self.edges()}

    def __len__(self):
        return len(self.pairs())


def _pool(reprs):
    keys = [(t, i) for t, bank in enumerate(reprs) for i in range(len(bank))]
    cams = np.array([t for t, _ in keys], dtype=int)
    X = np.concatenate([np.asarray(b, dtype=float) for b in reprs], axis=0)
    return keys, cams, X


def discover_matches(reprs, mode: str = "two_way_1nn", k: int = 1) -> MatchSet:
    """Cross-camera matches under the given rule.

    ``reprs[t]`` is camera t's (M_t, d) representation bank.  Distance ties
    resolve to the lowest (camera, index) candidate.
    """
    if mode not in MODES:
        raise ConfigError("ccta_mode", f"unknown mode {mode!r}; expected one of {MODES}")
    if len(reprs) < 2:
        raise ConfigError("cameras", "cross-camera matching needs at least 2 cameras")
    if any(len(b) == 0 for b in reprs):
        raise ConfigError("cameras", "every camera needs at least one tracklet")
    if mode != "two_way_knn":
        k = 1
    elif k < 1:
        raise ConfigError("ccta_k", "must be >= 1")

    keys, cams, X = _pool(reprs)
    d2 = pairwise_sq_dists(X)
    d2[cams[:, None] == cams[None, :]] = np.inf
    # pooled order is camera-major, so a stable sort breaks ties by (camera, index)
    order = np.argsort(d2, axis=1, kind="stable")
    n = len(keys)
    neigh = []
    for a in range(n):
        avail = n - int(np.count_nonzero(cams == cams[a]))
        neigh.append(order[a, : min(k, avail)].tolist())

    out: dict[Key, tuple[Key, ...]] = {}
    if mode == "one_way_1nn":
        for a in range(n):
            out[keys[a]] = tuple(keys[b] for b in neigh[a])
    else:
        neigh_sets = [set(nb) for nb in neigh]
        for a in range(n):
            partners = tuple(keys[b] for b in neigh[a] if a in neigh_sets[b])
            if partners:
                out[keys[a]] = partners
    return MatchSet({key: v for key, v in out.items() if v}, mode, k)


def ccta_loss(embedding, match_reprs):
    """Sum of Euclidean distances from ``embedding`` to each matched repr.

    Returns (loss, gradient w.r.t. ``embedding``); matches are constants.
    """
    m = np.asarray(embedding, dtype=float)
    if len(match_reprs) == 0:
        return 0.0, np.zeros_like(m)
    diff = m[None, :] - np.atleast_2d(np.asarray(match_reprs, dtype=float))
    norms = np.sqrt((diff * diff).sum(axis=1))
    grad = (diff / np.maximum(norms, DIST_EPS)[:, None]).sum(axis=0)
    return float(norms.sum()), grad


def batch_ccta_loss(batch: Batch, embeddings, match_set: MatchSet, reprs):
    """Mean pull loss over in-batch tracklets that have matches.

    Each tracklet's anchor is the mean of its in-batch frame embeddings, so
    its gradient is shared equally by those frames.  Returns (loss,
    per-frame embedding gradients (N, d), number of matched tracklets).
    """
    embeddings = np.asarray(embeddings, dtype=float)
    grad = np.zeros_like(embeddings)
    terms = []
    for t, i, rows in batch.groups():
        partners = match_set.get((t, i))
        if not partners:
            continue
        targets = np.stack([reprs[u][j] for u, j in partners])
        loss, g = ccta_loss(embeddings[rows].mean(axis=0), targets)
        terms.append((rows, loss, g))
    if not terms:
        return 0.0, grad, 0
    count = len(terms)
    for rows, _, g in terms:
        grad[rows] += g / (len(rows) * count)
    return sum(loss for _, loss, _ in terms) / count, grad, count


def pair_lines(epoch: int, match_set: MatchSet, reprs) -> list[str]:
    """Discovered pairs as "epoch,cam_a,idx_a,cam_b,idx_b,distance" lines."""
    lines = []
    for (t, i), (u, j) in sorted(match_set.pairs()):
        dist = float(np.linalg.norm(np.asarray(reprs[t][i]) - np.asarray(reprs[u][j])))
        lines.append(f"{epoch},{t},{i},{u},{j},{dist!r}")
    return lines
