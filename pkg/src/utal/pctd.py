"""Per-camera tracklet discrimination with affinity-derived soft labels.

Each camera keeps a bank of running tracklet representations.  At every
epoch boundary the bank is turned into a K-nearest-neighbour affinity
matrix with a data-driven Gaussian scale, whose L1-normalised rows become
the classification targets for that camera's head.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from utal.batch import Batch
from utal.errors import DegenerateCameraError, NumericError, ShapeError

__all__ = [
    "SIGMA2_FLOOR",
    "build_affinity",
    "compute_sigma2",
    "knn_indices",
    "mergeable_components",
    "pairwise_sq_dists",
    "pctd_batch_loss",
    "soft_ce_loss",
    "soft_ce_rows",
    "soft_labels",
    "sparse_triples",
    "update_repr",
]

SIGMA2_FLOOR = 1e-12


def update_repr(s, batch_embeddings, alpha: float) -> np.ndarray:
    """Blend the in-batch mean embedding into the stored representation."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    s = np.asarray(s, dtype=float)
    batch_embeddings = np.atleast_2d(np.asarray(batch_embeddings, dtype=float))
    if batch_embeddings.shape[0] == 0:
        raise ValueError("empty batch slice; skip the update instead")
    if batch_embeddings.shape[1] != s.shape[-1]:
        raise ShapeError(f"embedding dim {batch_embeddings.shape[1]} != repr dim {s.shape[-1]}")
    return (s + alpha * batch_embeddings.mean(axis=0)) / (1.0 + alpha)


def pairwise_sq_dists(a, b=None) -> np.ndarray:
    # per-pair differences (not the Gram expansion): coincident rows give exactly 0
    a = np.asarray(a, dtype=float)
    b = a if b is None else np.asarray(b, dtype=float)
    return cdist(a, b, "sqeuclidean")


def _check_bank(reprs, K):
    reprs = np.asarray(reprs, dtype=float)
    if reprs.ndim != 2:
        raise ShapeError(f"repr bank must be 2-D, got shape {reprs.shape}")
    m = reprs.shape[0]
    if K < 0:
        raise ValueError("K must be >= 0")
    if K >= 1 and m < 2:
        raise DegenerateCameraError(f"camera with {m} tracklet(s) cannot use K={K}")
    if K > m - 1 and K >= 1:
        raise DegenerateCameraError(f"K={K} exceeds the {m - 1} available neighbours")
    return reprs


def knn_indices(reprs, K: int):
    """K nearest neighbours per row, self excluded, ties by index.

    Returns (indices, squared distances), both of shape (M, K).
    """
    reprs = _check_bank(reprs, K)
    m = reprs.shape[0]
    if K == 0:
        return np.zeros((m, 0), dtype=int), np.zeros((m, 0))
    d2 = pairwise_sq_dists(reprs)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :K]
    return order, np.take_along_axis(d2, order, axis=1)


def compute_sigma2(reprs, K: int) -> float:
    """Mean squared distance to the K nearest neighbours, floored."""
    if K < 1:
        raise ValueError("sigma2 needs K >= 1")
    _, d2 = knn_indices(reprs, K)
    return max(float(d2.mean()), SIGMA2_FLOOR)


def build_affinity(reprs, K: int) -> np.ndarray:
    """Row-sparse Gaussian affinity over K nearest neighbours with unit diagonal.

    Stored dense (M x M); off-diagonal entries outside the neighbour sets are 0.
    """
    reprs = _check_bank(reprs, K)
    m = reprs.shape[0]
    A = np.eye(m)
    if K == 0:
        return A
    idx, d2 = knn_indices(reprs, K)
    sigma2 = max(float(d2.mean()), SIGMA2_FLOOR)
    rows = np.repeat(np.arange(m), K)
    A[rows, idx.ravel()] = np.exp(-d2.ravel() / sigma2)
    return A


def soft_labels(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    return A / A.sum(axis=1, keepdims=True)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def soft_ce_rows(logits, targets):
    """Row-wise soft cross-entropy; returns (losses (n,), gradients (n, M))."""
    logits = np.asarray(logits, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {logits.shape} and targets {targets.shape} differ")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    logp = _log_softmax(logits)
    # zero-mass targets contribute nothing even if logp is very negative
    losses = -np.where(targets > 0, targets * logp, 0.0).sum(axis=-1)
    return losses, np.exp(logp) - targets


def soft_ce_loss(logits, soft_label):
    """Cross-entropy of softmax(logits) against a probability target."""
    loss, grad = soft_ce_rows(np.atleast_2d(logits), np.atleast_2d(soft_label))
    return float(loss[0]), grad[0]


def pctd_batch_loss(model, batch: Batch, targets, embeddings=None):
    """Mean soft cross-entropy over the batch frames.

    ``targets[t]`` is camera t's soft-label matrix; frame n uses row
    ``batch.classes[n]`` of its camera's matrix.  Returns the loss and the
    per-frame logit gradients (already divided by N).
    """
    if embeddings is None:
        embeddings = model.forward(batch.x)
    n = len(batch)
    grad_logits: list = [None] * n
    total = 0.0
    for t in np.unique(batch.cameras):
        if not 0 <= t < len(targets):
            raise IndexError(f"camera {t} not in corpus")
        rows = np.flatnonzero(batch.cameras == t)
        cls = batch.classes[rows]
        if cls.min() < 0 or cls.max() >= targets[t].shape[0]:
            raise IndexError(f"class label outside camera {t}'s label space")
        losses, grads = soft_ce_rows(model.logits(embeddings[rows], int(t)), targets[t][cls])
        total += float(losses.sum())
        for r, g in zip(rows, grads / n):
            grad_logits[r] = g
    return total / n, grad_logits


def mergeable_components(A, threshold: float = 0.5) -> list[list[int]]:
    """Connected components of the graph with edges where max(A_ij, A_ji) > threshold.

    Components are returned as sorted index lists, ordered by smallest member.
    """
    A = np.asarray(A, dtype=float)
    m = A.shape[0]
    sym = np.maximum(A, A.T)
    np.fill_diagonal(sym, 0.0)
    i, j = np.nonzero(sym > threshold)
    graph = coo_matrix((np.ones(len(i)), (i, j)), shape=(m, m))
    _, comp = connected_components(graph, directed=False)
    groups: dict[int, list[int]] = {}
    for node, c in enumerate(comp.tolist()):
        groups.setdefault(c, []).append(node)
    return sorted(groups.values(), key=lambda g: g[0])


def sparse_triples(camera: int, matrix) -> list[str]:
    """Nonzero entries as "camera,i,j,value" lines for debugging dumps."""
    matrix = np.asarray(matrix)
    return [f"{camera},{i},{j},{float(matrix[i, j])!r}" for i, j in zip(*np.nonzero(matrix))]
