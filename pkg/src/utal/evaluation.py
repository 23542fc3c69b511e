"""Re-id ranking metrics, partition agreement and training diagnostics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from utal.ccta import MatchSet
from utal.datagen import Corpus
from utal.pctd import build_affinity, mergeable_components, pairwise_sq_dists

__all__ = [
    "MergeReport",
    "MetricsReport",
    "cmc_map",
    "evaluate_model",
    "merge_and_score",
    "mps",
    "nmi",
    "nmi_labels",
    "pair_precision",
    "tracklet_features",
]

DEFAULT_RANKS = (1, 5, 20)


@dataclass
class MetricsReport:
    rank1: float
    rank5: float
    rank20: float
    map: float
    num_probes: int
    num_dropped: int
    cmc: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def tracklet_features(model, corpus: Corpus) -> list[np.ndarray]:
    """Test-time feature of every tracklet: mean embedding of all its frames."""
    return [
        np.stack([model.forward(tr.frames).mean(axis=0) for tr in cam.tracklets]) for cam in corpus.cameras
    ]


def cmc_map(features, cameras, identities, max_rank: int | None = None) -> MetricsReport:
    """Single-query cross-camera CMC and mAP.

    Every tracklet probes all tracklets of the other cameras.  Gallery order
    is ascending Euclidean distance with ties broken by gallery index.
    Probes without a same-identity entry in another camera are dropped.
    """
    X = np.asarray(features, dtype=float)
    cams = np.asarray(cameras)
    ids = np.asarray(identities)
    d2 = pairwise_sq_dists(X)
    n = X.shape[0]
    if max_rank is None:
        max_rank = max(DEFAULT_RANKS)

    hits = np.zeros(max_rank)
    aps = []
    dropped = 0
    for q in range(n):
        gallery = np.flatnonzero(cams != cams[q])
        match = ids[gallery] == ids[q]
        if gallery.size == 0 or not match.any():
            dropped += 1
            continue
        order = np.argsort(d2[q, gallery], kind="stable")
        good = match[order]
        first = int(np.argmax(good))
        if first < max_rank:
            hits[first:] += 1
        positions = np.flatnonzero(good) + 1
        aps.append(float(np.mean(np.arange(1, len(positions) + 1) / positions)))

    valid = len(aps)
    if valid == 0:
        return MetricsReport(0.0, 0.0, 0.0, 0.0, 0, dropped, [0.0] * max_rank)
    cmc = hits / valid
    at = lambda k: float(cmc[min(k, max_rank) - 1])  # noqa: E731
    return MetricsReport(at(1), at(5), at(20), float(np.mean(aps)), valid, dropped, cmc.tolist())


def evaluate_model(model, corpus: Corpus) -> MetricsReport:
    feats = tracklet_features(model, corpus)
    cams = np.concatenate([np.full(len(f), t) for t, f in enumerate(feats)])
    ids = np.concatenate([corpus.identities(t) for t in range(corpus.num_cameras)])
    return cmc_map(np.concatenate(feats), cams, ids)


def _entropy(counts, n):
    p = np.sort(counts[counts > 0]) / n
    return float(-(p * np.log(p)).sum())


def nmi_labels(pred, truth) -> float:
    """NMI of two labelings, normalised by the arithmetic mean of entropies."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("labelings cover different element counts")
    n = pred.size
    if n == 0:
        raise ValueError("empty partition")
    _, a = np.unique(pred, return_inverse=True)
    _, b = np.unique(truth, return_inverse=True)
    table = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(table, (a, b), 1)
    h_a = _entropy(table.sum(axis=1), n)
    h_b = _entropy(table.sum(axis=0), n)
    denom = 0.5 * (h_a + h_b)
    if denom == 0.0:
        return 1.0
    nz = table > 0
    if nz.sum() == table.shape[0] == table.shape[1]:
        return 1.0  # the two labelings induce the same partition
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))
    terms = table[nz] / n * np.log(n * table[nz] / outer[nz])
    # sorted summation: exact symmetry and invariance to label renaming
    mi = float(np.sort(terms).sum())
    return min(max(mi / denom, 0.0), 1.0)


def _as_labels(partition) -> dict:
    labels = {}
    for c, group in enumerate(partition):
        for item in group:
            if item in labels:
                raise ValueError(f"element {item!r} appears in more than one group")
            labels[item] = c
    return labels


def nmi(partition_pred, partition_gt) -> float:
    """NMI between two partitions given as collections of groups."""
    a = _as_labels(partition_pred)
    b = _as_labels(partition_gt)
    if a.keys() != b.keys():
        raise ValueError("partitions cover different element sets")
    items = sorted(a)
    return nmi_labels([a[i] for i in items], [b[i] for i in items])


@dataclass
class MergeRow:
    camera: str
    original: int
    mergeable: int
    trajectories: int
    components: int
    nmi: float


@dataclass
class MergeReport:
    rows: list[MergeRow]
    partitions: list[list[list[int]]]

    @property
    def total(self) -> MergeRow:
        return self.rows[-1]

    def to_csv(self) -> str:
        header = "camera,original,mergeable,trajectories,components,nmi"
        lines = [header] + [
            f"{r.camera},{r.original},{r.mergeable},{r.trajectories},{r.components},{r.nmi!r}" for r in self.rows
        ]
        return "\n".join(lines) + "\n"


def merge_and_score(corpus: Corpus, reprs, K: int = 4, threshold: float = 0.5) -> MergeReport:
    """Merge per-camera tracklets through thresholded affinity components.

    ``mergeable`` counts tracklets that landed in a component of two or
    more; ``trajectories`` counts those multi-tracklet components;
    ``components`` counts every component including singletons.
    """
    rows, partitions = [], []
    pooled_pred, pooled_gt = [], []
    for t, cam in enumerate(corpus.cameras):
        m = cam.num_tracklets
        A = build_affinity(reprs[t], min(K, m - 1))
        comps = mergeable_components(A, threshold)
        partitions.append(comps)
        gt = corpus.identities(t)
        pred = np.empty(m, dtype=int)
        for c, members in enumerate(comps):
            pred[members] = c
        long = [c for c in comps if len(c) > 1]
        rows.append(MergeRow(str(t), m, sum(len(c) for c in long), len(long), len(comps), nmi_labels(pred, gt)))
        pooled_pred += [(t, int(p)) for p in pred]
        pooled_gt += [(t, int(g)) for g in gt]
    codes = {key: i for i, key in enumerate(sorted(set(pooled_pred)))}
    gcodes = {key: i for i, key in enumerate(sorted(set(pooled_gt)))}
    overall = nmi_labels([codes[k] for k in pooled_pred], [gcodes[k] for k in pooled_gt])
    rows.append(
        MergeRow(
            "all",
            sum(r.original for r in rows),
            sum(r.mergeable for r in rows),
            sum(r.trajectories for r in rows),
            sum(r.components for r in rows),
            overall,
        )
    )
    return MergeReport(rows, partitions)


def mps(soft_labels, corpus: Corpus) -> float | None:
    """Mean cosine similarity of soft-label rows over same-camera same-identity pairs."""
    sims = []
    for t, Y in enumerate(soft_labels):
        ids = corpus.identities(t)
        Y = np.asarray(Y, dtype=float)
        unit = Y / np.linalg.norm(Y, axis=1, keepdims=True)
        gram = unit @ unit.T
        same = ids[:, None] == ids[None, :]
        iu = np.triu_indices(len(ids), k=1)
        sims.extend(gram[iu][same[iu]].tolist())
    if not sims:
        return None
    return float(np.mean(sims))


def pair_precision(match_set: MatchSet, corpus: Corpus) -> tuple[int, float | None]:
    pairs = match_set.pairs()
    if not pairs:
        return 0, None
    ids = [corpus.identities(t) for t in range(corpus.num_cameras)]
    correct = sum(int(ids[a[0]][a[1]] == ids[b[0]][b[1]]) for a, b in pairs)
    return len(pairs), correct / len(pairs)


def smoothed_bins(values, bins: int = 4) -> list[float]:
    """Means of ``values`` over ``bins`` contiguous, near-equal chunks (None skipped)."""
    chunks = np.array_split(np.arange(len(values)), bins)
    out = []
    for chunk in chunks:
        vals = [values[i] for i in chunk if values[i] is not None and not math.isnan(values[i])]
        out.append(float(np.mean(vals)) if vals else math.nan)
    return out
