import math

import numpy as np
import pytest
from helpers import random_batch, tiny_model

from utal.batch import Batch
from utal.errors import DegenerateCameraError, NumericError, ShapeError
from utal.pctd import (
    SIGMA2_FLOOR,
    build_affinity,
    compute_sigma2,
    mergeable_components,
    pctd_batch_loss,
    soft_ce_loss,
    soft_labels,
    sparse_triples,
    update_repr,
)

LINE = np.array([[0.0], [1.0], [3.0]])


def test_update_repr_examples():
    assert np.allclose(update_repr([0, 0], [[2, 4]], 1.0), [1, 2], rtol=0, atol=1e-15)
    assert np.allclose(update_repr([1, 1], [[3, 5]], 0.5), [5 / 3, 7 / 3], rtol=0, atol=1e-15)
    s = np.array([0.3, -2.0])
    assert np.array_equal(update_repr(s, [[9, 9], [1, 1]], 0.0), s)


def test_update_repr_uses_batch_mean():
    out = update_repr([0.0], [[1.0], [3.0]], 1.0)
    assert out[0] == 1.0


def test_update_repr_errors():
    with pytest.raises(ShapeError):
        update_repr([0, 0], [[1, 2, 3]], 1.0)
    with pytest.raises(ValueError):
        update_repr([0, 0], np.zeros((0, 2)), 1.0)


def test_sigma2_two_points():
    assert compute_sigma2([[0.0, 0.0], [3.0, 4.0]], 1) == pytest.approx(25.0, abs=1e-12)


def test_sigma2_collinear_hand_value():
    assert compute_sigma2(LINE, 1) == pytest.approx(2.0, abs=1e-12)


def test_sigma2_floor_for_coincident():
    assert compute_sigma2(np.ones((4, 3)), 2) == SIGMA2_FLOOR


def test_sigma2_matches_scalar_loop(rng):
    reprs = rng.normal(size=(6, 3))
    K = 3
    total = 0.0
    for i in range(6):
        d = sorted(sum((reprs[i, c] - reprs[j, c]) ** 2 for c in range(3)) for j in range(6) if j != i)
        total += sum(d[:K])
    assert compute_sigma2(reprs, K) == pytest.approx(total / (6 * K), rel=1e-12)


def test_degenerate_camera():
    with pytest.raises(DegenerateCameraError):
        compute_sigma2([[1.0, 2.0]], 1)
    with pytest.raises(DegenerateCameraError):
        build_affinity(LINE, 3)
    assert np.array_equal(build_affinity([[1.0, 2.0]], 0), np.eye(1))


def test_affinity_k0_is_identity(rng):
    assert np.array_equal(build_affinity(rng.normal(size=(5, 2)), 0), np.eye(5))


def test_affinity_collinear_row():
    A = build_affinity(LINE, 1)
    assert A[0, 1] == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert A[0, 2] == 0.0
    assert np.array_equal(np.diag(A), np.ones(3))


def test_affinity_coincident_pair():
    A = build_affinity([[0.0, 0.0], [0.0, 0.0], [5.0, 5.0]], 1)
    assert A[0, 1] == 1.0 and A[1, 0] == 1.0


def test_soft_label_examples():
    assert np.array_equal(soft_labels(np.eye(3)), np.eye(3))
    assert np.allclose(soft_labels([[1.0, 1.0, 0.0]]), [[0.5, 0.5, 0.0]])
    e = math.exp(-0.5)
    row = soft_labels([[1.0, e, 0.0]])[0]
    assert row == pytest.approx([1 / (1 + e), e / (1 + e), 0.0], abs=1e-15)
    assert row[:2] == pytest.approx([0.6225, 0.3775], abs=1e-4)


def test_coincident_mutual_neighbours_share_mass():
    reprs = np.array([[0.0, 0.0], [0.0, 0.0], [4.0, 0.0], [9.0, 1.0]])
    Y = soft_labels(build_affinity(reprs, 1))
    assert Y[0, 0] == Y[0, 1]


def test_soft_ce_hand_values():
    loss, grad = soft_ce_loss([1.0, 0.0], [0.7, 0.3])
    assert loss == pytest.approx(math.log(1 + math.exp(-1)) + 0.3, abs=1e-14)
    assert loss == pytest.approx(0.6133, abs=1e-4)
    sig = 1 / (1 + math.exp(-1))
    assert grad == pytest.approx([sig - 0.7, (1 - sig) - 0.3], abs=1e-15)
    assert grad == pytest.approx([0.0311, -0.0311], abs=1e-4)


def test_soft_ce_uniform_and_one_hot():
    loss, _ = soft_ce_loss(np.zeros(5), np.full(5, 0.2))
    assert loss == pytest.approx(math.log(5), abs=1e-14)
    z = np.array([0.3, -1.2, 2.0])
    hard = -(z[2] - math.log(sum(math.exp(v) for v in z)))
    assert soft_ce_loss(z, [0, 0, 1])[0] == pytest.approx(hard, rel=1e-14)


def test_soft_ce_gradient_finite_differences(rng):
    z = rng.normal(size=6)
    y = rng.random(6)
    y /= y.sum()
    _, grad = soft_ce_loss(z, y)
    h = 1e-6
    num = np.array([(soft_ce_loss(z + h * e, y)[0] - soft_ce_loss(z - h * e, y)[0]) / (2 * h) for e in np.eye(6)])
    assert np.max(np.abs(num - grad) / np.maximum(np.abs(grad), 1e-6)) < 1e-5


def test_soft_ce_large_logits_stay_finite():
    loss, grad = soft_ce_loss([1000.0, 0.0], [0.0, 1.0])
    assert loss == pytest.approx(1000.0)
    assert np.all(np.isfinite(grad))


def test_soft_ce_rejects_non_finite():
    with pytest.raises(NumericError):
        soft_ce_loss([np.inf, 0.0], [1.0, 0.0])


def _scalar_soft_ce(z, y):
    mx = max(z)
    lse = mx + math.log(sum(math.exp(v - mx) for v in z))
    return -sum(p * (v - lse) for v, p in zip(z, y) if p > 0)


def test_pctd_batch_loss_matches_scalar_loop(rng):
    classes = (3, 4)
    model = tiny_model(rng, classes=classes)
    batch = random_batch(rng, classes, 5, frames=3, per_cam=2)
    targets = [soft_labels(build_affinity(rng.normal(size=(m, 4)), 2)) for m in classes]
    loss, grads = pctd_batch_loss(model, batch, targets)
    emb = model.forward(batch.x)
    expect = sum(
        _scalar_soft_ce(model.logits(emb[n], int(batch.cameras[n])).tolist(), targets[batch.cameras[n]][batch.classes[n]])
        for n in range(len(batch))
    ) / len(batch)
    assert abs(loss - expect) <= 1e-12 * max(1.0, abs(expect))
    assert len(grads) == len(batch) and all(g is not None for g in grads)


def test_pctd_batch_of_one_equals_soft_ce(rng):
    model = tiny_model(rng)
    batch = Batch([1], [2], [2], rng.normal(size=(1, 5)))
    Y = [np.eye(3), soft_labels(build_affinity(rng.normal(size=(4, 2)), 2))]
    loss, grads = pctd_batch_loss(model, batch, Y)
    ref, g = soft_ce_loss(model.logits(model.forward(batch.x[0]), 1), Y[1][2])
    assert loss == pytest.approx(ref, rel=1e-14)
    assert np.allclose(grads[0], g)


def test_pctd_identical_frames_one_hot(rng):
    model = tiny_model(rng)
    x = np.repeat(rng.normal(size=(1, 5)), 4, axis=0)
    batch = Batch([0, 0, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1], x)
    loss, _ = pctd_batch_loss(model, batch, [np.eye(3), np.eye(4)])
    z = model.logits(model.forward(x[0]), 0)
    assert loss == pytest.approx(_scalar_soft_ce(z.tolist(), [0, 1, 0]), rel=1e-13)


def test_pctd_batch_index_errors(rng):
    model = tiny_model(rng)
    with pytest.raises(IndexError):
        pctd_batch_loss(model, Batch([0], [5], [5], rng.normal(size=(1, 5))), [np.eye(3), np.eye(4)])
    with pytest.raises(IndexError):
        pctd_batch_loss(model, Batch([2], [0], [0], rng.normal(size=(1, 5))), [np.eye(3), np.eye(4)])


def union_find_components(A, threshold):
    m = len(A)
    parent = list(range(m))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(m):
        for j in range(m):
            if i != j and max(A[i][j], A[j][i]) > threshold:
                parent[find(i)] = find(j)
    groups = {}
    for i in range(m):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def test_components_identity():
    assert mergeable_components(np.eye(4)) == [[0], [1], [2], [3]]


def test_components_single_edge():
    A = np.eye(4)
    A[0, 1] = 0.9
    assert mergeable_components(A) == [[0, 1], [2], [3]]


def test_components_chain():
    A = np.eye(3)
    A[0, 1] = A[1, 2] = 0.6
    assert mergeable_components(A) == [[0, 1, 2]] == union_find_components(A.tolist(), 0.5)


def test_components_threshold_is_strict():
    A = np.eye(3)
    A[0, 1] = 0.5
    assert mergeable_components(A, 0.5) == [[0], [1], [2]]


def test_components_match_union_find(rng):
    for _ in range(50):
        m = int(rng.integers(1, 9))
        reprs = rng.normal(size=(m, 2))
        A = build_affinity(reprs, int(rng.integers(0, m)))
        th = float(rng.uniform(0.05, 0.95))
        assert mergeable_components(A, th) == union_find_components(A.tolist(), th)


def test_sparse_triples():
    A = np.eye(2)
    A[0, 1] = 0.25
    assert sparse_triples(3, A) == ["3,0,0,1.0", "3,0,1,0.25", "3,1,1,1.0"]
