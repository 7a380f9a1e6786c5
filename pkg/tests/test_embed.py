import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import make_split
from genrec.embed import (
    BprConfig,
    GcnConfig,
    GcnModel,
    MfModel,
    bpr_loss,
    gcn_forward,
    gcn_loss,
    gcn_train,
    inertia,
    kmeans,
    kmeans_plusplus,
    lloyd,
    mf_bpr_train,
    normalized_adjacency,
    sample_negatives,
    zscore,
)
from test_spectral import graph_from_edges


def central_diff_check(params, loss_fn, rng, samples=12, eps=1e-6):
    """Compare autograd to central differences on randomly chosen entries."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in params:
        grad = p.grad.clone()
        flat = p.data.view(-1)
        for k in rng.choice(flat.numel(), size=min(samples, flat.numel()), replace=False):
            old = flat[k].item()
            with torch.no_grad():
                flat[k] = old + eps
                hi = loss_fn().item()
                flat[k] = old - eps
                lo = loss_fn().item()
                flat[k] = old
            num = (hi - lo) / (2 * eps)
            ana = grad.view(-1)[k].item()
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst


# -- GCN -------------------------------------------------------------------


def two_components():
    return graph_from_edges(6, [(0, 1, 1), (1, 2, 2), (0, 2, 1), (3, 4, 1), (4, 5, 3)])


def test_normalized_adjacency_dense_oracle():
    g = two_components()
    a = g.dense() + np.eye(6)
    d = np.diag(1 / np.sqrt(a.sum(1)))
    np.testing.assert_allclose(normalized_adjacency(g).to_dense().numpy(), d @ a @ d, atol=1e-15)


def test_zero_weights_uniform_output():
    g = two_components()
    model = GcnModel(6, 4, 3)
    with torch.no_grad():
        model.w1.zero_()
        model.w2.zero_()
    hidden, logits = gcn_forward(model, g)
    assert np.all(hidden == 0)
    probs = torch.softmax(torch.from_numpy(logits), -1).numpy()
    np.testing.assert_allclose(probs, 1 / 3)
    targets = torch.tensor([0, 0, 0, 1, 1, 2])
    loss = gcn_loss(model, normalized_adjacency(g), targets).item()
    assert loss == pytest.approx(6 * math.log(3), rel=1e-12)


def test_single_node_identity():
    g = graph_from_edges(1, [])
    model = GcnModel(1, 2, 2)
    with torch.no_grad():
        model.features.copy_(torch.tensor([[1.0, 0.0]]))
        model.w1.copy_(torch.eye(2))
        model.w2.copy_(torch.eye(2))
    hidden, logits = gcn_forward(model, g)
    assert hidden.tolist() == [[1.0, 0.0]]
    assert logits.tolist() == [[1.0, 0.0]]


def test_two_node_hand_computed():
    g = graph_from_edges(2, [(0, 1, 1)])
    model = GcnModel(2, 2, 2)
    f = np.array([[1.0, 2.0], [3.0, -1.0]])
    w1 = np.array([[0.5, -1.0], [1.0, 0.25]])
    w2 = np.array([[1.0, 2.0], [-1.0, 0.5]])
    with torch.no_grad():
        model.features.copy_(torch.from_numpy(f))
        model.w1.copy_(torch.from_numpy(w1))
        model.w2.copy_(torch.from_numpy(w2))
    # A + I = all ones, degrees 2, so Â = 0.5 * ones
    a_hat = np.full((2, 2), 0.5)
    agg = a_hat @ f  # [[2, .5], [2, .5]]
    h = np.maximum(agg @ w1, 0)  # [[1.5, -1.875 -> 0]]
    assert h[0].tolist() == [1.5, 0.0]
    hidden, logits = gcn_forward(model, g)
    np.testing.assert_allclose(hidden, h, atol=1e-14)
    np.testing.assert_allclose(logits, a_hat @ h @ w2, atol=1e-14)


def test_gcn_loss_decreases():
    losses = []
    gcn_train(two_components(), np.array([1, 1, 1, 2, 2, 2]), GcnConfig(dim=8, epochs=5, seed=0), losses)
    assert len(losses) == 5
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_gcn_gradients_match_finite_differences():
    g = two_components()
    torch.manual_seed(0)
    model = GcnModel(6, 5, 3, generator=torch.Generator().manual_seed(4))
    a_hat = normalized_adjacency(g)
    targets = torch.tensor([0, 0, 1, 1, 2, 2])
    worst = central_diff_check(
        list(model.parameters()), lambda: gcn_loss(model, a_hat, targets), np.random.default_rng(0)
    )
    assert worst < 1e-4


def test_gcn_train_shapes_and_determinism():
    labels = np.array([1, 1, 1, 2, 2, 2])
    a = gcn_train(two_components(), labels, GcnConfig(dim=8, epochs=20, seed=3))
    b = gcn_train(two_components(), labels, GcnConfig(dim=8, epochs=20, seed=3))
    assert a.shape == (6, 8) and np.isfinite(a).all()
    assert np.array_equal(a, b)


def test_gcn_train_rejects_partial_labels():
    with pytest.raises(ValueError):
        gcn_train(two_components(), np.array([1, 2]), GcnConfig(dim=4, epochs=1))


# -- BPR -------------------------------------------------------------------


def test_bpr_tie_is_ln2():
    model = MfModel(1, 2, 3)
    with torch.no_grad():
        model.item[1].copy_(model.item[0])
    loss = bpr_loss(model, torch.tensor([0]), torch.tensor([0]), torch.tensor([[1]]))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("mode", ["bpr", "softmax"])
def test_bpr_gradients_match_finite_differences(mode):
    model = MfModel(3, 4, 5, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        for p in model.parameters():
            p.mul_(10)  # move away from the tiny-init regime
    users = torch.tensor([0, 1, 2, 0])
    pos = torch.tensor([0, 1, 2, 3])
    neg = torch.tensor([[1, 2], [3, 0], [0, 1], [2, 1]])
    worst = central_diff_check(
        list(model.parameters()),
        lambda: bpr_loss(model, users, pos, neg, mode),
        np.random.default_rng(2),
    )
    assert worst < 1e-4


def test_softmax_mode_single_negative_equals_bpr():
    model = MfModel(2, 3, 4, generator=torch.Generator().manual_seed(0))
    args = (torch.tensor([0, 1]), torch.tensor([0, 2]), torch.tensor([[1], [0]]))
    a = bpr_loss(model, *args, mode="bpr")
    b = bpr_loss(model, *args, mode="softmax")
    assert a.item() == pytest.approx(b.item(), rel=1e-12)


def test_bpr_unknown_mode():
    model = MfModel(1, 2, 2)
    with pytest.raises(ValueError):
        bpr_loss(model, torch.tensor([0]), torch.tensor([0]), torch.tensor([[1]]), mode="hinge")


def planted_two_block():
    rng = np.random.default_rng(0)
    hist = {}
    for u in range(20):
        block = range(0, 10) if u < 10 else range(10, 20)
        hist[u] = rng.choice(list(block), size=6, replace=False).tolist()
    return make_split(hist, num_items=20)


def test_bpr_recovers_blocks():
    users, items = mf_bpr_train(planted_two_block(), BprConfig(dim=8, epochs=60, lr=0.1, seed=0))
    scores = users @ items.T
    ub = np.arange(20) >= 10
    ib = np.arange(20) >= 10
    same = ub[:, None] == ib[None, :]
    assert scores[same].mean() > scores[~same].mean()


def test_bpr_skips_saturated_users():
    split = make_split({0: [0, 1], 1: [0]}, num_items=2)
    losses = []
    u, i = mf_bpr_train(split, BprConfig(dim=4, epochs=3), losses)
    assert u.shape == (2, 4) and i.shape == (2, 4)
    assert len(losses) == 3 and all(np.isfinite(losses))


def test_negatives_avoid_history():
    split = planted_two_block()
    users = np.repeat(np.arange(20), 5)
    neg = sample_negatives(split, users, 3, np.random.default_rng(0))
    for u, row in zip(users, neg):
        assert not set(row.tolist()) & set(split.train[u])


def test_bpr_deterministic():
    a = mf_bpr_train(planted_two_block(), BprConfig(dim=4, epochs=3, seed=9))
    b = mf_bpr_train(planted_two_block(), BprConfig(dim=4, epochs=3, seed=9))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


# -- z-score ---------------------------------------------------------------


def test_zscore_examples():
    out = zscore(np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]))
    np.testing.assert_allclose(out[:, 0], [-1.2247448714, 0, 1.2247448714], atol=1e-9)
    assert np.all(out[:, 1] == 0)


@given(
    st.integers(2, 30),
    st.integers(1, 6),
    st.integers(0, 2**31 - 1),
)
@settings(max_examples=60, deadline=None)
def test_zscore_properties(rows, cols, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(rows, cols)) * rng.uniform(0.1, 100, size=cols) + rng.normal(size=cols) * 50
    X[:, 0] = 7.0  # always one constant column
    Z = zscore(X)
    assert np.abs(Z.mean(0)).max() < 1e-9
    std = Z.std(0)
    assert std[0] == 0
    assert np.all((std == 0) | (np.abs(std - 1) < 1e-9))
    np.testing.assert_allclose(zscore(Z), Z, atol=1e-9)


# -- K-means ---------------------------------------------------------------


def test_kmeans_separated():
    X = np.array([[0.0], [0.1], [10.0], [10.1]])
    labels, _ = kmeans(X, 2)
    assert labels.tolist() == [1, 1, 2, 2]


def test_kmeans_one_per_point():
    X = np.random.default_rng(0).normal(size=(7, 3))
    labels, cents = kmeans(X, 7)
    assert sorted(labels.tolist()) == list(range(1, 8))
    assert inertia(X, labels) == pytest.approx(0.0, abs=1e-20)


def test_kmeans_duplicate_points():
    X = np.zeros((4, 2))
    labels, cents = kmeans(X, 3)
    assert len(labels) == 4 and set(labels.tolist()) <= {1, 2, 3}


def best_two_partition(X):
    n = len(X)
    best = np.inf
    for mask in itertools.product([0, 1], repeat=n - 1):
        lab = np.array((0,) + mask)
        if lab.max() == 0:
            continue
        best = min(best, inertia(X, lab))
    return best


@pytest.mark.parametrize("seed", range(5))
def test_kmeans_matches_exhaustive_optimum(seed):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(0, 1, size=(4, 2)), rng.normal(3, 1, size=(4, 2))])
    labels, _ = kmeans(X, 2, seed=seed)
    assert inertia(X, labels) == pytest.approx(best_two_partition(X), rel=1e-12)


@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
@settings(max_examples=50, deadline=None)
def test_lloyd_inertia_non_increasing(seed, k):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(25, 3))
    run = lloyd(X, kmeans_plusplus(X, k, rng))
    assert all(b <= a + 1e-9 for a, b in zip(run.history, run.history[1:]))


def test_kmeans_labels_first_appearance_and_deterministic():
    X = np.random.default_rng(5).normal(size=(40, 2))
    a, ca = kmeans(X, 5, seed=1)
    b, cb = kmeans(X, 5, seed=1)
    assert np.array_equal(a, b) and np.array_equal(ca, cb)
    firsts = [a.tolist().index(c) for c in range(1, 6)]
    assert firsts == sorted(firsts)


def test_kmeans_bad_cluster_count():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 4)
