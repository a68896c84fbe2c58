import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from selftrain_backdoor.errors import InputError, ValidationError
from selftrain_backdoor.sslcluster import (ClusterModel, EmptyClusterError, SimCLRConfig, SSLSelfTrainConfig,
                                           cluster_pseudolabel, embed, fit_clusters, kmeans, l2_normalize,
                                           load_encoder, nearest_centroid, nt_xent_loss, run_ssl_selftrain,
                                           save_encoder, simclr_augment, train_simclr, vote_labels)
from selftrain_backdoor.selftrain import SelfTrainConfig
from selftrain_backdoor.trainer import ModelSpec, TrainConfig, train

from conftest import record


def nt_xent_brute(z1, z2, tau):
    """Per-anchor loop over the 2B views with plain Python floats."""
    views = [list(map(float, v)) for v in np.concatenate([z1, z2])]
    views = [[x / math.sqrt(sum(y * y for y in v)) for x in v] for v in views]
    b = len(z1)
    total = 0.0
    for i in range(2 * b):
        pos = (i + b) % (2 * b)
        sims = {k: sum(p * q for p, q in zip(views[i], views[k])) / tau for k in range(2 * b) if k != i}
        denom = sum(math.exp(s) for s in sims.values())
        total += -math.log(math.exp(sims[pos]) / denom)
    return total / (2 * b)


def test_nt_xent_matches_brute_force():
    rng = np.random.default_rng(0)
    ok = True
    for b in range(2, 9):
        for tau in (0.1, 0.5, 1.0):
            z1, z2 = rng.normal(size=(b, 5)), rng.normal(size=(b, 5))
            got = nt_xent_loss(torch.tensor(z1), torch.tensor(z2), tau).item()
            ok &= abs(got - nt_xent_brute(z1, z2, tau)) < 1e-6
    degenerate = True
    for b in range(2, 9):
        z = torch.ones(b, 4, dtype=torch.float64)
        degenerate &= abs(nt_xent_loss(z, z, 0.5).item() - math.log(2 * b - 1)) < 1e-6
    record(4, ok and degenerate, "NT-Xent vs brute force for B=2..8; identical views give log(2B-1)")
    assert ok and degenerate


def test_nt_xent_gradient_flows():
    z1 = torch.randn(4, 3, requires_grad=True)
    nt_xent_loss(z1, torch.randn(4, 3), 0.5).backward()
    assert torch.isfinite(z1.grad).all() and z1.grad.abs().sum() > 0


def blobs(rng, n=40, d=8, sep=5.0):
    centers = np.zeros((2, d))
    centers[0, 0], centers[1, 1] = sep, sep
    x = np.concatenate([centers[0] + rng.normal(scale=0.3, size=(n, d)),
                        centers[1] + rng.normal(scale=0.3, size=(n, d))])
    return x, np.repeat([0, 1], n)


def purity(assign, truth):
    return sum(np.bincount(truth[assign == j]).max() for j in np.unique(assign)) / len(truth)


def test_two_blobs_purity_and_vote(rng):
    x, truth = blobs(rng)
    cm = kmeans(x, 2, seed=0)
    p = purity(cm.assignments, truth)
    voted = vote_labels(cm, truth)
    relabeled = voted.cluster_labels[cm.assignments]
    ok = p == 1.0 and np.array_equal(relabeled, truth)
    tie = ClusterModel(np.zeros((1, 2)), np.zeros(4, np.int64), 0.0, 1)
    ties_ok = vote_labels(tie, [3, 1, 3, 1]).cluster_labels.tolist() == [1]
    ties_ok &= vote_labels(tie, [2, 0, 2, 0], class_count=4).cluster_labels.tolist() == [0]
    nc_ok = _nearest_centroid_matches_oracle()
    record(6, ok and ties_ok and nc_ok, f"blob purity {p:.2f}, vote ties to smallest id, nearest centroid")
    assert ok and ties_ok and nc_ok


def test_kmeans_properties(rng):
    x = rng.normal(size=(60, 4))
    one = kmeans(x, 1, seed=0)
    assert np.allclose(one.centroids[0], l2_normalize(x).mean(axis=0))
    cm = kmeans(x, 4, seed=1)
    assert all(a >= b - 1e-12 for a, b in zip(cm.inertia_trace, cm.inertia_trace[1:]))
    again = kmeans(x, 4, seed=1)
    assert np.array_equal(cm.assignments, again.assignments)
    # best of restarts is no worse than a single seeding
    assert cm.inertia <= kmeans(x, 4, seed=1, n_init=1).inertia + 1e-12
    with pytest.raises(ValidationError):
        kmeans(x[:3], 4, seed=0)
    with pytest.raises(ValidationError):
        kmeans(x, 0, seed=0)


def test_vote_majority_and_errors():
    cm = ClusterModel(np.zeros((2, 2)), np.array([0, 0, 0, 1, 1]), 0.0, 1)
    assert vote_labels(cm, [1, 1, 2, 0, 0]).cluster_labels.tolist() == [1, 0]
    empty = ClusterModel(np.zeros((3, 2)), np.array([0, 0, 1]), 0.0, 1)
    with pytest.raises(EmptyClusterError):
        vote_labels(empty, [0, 1, 2])
    with pytest.raises(ValidationError):
        vote_labels(cm, [0, 1])


@given(st.lists(st.integers(0, 4), min_size=1, max_size=30), st.integers(0, 1000))
def test_vote_ignores_member_order(labels, seed):
    n = len(labels)
    perm = np.random.default_rng(seed).permutation(n)
    cm = ClusterModel(np.zeros((1, 2)), np.zeros(n, np.int64), 0.0, 1)
    a = vote_labels(cm, labels).cluster_labels[0]
    b = vote_labels(cm, np.asarray(labels)[perm]).cluster_labels[0]
    counts = np.bincount(labels)
    assert a == b == min(np.flatnonzero(counts == counts.max()))


def test_fit_clusters_reseeds_empty(rng):
    x, truth = blobs(rng)
    cm = fit_clusters(x, truth, 2, seed=0)
    assert cm.cluster_labels is not None and sorted(cm.cluster_labels.tolist()) == [0, 1]


def _nearest_centroid_matches_oracle():
    rng = np.random.default_rng(5)
    ok = True
    for _ in range(20):
        h = l2_normalize(rng.normal(size=(30, 3)))
        c = rng.normal(size=(int(rng.integers(1, 6)), 3))
        idx, conf = nearest_centroid(h, c)
        for i, v in enumerate(h):
            d = [math.dist(v, cj) for cj in c]
            best = min(range(len(c)), key=lambda j: (d[j], j))
            ok &= idx[i] == best
            e = [math.exp(-dj) for dj in d]
            ok &= abs(conf[i] - e[best] / sum(e)) < 1e-9
    # exact ties go to the lowest centroid id
    idx, conf = nearest_centroid(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0], [0.0, -1.0]]))
    ok &= idx.tolist() == [0] and abs(conf[0] - 0.5) < 1e-12
    return bool(ok)


def test_nearest_centroid_oracle():
    assert _nearest_centroid_matches_oracle()


def test_cluster_model_roundtrip(tmp_path, rng):
    x, truth = blobs(rng)
    cm = fit_clusters(x, truth, 2, seed=0)
    cm.save(tmp_path / "c.json")
    back = ClusterModel.load(tmp_path / "c.json")
    assert np.array_equal(back.centroids, cm.centroids)
    assert np.array_equal(back.cluster_labels, cm.cluster_labels)


def test_simclr_augment_shapes_and_range():
    x = torch.rand(6, 3, 8, 8)
    gen = torch.Generator().manual_seed(0)
    y = simclr_augment(x, gen, SimCLRConfig(crop_scale=(0.2, 1.0)))
    assert y.shape == x.shape and y.min() >= 0 and y.max() <= 1
    y2 = simclr_augment(x, torch.Generator().manual_seed(0), SimCLRConfig(crop_scale=(0.2, 1.0)))
    assert torch.equal(y, y2)


@pytest.fixture(scope="module")
def encoder(small_fixture):
    cfg = SimCLRConfig(arch="tiny_cnn", epochs=2, batch_size=16, lr=0.1, proj_dim=16, seed=0)
    return train_simclr(small_fixture.images, cfg)


def test_encoder_embed_and_roundtrip(encoder, small_fixture, tmp_path):
    h = embed(encoder, small_fixture)
    assert h.shape == (len(small_fixture), encoder.feature_dim)
    same = embed(encoder, np.repeat(small_fixture.images[:1], 3, axis=0))
    assert np.allclose(same, same[0])
    save_encoder(encoder, tmp_path / "enc.ckpt")
    back = load_encoder(tmp_path / "enc.ckpt")
    assert np.allclose(embed(back, small_fixture), h, atol=1e-6)
    with pytest.raises(InputError):
        load_encoder(tmp_path / "missing.ckpt")
    with pytest.raises(ValidationError):
        embed(encoder, np.zeros((2, 5, 5, 3), np.float32))


def test_simclr_training_errors_and_determinism(small_fixture, encoder):
    with pytest.raises(ValidationError):
        train_simclr(small_fixture.images, SimCLRConfig(arch="tiny_cnn", batch_size=1))
    with pytest.raises(ValidationError):
        train_simclr(small_fixture.images[:1], SimCLRConfig(arch="tiny_cnn"))
    cfg = SimCLRConfig(arch="tiny_cnn", epochs=2, batch_size=16, lr=0.1, proj_dim=16, seed=0)
    again = train_simclr(small_fixture.images, cfg)
    assert np.array_equal(embed(again, small_fixture), embed(encoder, small_fixture))


def test_cluster_pseudolabel_requires_votes(encoder, small_fixture):
    h = embed(encoder, small_fixture)
    cm = kmeans(h, 4, seed=0)
    with pytest.raises(ValidationError):
        cluster_pseudolabel(encoder, cm, small_fixture.images)
    voted = vote_labels(cm, small_fixture.labels)
    labels, conf = cluster_pseudolabel(encoder, voted, small_fixture.images)
    assert set(labels.tolist()) <= set(voted.cluster_labels.tolist())
    assert np.all((conf > 0) & (conf <= 1))


def test_run_ssl_selftrain_small(encoder, small_fixture, tmp_path):
    spec = ModelSpec("tiny_cnn", 4, small_fixture.shape)
    labeled = small_fixture.subset(np.arange(0, 48, 2), name="l")
    unlabeled = small_fixture.subset(np.arange(1, 48, 2), name="u").without_labels()
    tc = TrainConfig(epochs=1, batch_size=16, lr=0.05, lr_decay=[], seed=0)
    pre = train(labeled, spec, tc)
    cfg = SSLSelfTrainConfig(SimCLRConfig(arch="tiny_cnn"),
                             SelfTrainConfig(iterations=2, fraction_per_iter=0.3, retrain=tc, final=tc))
    res = run_ssl_selftrain(pre, labeled, unlabeled, cfg, run_dir=tmp_path, encoder=encoder)
    assert (tmp_path / "encoder.ckpt").exists() and (tmp_path / "clusters.json").exists()
    first = res.selftrain.tables[0]
    expected, _ = cluster_pseudolabel(encoder, res.clusters, np.concatenate([labeled.images, unlabeled.images]))
    assert np.array_equal(first.label, expected)
    with pytest.raises(ValidationError):
        run_ssl_selftrain(pre, labeled.without_labels(), unlabeled, cfg, encoder=encoder)


def test_brute_force_helper_sanity():
    # two orthogonal views, each paired with itself: hand-evaluated loss at tau = 1
    z1 = np.array([[1.0, 0.0], [0.0, 1.0]])
    expected = -math.log(math.e / (math.e + 2 * math.exp(0.0)))
    assert abs(nt_xent_brute(z1, z1, 1.0) - expected) < 1e-12
