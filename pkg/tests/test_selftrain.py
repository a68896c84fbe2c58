import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from selftrain_backdoor.dataio import ImageDataset
from selftrain_backdoor.errors import EmptyDatasetError, ValidationError
from selftrain_backdoor.selftrain import (TRACE_COLUMNS, PseudoLabelTable, SelfTrainConfig, class_quota,
                                          gather, make_table, pseudo_label, read_trace, run_selftrain,
                                          select_confident)
from selftrain_backdoor.trainer import ModelSpec, TrainConfig, build_model, train

from conftest import record


def random_table(rng, n_records, classes, n_labeled=None, coarse=False):
    n_labeled = rng.integers(0, n_records + 1) if n_labeled is None else n_labeled
    labels = rng.integers(0, classes, n_records)
    conf = rng.random(n_records).astype(np.float32)
    if coarse:  # many exact ties exercise the record-id tie break
        conf = np.round(conf, 1).astype(np.float32)
    return make_table({"L": labels[:n_labeled], "U": labels[n_labeled:]},
                      {"L": conf[:n_labeled], "U": conf[n_labeled:]}, {"n_labeled": n_labeled}, 1)


def selection_oracle(table, quota, classes):
    """Sort every record by (-confidence, record_id) and walk it, filling per-class buckets."""
    rows = sorted(zip(table.record_id.tolist(), table.label.tolist(), table.confidence.tolist()),
                  key=lambda r: (-r[2], r[0]))
    taken = {c: [] for c in range(classes)}
    for rid, lab, _ in rows:
        if len(taken[lab]) < quota:
            taken[lab].append(rid)
    return taken


def test_quota_examples():
    assert class_quota(0.3, 1, 100, 10) == 3
    assert class_quota(0.3, 4, 100, 10) == 12
    # exact rational arithmetic: 0.3 * 10 * 10 / 3 is exactly 10
    assert class_quota(0.3, 10, 10, 3) == 10
    assert class_quota(0.1, 1, 5, 10) == 0
    assert class_quota(1.0, 2, 7, 2) == 7


def test_selection_counts_on_50_random_tables():
    rng = np.random.default_rng(2024)
    ok = True
    for t in range(50):
        classes = int(rng.integers(2, 11))
        table = random_table(rng, int(rng.integers(1, 400)), classes, coarse=bool(t % 2))
        n, k = int(rng.integers(1, 6)), float(rng.choice([0.05, 0.1, 0.3, 0.5, 1.0]))
        sel = select_confident(table, n, k, classes)
        quota = math.floor(k * n * len(table) / classes + 1e-9)
        available = np.bincount(table.label, minlength=classes)
        counts = sel.per_class(classes)
        ok &= sel.quota == quota and np.array_equal(counts, np.minimum(quota, available))
        oracle = selection_oracle(table, quota, classes)
        for c in range(classes):
            ok &= sorted(sel.record_id[sel.label == c].tolist()) == sorted(oracle[c])
        assert len(set(sel.record_id.tolist())) == len(sel)
    record(5, ok, "50 randomized tables, counts = min(quota, available)")
    assert ok


@given(st.integers(0, 10**6), st.integers(2, 6), st.integers(1, 200))
def test_prefix_monotonicity(seed, classes, size):
    rng = np.random.default_rng(seed)
    table = random_table(rng, size, classes, coarse=True)
    prev = set()
    for n in range(1, 5):
        cur = set(select_confident(table, n, 0.2, classes).record_id.tolist())
        assert prev <= cur
        prev = cur


def test_hand_table_ten_records():
    # ids 0-3 labeled pool, 4-9 unlabeled pool; quota floor(0.5 * 1 * 10 / 2) = 2 per class
    labels = {"L": [0, 1, 0, 1], "U": [0, 0, 1, 1, 1, 0]}
    confs = {"L": [0.9, 0.8, 0.9, 0.2], "U": [0.95, 0.1, 0.7, 0.99, 0.8, 0.3]}
    table = make_table(labels, confs, {"n_labeled": 4}, 1)
    assert table.record_id.tolist() == list(range(10))
    assert table.pool.tolist() == ["L"] * 4 + ["U"] * 6
    sel = select_confident(table, 1, 0.5, 2)
    assert sel.quota == 2
    # class 0: 0.95 (id 4), then 0.9 at ids 0 and 2 -> smaller id wins
    assert sel.record_id[sel.label == 0].tolist() == [4, 0]
    # class 1: 0.99 (id 7), then 0.8 at ids 1 and 8 -> id 1
    assert sel.record_id[sel.label == 1].tolist() == [7, 1]


def test_table_csv_roundtrip(tmp_path, rng):
    table = random_table(rng, 30, 3)
    table.save(tmp_path / "t.csv")
    back = PseudoLabelTable.load(tmp_path / "t.csv")
    for name in ("record_id", "pool", "source_index", "label", "confidence"):
        assert np.array_equal(getattr(back, name), getattr(table, name))
    assert back.iteration == 1


def test_config_validation():
    for bad in (dict(iterations=0), dict(fraction_per_iter=0.0), dict(fraction_per_iter=1.5),
                dict(pl_scope="both")):
        with pytest.raises(ValidationError):
            SelfTrainConfig(**bad)
    assert SelfTrainConfig(strong_aug="none").strong_aug is None
    with pytest.raises(ValidationError):
        SelfTrainConfig(strong_aug="nonsense")


@pytest.fixture(scope="module")
def tiny_setup(small_fixture):
    spec = ModelSpec("tiny_cnn", small_fixture.class_count, small_fixture.shape)
    labeled = small_fixture.subset(np.arange(0, 48, 3), name="l")
    unlabeled = small_fixture.subset(np.setdiff1d(np.arange(48), np.arange(0, 48, 3)), name="u")
    model = train(labeled, spec, TrainConfig(epochs=3, batch_size=16, lr=0.05, lr_decay=[], seed=0))
    return model, labeled, unlabeled


def test_scope_contract(tiny_setup):
    model, labeled, unlabeled = tiny_setup
    u_only = pseudo_label(model, labeled, unlabeled.without_labels(), SelfTrainConfig(pl_scope="U_only"))
    assert set(u_only.pool.tolist()) == {"U"} and len(u_only) == len(unlabeled)
    assert u_only.record_id.min() >= len(labeled)
    both = pseudo_label(model, labeled, unlabeled.without_labels(), SelfTrainConfig(pl_scope="L_and_U"))
    assert len(both) == len(labeled) + len(unlabeled)
    with pytest.raises(EmptyDatasetError):
        pseudo_label(model, labeled, unlabeled.images[:0], SelfTrainConfig(pl_scope="U_only"))


def test_pseudo_label_ignores_given_labels_and_is_deterministic(tiny_setup):
    model, labeled, unlabeled = tiny_setup
    cfg = SelfTrainConfig(strong_aug="rcs:0.5+vflip", seed=3)
    scrambled = ImageDataset(labeled.images, (labeled.labels + 1) % labeled.class_count,
                             labeled.class_count, "scrambled")
    a = pseudo_label(model, labeled, unlabeled, cfg)
    b = pseudo_label(model, scrambled, unlabeled, cfg)
    c = pseudo_label(model, labeled.images, unlabeled.images, cfg)
    for t in (b, c):
        assert np.array_equal(a.label, t.label) and np.array_equal(a.confidence, t.confidence)
    plain = pseudo_label(model, labeled, unlabeled, SelfTrainConfig(seed=3))
    # augmentation touches the labeled pool only
    u = a.pool == "U"
    assert np.array_equal(a.confidence[u], plain.confidence[u])
    assert not np.array_equal(a.confidence[~u], plain.confidence[~u])


def test_constant_model_labels_everything_alike(small_fixture):
    # a model whose output ignores its input must give the same pseudo-label everywhere
    spec = ModelSpec("tiny_cnn", small_fixture.class_count, small_fixture.shape)
    model = build_model(spec, seed=0)
    model.module.head.weight.data.zero_()
    model.module.head.bias.data.copy_(torch.tensor([0.0, 0.0, 1.0, 0.0]))
    table = pseudo_label(model, small_fixture.images, small_fixture.images[:5],
                         SelfTrainConfig(strong_aug="gnoise:0.5"))
    assert set(table.label.tolist()) == {2}
    assert np.allclose(table.confidence, table.confidence[0])


def test_gather_uses_original_images(tiny_setup):
    _, labeled, unlabeled = tiny_setup
    sel = select_confident(random_table(np.random.default_rng(0), len(labeled) + len(unlabeled), 4,
                                        n_labeled=len(labeled)), 1, 0.5, 4)
    ds = gather(sel, labeled, unlabeled, 4, "g")
    pool = np.concatenate([labeled.images, unlabeled.images])
    assert np.array_equal(ds.images, pool[sel.record_id])
    assert np.array_equal(ds.labels, sel.label)


def test_run_selftrain_artifacts_and_determinism(tiny_setup, tmp_path):
    model, labeled, unlabeled = tiny_setup
    tc = TrainConfig(epochs=1, batch_size=16, lr=0.05, lr_decay=[], seed=1)
    cfg = SelfTrainConfig(iterations=2, fraction_per_iter=0.3, strong_aug="hflip", retrain=tc, final=tc)
    before = model.weights_digest()
    res = run_selftrain(model, labeled.images, unlabeled, cfg, run_dir=tmp_path)
    assert model.weights_digest() == before  # warm starts never touch the pretrained weights
    assert len(res.iteration_models) == 2 and len(res.selections) == 2
    assert len(res.selections[1]) >= len(res.selections[0])
    for n in (1, 2):
        for f in ("pseudolabels.csv", "selected.csv", "model.ckpt"):
            assert (tmp_path / f"iter_{n}" / f).exists()
    assert (tmp_path / "final" / "model.ckpt").exists()
    rows = read_trace(tmp_path / "trace.csv")
    assert list(rows[0]) == TRACE_COLUMNS
    assert [r["iteration"] for r in rows] == ["0", "1", "2", "final"]
    again = run_selftrain(model, labeled.images, unlabeled, cfg)
    assert again.final.weights_digest() == res.final.weights_digest()
