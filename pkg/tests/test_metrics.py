import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from selftrain_backdoor.dataio import ImageDataset
from selftrain_backdoor.errors import ValidationError
from selftrain_backdoor.harness.metrics import (EvalResult, attack_success_rate, eval_model, eval_predictions,
                                                standard_accuracy)
from selftrain_backdoor.trainer import ModelSpec, build_model

from conftest import record


def counted_asr(pred, labels, target):
    hits = eligible = 0
    for p, y in zip(pred, labels):
        if y != target:
            eligible += 1
            hits += p == target
    return hits / eligible, eligible


def test_hand_counted_cases():
    ok = True
    # 10 samples, target 1: three target-class rows are excluded, 7 eligible of which 3 hit
    labels = [0, 1, 2, 1, 0, 2, 1, 0, 2, 0]
    pred = [1, 1, 1, 0, 0, 2, 1, 1, 0, 0]
    asr, n = attack_success_rate(pred, labels, 1)
    ok &= (asr, n) == (3 / 7, 7)
    ok &= standard_accuracy(pred, labels) == 5 / 10
    # always-target model: ASR 1 and SA equal to the target share
    labels100 = np.arange(100) % 4
    always = np.full(100, 2)
    res = eval_predictions(always, labels100, always, labels100, 2)
    ok &= res.asr == 1.0 and res.sa == 0.25 and res.n_attack_eligible == 75 and res.n_clean == 100
    # toy half-success case
    asr2, _ = attack_success_rate([1, 0, 1, 2], [0, 0, 2, 2], 1)
    ok &= asr2 == 0.5
    record(7, bool(ok), "hand-counted SA/ASR on 10 and 100 sample cases, target rows excluded")
    assert ok


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=10, max_size=100),
       st.integers(0, 4))
def test_target_class_exclusion(pairs, target):
    labels = [y for y, _ in pairs]
    pred = [p for _, p in pairs]
    if all(y == target for y in labels):
        with pytest.raises(ValidationError):
            attack_success_rate(pred, labels, target)
        return
    asr, n = attack_success_rate(pred, labels, target)
    assert (asr, n) == pytest.approx(counted_asr(pred, labels, target))
    # changing predictions on target-class rows never moves ASR
    flipped = [(p + 1) % 5 if y == target else p for y, p in pairs]
    assert attack_success_rate(flipped, labels, target) == (asr, n)


def test_empty_inputs_raise():
    with pytest.raises(ValidationError):
        standard_accuracy([], [])
    with pytest.raises(ValidationError):
        attack_success_rate([], [], 0)


def test_eval_model_and_roundtrip(tmp_path, small_fixture):
    model = build_model(ModelSpec("tiny_cnn", 4, small_fixture.shape), seed=0)
    model.module.head.weight.data.zero_()
    model.module.head.bias.data.copy_(torch.tensor([0.0, 3.0, 0.0, 0.0]))
    res = eval_model(model, small_fixture, small_fixture, 1)
    assert res.asr == 1.0 and res.sa == 0.25 and res.n_attack_eligible == 36
    res.save(tmp_path / "r.json")
    assert EvalResult.load(tmp_path / "r.json") == res
    with pytest.raises(ValidationError):
        eval_model(model, small_fixture.without_labels(), small_fixture, 1)


def test_unstamped_eval_set_is_allowed(small_fixture):
    ds = ImageDataset(small_fixture.images[:4], [0, 0, 0, 0], 4, "zeros")
    res = eval_predictions([0, 0, 1, 1], ds.labels, [2, 2, 2, 3], ds.labels, 2)
    assert res.sa == 0.5 and res.asr == 0.75
