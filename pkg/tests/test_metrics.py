import numpy as np
import pytest

from nwlearn.errors import ConfigError, ContractError
from nwlearn.metrics import compute_metric, macro_f1, worst_group_accuracy


def test_all_correct():
    probs = np.eye(3)[[0, 1, 2, 1]]
    labels = [0, 1, 2, 1]
    assert compute_metric(probs, labels, None, "accuracy") == 1.0
    assert compute_metric(probs, labels, None, "macro_f1") == 1.0


def test_worst_group_is_min():
    # group 0: 9/10 correct, group 1: 1/2 correct
    labels = [0] * 10 + [1] * 2
    preds = [0] * 9 + [1] + [1, 0]
    probs = np.eye(2)[preds]
    groups = [0] * 10 + [1] * 2
    assert compute_metric(probs, labels, groups, "worst_group_accuracy") == pytest.approx(0.5)
    assert worst_group_accuracy(preds, labels, groups) == pytest.approx(0.5)


def test_macro_f1_hand_case():
    # two examples, both predicted class 1; one true 1 (TP), one true 0 (FP)
    # class 1: P=1/2, R=1 -> F1=2/3; class 0: no preds -> 0; macro = 1/3
    preds = [1, 1]
    labels = [1, 0]
    assert macro_f1(preds, labels, 2) == pytest.approx(1.0 / 3.0)
    probs = np.eye(2)[preds]
    assert compute_metric(probs, labels, None, "macro_f1") == pytest.approx(1.0 / 3.0)


def test_empty_inputs_rejected():
    with pytest.raises(ContractError):
        compute_metric(np.zeros((0, 2)), [], None, "accuracy")
    with pytest.raises(ContractError):
        compute_metric(np.eye(2), [0], None, "accuracy")


def test_unknown_metric_rejected():
    with pytest.raises(ConfigError):
        compute_metric(np.eye(2), [0, 1], None, "auroc")


def test_worst_group_needs_groups():
    with pytest.raises(ContractError):
        compute_metric(np.eye(2), [0, 1], None, "worst_group_accuracy")
