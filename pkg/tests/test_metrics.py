import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointprompt.errors import DataError
from pointprompt.metrics import confusion, miou, per_class_iou


def test_hand_confusion_and_miou():
    cm = confusion([0, 1, 1], [0, 0, 1], 2)
    assert cm.tolist() == [[1, 1], [0, 1]]
    score, ious = miou(cm)
    assert ious.tolist() == [0.5, 0.5] and score == 0.5


def test_perfect_prediction_is_diagonal():
    labels = np.array([0, 2, 2, 1, 0])
    cm = confusion(labels, labels, 3)
    assert np.array_equal(cm, np.diag([2, 1, 2]))
    assert miou(cm)[0] == 1.0


def test_single_off_diagonal_cell():
    cm = confusion([1, 1, 1], [0, 0, 0], 2)
    assert cm.tolist() == [[0, 3], [0, 0]]


def test_absent_class_is_excluded():
    score, ious = miou(confusion([0, 0, 2], [0, 0, 2], 4))
    assert np.isnan(ious[1]) and np.isnan(ious[3])
    assert score == 1.0


def test_errors():
    with pytest.raises(DataError):
        confusion([0, 3], [0, 1], 3)
    with pytest.raises(DataError):
        confusion([0, 1], [0], 3)
    with pytest.raises(DataError):
        miou(np.zeros((3, 3), dtype=np.int64))


labels = st.lists(st.integers(0, 4), min_size=1, max_size=60)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_merge_and_permutation_invariance(data):
    n1 = data.draw(st.integers(1, 30))
    n2 = data.draw(st.integers(1, 30))
    arr = lambda n: np.array(data.draw(st.lists(st.integers(0, 4), min_size=n, max_size=n)))  # noqa: E731
    p1, t1, p2, t2 = arr(n1), arr(n1), arr(n2), arr(n2)
    merged = confusion(p1, t1, 5) + confusion(p2, t2, 5)
    joint = confusion(np.concatenate([p1, p2]), np.concatenate([t1, t2]), 5)
    assert np.array_equal(merged, joint)
    assert merged.sum() == n1 + n2
    perm = np.random.default_rng(n1).permutation(n1)
    assert miou(confusion(p1[perm], t1[perm], 5))[0] == miou(confusion(p1, t1, 5))[0]
    s = miou(joint)[0]
    assert 0.0 <= s <= 1.0
    np.testing.assert_array_equal(np.isnan(per_class_iou(joint)), (joint.sum(0) + joint.sum(1)) == 0)
