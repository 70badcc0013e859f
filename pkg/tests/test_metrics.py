import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from feddsr.errors import ContractError, DataError, DimensionError
from feddsr.metrics import compute_metrics, evaluate, new_confusion, update_confusion


def brute_force_metrics(cm):
    """Per-class loop over the definitions, excluding absent classes."""
    k = len(cm)
    vals = {"iou": [], "f1": [], "pre": [], "rec": []}
    for c in range(k):
        tp = cm[c][c]
        fp = sum(cm[r][c] for r in range(k)) - tp
        fn = sum(cm[c][r] for r in range(k)) - tp
        if tp + fp + fn == 0:
            continue
        pre = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        vals["iou"].append(tp / (tp + fp + fn))
        vals["pre"].append(pre)
        vals["rec"].append(rec)
        vals["f1"].append(2 * pre * rec / (pre + rec) if pre + rec else 0.0)
    return tuple(100.0 * sum(v) / len(v) for v in (vals["iou"], vals["f1"], vals["pre"], vals["rec"]))


def test_perfect_predictions_diagonal():
    labels = np.array([[0, 1], [2, 2]])
    cm = update_confusion(new_confusion(3), labels, labels)
    assert (cm == np.diag(np.diag(cm))).all()
    m = compute_metrics(cm)
    assert (m.miou, m.mf1, m.mpre, m.mrec) == (100.0, 100.0, 100.0, 100.0)


def test_all_predicted_zero():
    labels = np.array([[0, 1], [2, 1]])
    cm = update_confusion(new_confusion(3), np.zeros_like(labels), labels)
    assert cm[:, 0].sum() == 4 and cm[:, 1:].sum() == 0


def test_confusion_matches_double_loop(rng):
    pred = rng.integers(0, 4, size=(3, 5, 5))
    lab = rng.integers(0, 4, size=(3, 5, 5))
    cm = update_confusion(new_confusion(4), pred, lab)
    ref = np.zeros((4, 4), dtype=np.int64)
    for a, b in zip(lab.ravel(), pred.ravel()):
        ref[a, b] += 1
    np.testing.assert_array_equal(cm, ref)


def test_ignore_label_skipped():
    lab = np.array([[0, 255], [1, 1]])
    pred = np.array([[0, 1], [1, 0]])
    cm = update_confusion(new_confusion(2), pred, lab)
    assert cm.sum() == 3


def test_class_out_of_range():
    with pytest.raises(DataError):
        update_confusion(new_confusion(2), np.array([0, 3]), np.array([0, 1]))
    with pytest.raises(DataError):
        update_confusion(new_confusion(2), np.array([0, 1]), np.array([0, 2]))
    with pytest.raises(DimensionError):
        update_confusion(new_confusion(2), np.array([0, 1]), np.array([0]))


def test_hand_case_miou():
    m = compute_metrics(np.array([[50, 10], [20, 20]]))
    assert m.miou == pytest.approx(51.25, abs=1e-12)


def test_absent_class_excluded():
    cm = np.array([[50, 10, 0], [20, 20, 0], [0, 0, 0]])
    a = compute_metrics(cm)
    b = compute_metrics(np.array([[50, 10], [20, 20]]))
    assert a == b


def test_empty_matrix():
    with pytest.raises(ContractError):
        compute_metrics(np.zeros((3, 3)))


@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_matches_brute_force(k, seed):
    rng = np.random.default_rng(seed)
    cm = rng.integers(0, 50, size=(k, k)) * (rng.uniform(size=(k, k)) < 0.7)
    if cm.sum() == 0:
        cm[0, 0] = 1
    got = compute_metrics(cm)
    want = brute_force_metrics(cm.tolist())
    for g, w in zip((got.miou, got.mf1, got.mpre, got.mrec), want):
        assert g == pytest.approx(w, rel=1e-12, abs=1e-12)


def test_evaluate_counts_every_pixel(rng):
    from feddsr.data import SceneConfig, generate_dataset
    from feddsr.model import build_network
    from feddsr.tensor import RngStream

    ds = generate_dataset(SceneConfig(height=8, width=8), 7, RngStream(0))
    net = build_network(3, 2, 4, 0)
    cm, ent = evaluate(net, ds, taps=(1, 3), batch_size=3)
    assert cm.sum() == 7 * 64
    assert len(ent) == 2
    assert 0 <= ent[0] <= np.log(2) + 1e-6
    assert 0 <= ent[1] <= np.log(4) + 1e-6
