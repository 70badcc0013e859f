"""Pixel confusion matrices and class-mean segmentation metrics."""
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ContractError, DataError, DimensionError
from .model import forward_with_taps
from .ops import IGNORE_LABEL
from .tensor import Tensor


@dataclass
class Metrics:
    miou: float
    mf1: float
    mpre: float
    mrec: float

    def as_dict(self):
        return {"mIoU": self.miou, "mF1": self.mf1, "mPre": self.mpre, "mRec": self.mrec}


def new_confusion(classes):
    return np.zeros((classes, classes), dtype=np.int64)


def update_confusion(cm, predictions, labels, ignore_label=IGNORE_LABEL):
    """Accumulate pixel counts; entry (a, b) counts truth a predicted as b."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise DimensionError(f"predictions {list(predictions.shape)} and labels {list(labels.shape)} differ")
    k = cm.shape[0]
    lab = labels.astype(np.int64).ravel()
    pred = predictions.astype(np.int64).ravel()
    keep = lab != ignore_label
    lab, pred = lab[keep], pred[keep]
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise DataError(f"label class id outside [0,{k})")
    if pred.size and (pred.min() < 0 or pred.max() >= k):
        raise DataError(f"predicted class id outside [0,{k})")
    cm += np.bincount(lab * k + pred, minlength=k * k).reshape(k, k)
    return cm


def compute_metrics(cm):
    """Class-mean IoU, F1, precision and recall, in percent.

    Classes absent from both truth and prediction are left out of every
    mean; a 0/0 ratio for a class that is present counts as 0.
    """
    cm = np.asarray(cm, dtype=np.float64)
    if cm.sum() <= 0:
        raise ContractError("confusion matrix is empty")
    tp = np.diag(cm)
    truth = cm.sum(axis=1)
    pred = cm.sum(axis=0)
    fp = pred - tp
    fn = truth - tp
    present = (truth + pred) > 0

    def ratio(num, den):
        out = np.zeros_like(num)
        np.divide(num, den, out=out, where=den > 0)
        return out

    iou = ratio(tp, tp + fp + fn)
    pre = ratio(tp, tp + fp)
    rec = ratio(tp, tp + fn)
    f1 = ratio(2 * pre * rec, pre + rec)
    return Metrics(*(float(100.0 * v[present].mean()) for v in (iou, f1, pre, rec)))


def evaluate(net, dataset, taps=(), batch_size=100):
    """Held-out confusion matrix and, per tap, the mean per-pixel channel
    entropy of the tap activations.  Runs without a tape."""
    cm = new_confusion(net.classes)
    ent_sum = np.zeros(len(taps))
    seen = 0
    for lo in range(0, len(dataset), batch_size):
        x = Tensor(dataset.images[lo : lo + batch_size], dtype=net.params["enc1.w"].dtype)
        logits, acts = forward_with_taps(net, taps, x)
        update_confusion(cm, logits.data.argmax(axis=1), dataset.labels[lo : lo + batch_size])
        b = x.shape[0]
        for m, z in enumerate(acts):
            ent_sum[m] += -float(ops.neg_entropy(ops.softmax_channels(z)).data) * b
        seen += b
    return cm, (ent_sum / max(seen, 1)).tolist()
