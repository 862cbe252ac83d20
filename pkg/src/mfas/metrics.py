from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class MetricsReport:
    ua: float
    wa: float
    mse_v: float | None = None
    mse_a: float | None = None
    mse_d: float | None = None
    n: int = 0

    @property
    def mse_mean(self) -> float | None:
        if self.mse_v is None:
            return None
        return (self.mse_v + self.mse_a + self.mse_d) / 3.0

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(predictions, labels, n_classes: int = 4, vad_pred=None, vad_true=None) -> MetricsReport:
    """WA = overall accuracy; UA = mean recall over classes present in ``labels``."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape or pred.size == 0:
        raise ValueError("predictions and labels must be non-empty and of equal length")
    correct = pred == true
    wa = float(correct.mean())
    support = np.bincount(true, minlength=n_classes)
    hits = np.bincount(true[correct], minlength=n_classes)
    present = support > 0
    ua = float(np.mean(hits[present] / support[present]))
    report = MetricsReport(ua=ua, wa=wa, n=int(pred.size))
    if vad_pred is not None and vad_true is not None:
        err = (np.asarray(vad_pred, dtype=np.float64) - np.asarray(vad_true, dtype=np.float64)) ** 2
        report.mse_v, report.mse_a, report.mse_d = (float(x) for x in err.mean(axis=0))
    return report


def utterance_vote(segment_logits, utterance_index) -> tuple[np.ndarray, np.ndarray]:
    """Average segment logits per utterance; returns (utterance ids, argmax class)."""
    logits = np.asarray(segment_logits, dtype=np.float64)
    idx = np.asarray(utterance_index)
    utts, inverse = np.unique(idx, return_inverse=True)
    sums = np.zeros((utts.size, logits.shape[1]))
    np.add.at(sums, inverse, logits)
    counts = np.bincount(inverse, minlength=utts.size)[:, None]
    return utts, (sums / counts).argmax(axis=1)


def utterance_mean(segment_values, utterance_index) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(segment_values, dtype=np.float64)
    utts, inverse = np.unique(np.asarray(utterance_index), return_inverse=True)
    sums = np.zeros((utts.size,) + values.shape[1:])
    np.add.at(sums, inverse, values)
    counts = np.bincount(inverse, minlength=utts.size).reshape((-1,) + (1,) * (values.ndim - 1))
    return utts, sums / counts
