"""Segmentation evaluation: subject Dice, pooled Dice, precision, recall.

Degenerate denominators follow one fixed convention, recorded in every
report: if prediction and truth are both empty the subject scores 1.0 on
dice/precision/recall; an empty prediction against a non-empty truth scores
precision 0; a non-empty prediction against an empty truth scores recall 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

DEGENERATE_CONVENTION = "empty/empty -> 1.0; empty pred -> precision 0; empty truth -> recall 0"


@dataclass
class SubjectMetrics:
    subject_id: str
    p_dice: float
    precision: float
    recall: float
    pred_voxels: int
    gt_voxels: int
    overlap_voxels: int


@dataclass
class MetricsReport:
    subjects: list[SubjectMetrics]
    p_dice: float
    v_dice: float
    precision: float
    recall: float

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    def cohort(self) -> dict[str, float]:
        return {
            "p_dice": self.p_dice,
            "v_dice": self.v_dice,
            "precision": self.precision,
            "recall": self.recall,
        }

    def to_dict(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "cohort": self.cohort(),
            "subjects": [asdict(s) for s in self.subjects],
            "degenerate_convention": DEGENERATE_CONVENTION,
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["subject_id", "p_dice", "precision", "recall", "pred_voxels", "gt_voxels"])
            for s in self.subjects:
                w.writerow([s.subject_id, s.p_dice, s.precision, s.recall, s.pred_voxels, s.gt_voxels])
            w.writerow(["cohort", self.p_dice, self.precision, self.recall, "", ""])
            w.writerow(["cohort_v_dice", self.v_dice, "", "", "", ""])


def binarize(probs: np.ndarray) -> np.ndarray:
    """Two-channel probability map [2, *spatial] -> argmax mask; ties go to background."""
    probs = np.asarray(probs)
    if probs.shape[0] != 2:
        raise ConfigurationError("expected a two-channel probability map with channels first")
    return (probs[1] > 0.5).astype(np.uint8)


def _binary(arr: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(arr)
    if not np.isin(a, (0, 1)).all():
        raise ConfigurationError(f"{what} mask must be binary")
    return a.astype(bool)


def evaluate(
    predictions: list[np.ndarray],
    truths: list[np.ndarray],
    subject_ids: list[str] | None = None,
) -> MetricsReport:
    """Score binary predictions against clean ground truth, per subject and pooled."""
    if len(predictions) != len(truths):
        raise ConfigurationError("predictions and truths must pair up one per subject")
    if not predictions:
        raise ConfigurationError("empty cohort")
    if subject_ids is None:
        subject_ids = [f"subject{i:03d}" for i in range(len(predictions))]

    subjects = []
    total_overlap = total_pred = total_gt = 0
    for sid, pred, truth in zip(subject_ids, predictions, truths):
        p = _binary(pred, "prediction")
        y = _binary(truth, "truth")
        if p.shape != y.shape:
            raise ConfigurationError(f"shape mismatch for {sid}: {p.shape} vs {y.shape}")
        overlap = int((p & y).sum())
        np_, ny = int(p.sum()), int(y.sum())
        if np_ == 0 and ny == 0:
            dice = precision = recall = 1.0
        else:
            dice = 2.0 * overlap / (np_ + ny)
            precision = overlap / np_ if np_ > 0 else 0.0
            recall = overlap / ny if ny > 0 else 0.0
        subjects.append(SubjectMetrics(sid, dice, precision, recall, np_, ny, overlap))
        total_overlap += overlap
        total_pred += np_
        total_gt += ny

    v_dice = 1.0 if total_pred + total_gt == 0 else 2.0 * total_overlap / (total_pred + total_gt)
    return MetricsReport(
        subjects=subjects,
        p_dice=float(np.mean([s.p_dice for s in subjects])),
        v_dice=v_dice,
        precision=float(np.mean([s.precision for s in subjects])),
        recall=float(np.mean([s.recall for s in subjects])),
    )
