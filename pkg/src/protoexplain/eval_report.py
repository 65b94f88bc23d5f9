"""Prototype-alignment and accuracy reporting, plus projection CSV export.

Alignment measures, per prototype, the average cosine to its own class's
embeddings (``cos_class``) and to all other embeddings (``cos_out``);
well-fitted prototype banks sit near 1 within class, while raw classifier
columns typically land around 0.5.  Alignment uses the training
embeddings (the data the prototypes were fitted on); the choice is
recorded in the report.

Accuracy reports refuse banks not fitted on the train split, so test
numbers can never leak fitting data.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bank import LOCATION_CLASSIFIER, PrototypeBank
from .errors import ValidationError

logger = logging.getLogger(__name__)

EMBEDDINGS_SPLIT_FOR_ALIGNMENT = "train"


@dataclass(frozen=True)
class AlignmentRow:
    model_id: str
    cos_class: float
    cos_out: float


@dataclass(frozen=True)
class AccuracyRow:
    model_id: str
    train_acc: float
    test_acc: float


@dataclass(frozen=True)
class AlignmentReport:
    dataset: str
    k_per_class: int
    rows: tuple[AlignmentRow, ...]


@dataclass(frozen=True)
class AccuracyReport:
    dataset: str
    seed: int
    rows: tuple[AccuracyRow, ...]


def _unit_rows(matrix: np.ndarray, what: str) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    zero = norms == 0.0
    if zero.any():
        logger.warning("%d zero-vector %s contribute cosine 0", int(zero.sum()), what)
    safe = np.where(zero, 1.0, norms)
    return matrix / safe[:, None]


def cosine_alignment(
    bank: PrototypeBank,
    embeddings: np.ndarray,
    labels: np.ndarray,
    model_id: str,
) -> AlignmentRow:
    """Mean over prototypes of mean cosine to same-class / other-class points."""
    embeddings = np.asarray(embeddings)
    labels = np.asarray(labels, dtype=np.int64)
    if embeddings.shape[1] != bank.dim:
        raise ValidationError(
            f"bank dim {bank.dim} and embedding dim {embeddings.shape[1]} live in different spaces"
        )
    cos = _unit_rows(bank.prototypes, "prototypes") @ _unit_rows(embeddings, "embeddings").T
    class_means = np.empty(bank.num_prototypes)
    out_means = np.empty(bank.num_prototypes)
    for k in range(bank.num_prototypes):
        same = labels == bank.class_of[k]
        if not same.any() or same.all():
            raise ValidationError(
                f"class {int(bank.class_of[k])} has no in-class or no out-of-class points"
            )
        class_means[k] = cos[k, same].mean()
        out_means[k] = cos[k, ~same].mean()
    return AlignmentRow(
        model_id=model_id,
        cos_class=float(class_means.mean()),
        cos_out=float(out_means.mean()),
    )


def check_fit_split(bank: PrototypeBank, model_id: str) -> None:
    """Refuse evaluation of banks not fitted exclusively on the train split."""
    if bank.fit_split != "train":
        raise ValidationError(
            f"split leakage: {model_id} bank was fitted on {bank.fit_split!r}, not 'train'"
        )


def accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of correct predictions."""
    predicted = np.asarray(predicted, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predicted.shape != labels.shape or predicted.size == 0:
        raise ValidationError("predictions and labels must be equal-length, non-empty")
    return float((predicted == labels).mean() * 100.0)


def alignment_report_json(report: AlignmentReport) -> str:
    rows = []
    for row in report.rows:
        rows.append({"model": row.model_id, "metric": "cos_class",
                     "split": EMBEDDINGS_SPLIT_FOR_ALIGNMENT, "value": row.cos_class})
        rows.append({"model": row.model_id, "metric": "cos_out",
                     "split": EMBEDDINGS_SPLIT_FOR_ALIGNMENT, "value": row.cos_out})
    return json.dumps({"dataset": report.dataset, "rows": rows}, indent=2) + "\n"


def accuracy_report_json(report: AccuracyReport) -> str:
    rows = []
    for row in report.rows:
        rows.append({"model": row.model_id, "metric": "accuracy",
                     "split": "train", "value": row.train_acc})
        rows.append({"model": row.model_id, "metric": "accuracy",
                     "split": "test", "value": row.test_acc})
    return json.dumps({"dataset": report.dataset, "rows": rows}, indent=2) + "\n"


def alignment_report_text(report: AlignmentReport) -> str:
    lines = [
        f"prototype alignment on {report.dataset} "
        f"(K/C={report.k_per_class}, embeddings: {EMBEDDINGS_SPLIT_FOR_ALIGNMENT})",
        f"{'model':<24}{'cos_class':>12}{'cos_out':>12}",
    ]
    for row in report.rows:
        lines.append(f"{row.model_id:<24}{row.cos_class:>12.4f}{row.cos_out:>12.4f}")
    return "\n".join(lines) + "\n"


def accuracy_report_text(report: AccuracyReport) -> str:
    lines = [
        f"accuracy on {report.dataset} (seed {report.seed})",
        f"{'model':<24}{'train':>10}{'test':>10}",
    ]
    for row in report.rows:
        lines.append(f"{row.model_id:<24}{row.train_acc:>10.2f}{row.test_acc:>10.2f}")
    return "\n".join(lines) + "\n"


def emit_projection_csv(
    embeddings: np.ndarray,
    labels: np.ndarray,
    banks: dict[str, PrototypeBank],
    path: str | Path,
) -> None:
    """One row per embedding and per prototype, ready for external 2-d
    projection tools.

    Classifier banks additionally emit a ``prototype_rescaled:*`` variant
    scaled to the mean embedding norm of the prototype's class; k-means
    banks already live at data scale.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    dim = embeddings.shape[1]
    header = ["id", "role", "class"] + [f"dim_{i}" for i in range(dim)]

    def fmt(values: np.ndarray) -> list[str]:
        return [f"{v:.8g}" for v in values]

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, (z, y) in enumerate(zip(embeddings, labels)):
            writer.writerow([i, "point", int(y)] + fmt(z))
        for model_id, bank in banks.items():
            if bank.dim != dim:
                raise ValidationError(f"bank {model_id} dim {bank.dim} != embedding dim {dim}")
            for k in range(bank.num_prototypes):
                writer.writerow(
                    [k, f"prototype:{model_id}", int(bank.class_of[k])]
                    + fmt(bank.prototypes[k].astype(np.float64))
                )
            if bank.location == LOCATION_CLASSIFIER:
                norms = np.linalg.norm(embeddings, axis=1)
                for k in range(bank.num_prototypes):
                    proto = bank.prototypes[k].astype(np.float64)
                    target = norms[labels == bank.class_of[k]].mean()
                    scale = target / np.linalg.norm(proto) if np.linalg.norm(proto) else 0.0
                    writer.writerow(
                        [k, f"prototype_rescaled:{model_id}", int(bank.class_of[k])]
                        + fmt(proto * scale)
                    )
