"""The frozen CNN head (average pool + linear classifier) and its
reinterpretation as a prototype model.

Because the dot product commutes with averaging, classifying the pooled
embedding equals averaging the per-position class scores; the classifier
columns act as one prototype per class.  ``sem_forward`` computes the
prediction the prototype way and is contractually within ``1e-5 * scale``
of ``classify(avg_pool(h))`` (float32 accumulation headroom for grids up
to 7x7 over 512 channels).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bank import LOCATION_CLASSIFIER, PrototypeBank
from .errors import ValidationError

COMMUTATIVITY_TOL = 1e-5


@dataclass(frozen=True)
class LinearClassifier:
    """Bias-free linear classifier; column j scores class j."""

    weights: np.ndarray  # (D, C)

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 2:
            raise ValidationError(f"classifier weights must be (D, C), got {w.shape}")
        if not np.isfinite(w).all():
            raise ValidationError("classifier weights contain non-finite values")
        norms = np.linalg.norm(w.astype(np.float64), axis=0)
        dead = np.flatnonzero(norms == 0.0)
        if dead.size:
            raise ValidationError(f"classifier columns {dead.tolist()} are zero vectors")
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    def column(self, j: int) -> np.ndarray:
        return self.weights[:, j]


def avg_pool(h: np.ndarray) -> np.ndarray:
    """Mean over spatial positions: (R, D) -> (D,)."""
    h = np.asarray(h)
    if h.ndim != 2 or h.shape[0] < 1:
        raise ValidationError(f"expected (R, D) with R >= 1, got {h.shape}")
    return h.mean(axis=0)


def flatten_grid(x: np.ndarray) -> np.ndarray:
    """(H, W, D) -> (H*W, D) row-major; passthrough for already-flat input."""
    x = np.asarray(x)
    if x.ndim == 3:
        return x.reshape(-1, x.shape[2])
    if x.ndim == 2:
        return x
    raise ValidationError(f"expected (H, W, D) or (R, D), got shape {x.shape}")


def classify(z: np.ndarray, clf: LinearClassifier) -> np.ndarray:
    """Per-class scores z . c_j; also accepts a batch (N, D) -> (N, C)."""
    z = np.asarray(z)
    if z.shape[-1] != clf.dim:
        raise ValidationError(f"embedding dim {z.shape[-1]} != classifier dim {clf.dim}")
    return z @ clf.weights


def sem_forward(h: np.ndarray, clf: LinearClassifier) -> np.ndarray:
    """Average of per-position class scores: (1/R) sum_r (h_r . c_j).

    Numerically the other route through the head; equal to
    ``classify(avg_pool(h))`` up to float rounding.
    """
    h = flatten_grid(h)
    if h.shape[0] < 1:
        raise ValidationError("need at least one spatial position")
    return classify(h, clf).mean(axis=0)


def commutativity_gap(h: np.ndarray, clf: LinearClassifier) -> tuple[float, float]:
    """(max abs deviation between the two routes, allowed tolerance)."""
    h = flatten_grid(h)
    gap = float(np.max(np.abs(sem_forward(h, clf) - classify(avg_pool(h), clf))))
    scale = max(1.0, float(np.max(np.abs(h))) * float(np.max(np.abs(clf.weights))))
    return gap, COMMUTATIVITY_TOL * scale


def classifier_as_bank(clf: LinearClassifier) -> PrototypeBank:
    """View the classifier columns as a one-prototype-per-class bank."""
    return PrototypeBank(
        prototypes=clf.weights.T.copy(),
        class_of=np.arange(clf.num_classes, dtype=np.int64),
        k_per_class=1,
        location=LOCATION_CLASSIFIER,
    )


def bank_as_classifier(bank: PrototypeBank) -> LinearClassifier:
    if bank.location != LOCATION_CLASSIFIER:
        raise ValidationError(f"bank location {bank.location!r} is not a classifier view")
    return LinearClassifier(weights=bank.prototypes.T.copy())
