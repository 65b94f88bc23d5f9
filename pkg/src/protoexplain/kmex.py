"""Nearest-prototype classification of pooled embeddings.

The linear classifier is replaced by class-wise k-means centroids; the
similarity to a prototype is exp(-squared l2 distance) and the predicted
class is the class of the most similar prototype.  Since exp(-d^2) is a
strictly decreasing function of the distance, ranking always happens on
the squared distances themselves (computed in float64); this sidesteps
exp underflow for far-away prototypes without changing any argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kmeans
from .bank import LOCATION_EMBEDDING, PrototypeBank
from .errors import ValidationError


@dataclass(frozen=True)
class KmexModel:
    bank: PrototypeBank

    def __post_init__(self):
        if self.bank.location != LOCATION_EMBEDDING:
            raise ValidationError(
                f"KMEx needs an embedding-space bank, got location {self.bank.location!r}"
            )

    @property
    def num_classes(self) -> int:
        return self.bank.num_classes


@dataclass(frozen=True)
class KmexPrediction:
    class_id: int
    one_hot: np.ndarray  # (C,)
    winning_prototype: int


def fit_kmex(
    embeddings: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    k_per_class: int,
    seed: int,
    fit_split: str | None = "train",
) -> KmexModel:
    bank = kmeans.fit_classwise(
        embeddings,
        labels,
        num_classes=num_classes,
        k_per_class=k_per_class,
        seed=seed,
        location=LOCATION_EMBEDDING,
        fit_split=fit_split,
    )
    return KmexModel(bank=bank)


def sq_distances(z: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """Squared l2 distances to every prototype, float64.

    ``z`` may be a single (D,) embedding or a batch (N, D).
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    if z2.shape[1] != bank.dim:
        raise ValidationError(f"embedding dim {z2.shape[1]} != bank dim {bank.dim}")
    protos = bank.prototypes.astype(np.float64)
    d2 = (
        np.einsum("ij,ij->i", z2, z2)[:, None]
        - 2.0 * z2 @ protos.T
        + np.einsum("ij,ij->i", protos, protos)[None, :]
    )
    d2 = np.maximum(d2, 0.0)
    return d2[0] if single else d2


def similarity(z: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """exp(-||z - p_k||^2) per prototype; in (0, 1], 1 iff z == p_k.

    Distances are taken in float64; the reported scores are float32.
    """
    return np.exp(-sq_distances(z, bank)).astype(np.float32)


def predict(z: np.ndarray, model: KmexModel) -> KmexPrediction:
    """Class of the nearest prototype, ties toward the lowest prototype id."""
    d2 = sq_distances(z, model.bank)
    if d2.ndim != 1:
        raise ValidationError("predict takes a single embedding; use predict_batch")
    winner = int(np.argmin(d2))
    class_id = int(model.bank.class_of[winner])
    one_hot = np.zeros(model.num_classes, dtype=np.float32)
    one_hot[class_id] = 1.0
    return KmexPrediction(class_id=class_id, one_hot=one_hot, winning_prototype=winner)


def predict_batch(z: np.ndarray, model: KmexModel) -> np.ndarray:
    """(N,) int64 predicted classes for a batch of embeddings."""
    d2 = sq_distances(np.atleast_2d(np.asarray(z)), model.bank)
    winners = np.argmin(d2, axis=1)
    return model.bank.class_of[winners]
