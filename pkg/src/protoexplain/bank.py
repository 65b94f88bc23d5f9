"""Prototype banks: the K x d centroid matrices every explanation location
shares, with class ownership and fitting metadata.

Three locations exist:

* ``classifier_weights``: the classifier columns viewed as prototypes
  (one per class, ``k_per_class == 1``),
* ``embedding_b4``: class-wise k-means centroids of pooled embeddings,
* ``composite``: class-wise centroids of multi-depth composite feature
  rows; ``depth_from`` records the shallowest block included.

Banks are persisted as a float32 centroid NPY plus a JSON sidecar.  The
class-major ordering (class 0's clusters first, cluster index ascending
within a class) is load-bearing: the count-based prediction pools the
assignment histogram over contiguous windows of ``k_per_class`` entries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_store
from .errors import ValidationError

LOCATION_CLASSIFIER = "classifier_weights"
LOCATION_EMBEDDING = "embedding_b4"
LOCATION_COMPOSITE = "composite"
LOCATIONS = (LOCATION_CLASSIFIER, LOCATION_EMBEDDING, LOCATION_COMPOSITE)


@dataclass(frozen=True)
class PrototypeBank:
    prototypes: np.ndarray  # (K, d)
    class_of: np.ndarray  # (K,) int64, class-major blocked
    k_per_class: int
    location: str
    depth_from: int | None = None
    seed: int | None = None
    fit_split: str | None = None
    row_cap: int | None = None
    # Per prototype, the closest training row seen during fitting:
    # (sample_id, grid_row, grid_col); grid indices are -1 for pooled spaces.
    nearest_rows: tuple[tuple[int, int, int], ...] | None = field(default=None, repr=False)

    def __post_init__(self):
        protos = np.asarray(self.prototypes)
        class_of = np.asarray(self.class_of, dtype=np.int64)
        if protos.ndim != 2:
            raise ValidationError(f"prototypes must be (K, d), got shape {protos.shape}")
        if class_of.shape != (protos.shape[0],):
            raise ValidationError("class_of length must equal prototype count")
        if self.location not in LOCATIONS:
            raise ValidationError(f"unknown bank location {self.location!r}")
        if self.k_per_class < 1:
            raise ValidationError("k_per_class must be >= 1")
        expected = np.repeat(np.arange(self.num_classes, dtype=np.int64), self.k_per_class)
        if not np.array_equal(class_of, expected):
            raise ValidationError("class_of must be class-major: each class owns a "
                                  f"contiguous block of {self.k_per_class} clusters")
        object.__setattr__(self, "prototypes", protos)
        object.__setattr__(self, "class_of", class_of)

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0] // self.k_per_class

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


def save_bank(bank: PrototypeBank, path_stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.npy`` (float32 centroids) + ``<stem>.json`` sidecar."""
    stem = Path(path_stem)
    npy_path = stem.with_suffix(".npy")
    json_path = stem.with_suffix(".json")
    tensor_store.write_tensor(bank.prototypes.astype(np.float32), npy_path)
    sidecar = {
        "class_of_cluster": [int(c) for c in bank.class_of],
        "k_per_class": bank.k_per_class,
        "seed": bank.seed,
        "location": bank.location,
        "depth_from": bank.depth_from,
        "fit_split": bank.fit_split,
        "row_cap": bank.row_cap,
        "nearest_rows": [list(t) for t in bank.nearest_rows] if bank.nearest_rows else None,
    }
    json_path.write_text(json.dumps(sidecar, indent=2) + "\n")
    return npy_path, json_path


def load_bank(path_stem: str | Path) -> PrototypeBank:
    stem = Path(path_stem)
    npy_path = stem.with_suffix(".npy")
    json_path = stem.with_suffix(".json")
    if not npy_path.exists() or not json_path.exists():
        raise ValidationError(f"bank {stem} incomplete: need both {npy_path.name} and {json_path.name}")
    prototypes = tensor_store.read_tensor(npy_path)
    sidecar = json.loads(json_path.read_text())
    nearest = sidecar.get("nearest_rows")
    return PrototypeBank(
        prototypes=prototypes,
        class_of=np.asarray(sidecar["class_of_cluster"], dtype=np.int64),
        k_per_class=sidecar["k_per_class"],
        location=sidecar["location"],
        depth_from=sidecar.get("depth_from"),
        seed=sidecar.get("seed"),
        fit_split=sidecar.get("fit_split"),
        row_cap=sidecar.get("row_cap"),
        nearest_rows=tuple(tuple(int(v) for v in row) for row in nearest) if nearest else None,
    )
