"""Gradient-free feature attribution and its recursive refinement.

The base map scores each encoder-output pixel by its projection onto a
classifier column, normalized by the column's squared norm so that the
column itself scores exactly 1 and scores are comparable across classes.
Shallower maps never consult the classifier again: the map at depth b is
the map at depth b+1 bilinearly upsampled to depth b's grid, then
averaged within each segment (= set of cells sharing a prototype id) of
the depth-b explanation map.  Refined maps are therefore piecewise
constant per segment and preserve the global mean of the upsampled map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor_store
from .bank import PrototypeBank
from .encoder_explainer import ExplanationMap, explain, upsample_bilinear
from .errors import ConfigurationError, ValidationError
from .sem_core import LinearClassifier
from .tensor_store import ActivationRecord


@dataclass(frozen=True)
class AttributionMap:
    values: np.ndarray  # (H, W) float
    depth: int
    class_id: int
    discrete: bool  # True once segment-wise averaged

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValidationError(f"attribution values must be (H, W), got {v.shape}")
        if not np.isfinite(v).all():
            raise ValidationError("attribution values contain non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape


def base_attribution(h: np.ndarray, clf: LinearClassifier, class_id: int, depth: int = 4) -> AttributionMap:
    """Per-pixel alignment with column ``c_j``: (h_wh . c_j) / ||c_j||^2."""
    h = np.asarray(h)
    if h.ndim != 3:
        raise ValidationError(f"expected (H, W, D) activations, got {h.shape}")
    if not 0 <= class_id < clf.num_classes:
        raise ValidationError(f"class {class_id} outside [0, {clf.num_classes})")
    column = clf.weights[:, class_id].astype(h.dtype, copy=False)
    values = (h @ column) / np.dot(column, column)
    return AttributionMap(values=values, depth=depth, class_id=class_id, discrete=False)


def refine(att_next: AttributionMap, emap: ExplanationMap) -> AttributionMap:
    """Segment-wise average of the upsampled deeper map over ``emap``.

    Every output cell takes the mean of the upsampled values across all
    cells sharing its prototype id (the whole id class, not connected
    components).
    """
    th, tw = emap.grid
    sh, sw = att_next.grid
    if th < sh or tw < sw:
        raise ValidationError(
            f"explanation grid {th}x{tw} smaller than attribution grid {sh}x{sw}; "
            "refinement only goes shallower"
        )
    up = upsample_bilinear(att_next.values.astype(np.float64), (th, tw))
    ids = emap.assignments.ravel()
    sums = np.bincount(ids, weights=up.ravel(), minlength=emap.num_prototypes)
    counts = np.bincount(ids, minlength=emap.num_prototypes)
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    values = means[ids].reshape(th, tw)
    return AttributionMap(values=values, depth=emap.depth_from,
                          class_id=att_next.class_id, discrete=True)


def attribution_cascade(
    record: ActivationRecord,
    clf: LinearClassifier,
    banks: dict[int, PrototypeBank],
    class_id: int,
    depth_from: int,
) -> list[AttributionMap]:
    """Maps for depths B down to ``depth_from``, deepest first.

    The classifier is consumed only by the base map at depth B; every
    shallower map needs a prototype bank fitted at that depth.
    """
    depths = sorted(record.per_block)
    deepest = depths[-1]
    if depth_from not in depths:
        raise ValidationError(f"depth_from={depth_from} not among record blocks {depths}")
    maps = [base_attribution(record.per_block[deepest], clf, class_id, depth=deepest)]
    for depth in range(deepest - 1, depth_from - 1, -1):
        bank = banks.get(depth)
        if bank is None:
            raise ConfigurationError(
                f"no prototype bank for depth {depth}; fit one before refining to that depth"
            )
        maps.append(refine(maps[-1], explain(record, bank)))
    return maps


def save_attribution(att: AttributionMap, path_stem: str | Path) -> None:
    stem = Path(path_stem)
    values = att.values.astype(np.float32)
    tensor_store.write_tensor(values, stem.with_suffix(".npy"))
    sidecar = {
        "depth": att.depth,
        "class": att.class_id,
        "discrete": att.discrete,
        "min": float(values.min()),
        "max": float(values.max()),
    }
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_attribution(path_stem: str | Path) -> AttributionMap:
    stem = Path(path_stem)
    sidecar = json.loads(stem.with_suffix(".json").read_text())
    return AttributionMap(
        values=tensor_store.read_tensor(stem.with_suffix(".npy")),
        depth=sidecar["depth"],
        class_id=sidecar["class"],
        discrete=sidecar["discrete"],
    )
