"""Multi-depth composite features, explanation maps, and count predictions.

Activation blocks from a chosen depth onward are bilinearly upsampled to
the shallowest (largest) included grid, normalized per block to Frobenius
norm ``1/D_b``, and concatenated channel-wise into composite rows.  Rows
are assigned to their nearest prototype over the whole bank, which makes
the resulting grid a low-resolution concept segmentation; class scores
are average counts of each class's contiguous cluster window, and the
canonical predicted class is the class owning the most frequent cluster.

With a single included block the composite degenerates to a scaled copy
of the encoder output, so explanation maps there are plain k-means
assignments on encoder pixels.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import kmeans, tensor_store
from .bank import LOCATION_COMPOSITE, PrototypeBank
from .errors import ValidationError
from .tensor_store import ActivationRecord

logger = logging.getLogger(__name__)

DEFAULT_ROW_CAP = 200_000


def upsample_bilinear(x: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear upsampling with half-pixel centers, (H, W[, D]) -> (H', W'[, D]).

    Sampling positions are pixel centers, i.e. output cell i reads source
    coordinate ``(i + 0.5) * H/H' - 0.5`` with edge clamping.  Exact
    pass-through when the target equals the source grid.  Downscaling is
    refused: the shared resolution is always the largest grid.
    """
    x = np.asarray(x)
    if x.ndim not in (2, 3):
        raise ValidationError(f"expected (H, W) or (H, W, D), got shape {x.shape}")
    h, w = x.shape[:2]
    th, tw = target
    if th < h or tw < w:
        raise ValidationError(f"refusing to downscale {h}x{w} to {th}x{tw}")
    if (th, tw) == (h, w):
        return x.copy()

    out_dtype = x.dtype
    values = x.astype(np.float64, copy=False)

    def axis_weights(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        coords = (np.arange(dst) + 0.5) * (src / dst) - 0.5
        lo = np.floor(coords).astype(np.int64)
        frac = coords - lo
        lo_c = np.clip(lo, 0, src - 1)
        hi_c = np.clip(lo + 1, 0, src - 1)
        return lo_c, hi_c, frac

    y0, y1, fy = axis_weights(h, th)
    x0, x1, fx = axis_weights(w, tw)
    fy = fy.reshape(-1, *([1] * (values.ndim - 1)))
    rows = values[y0] * (1.0 - fy) + values[y1] * fy
    fx = fx.reshape(1, -1, *([1] * (values.ndim - 2)))
    out = rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx
    return np.ascontiguousarray(out.astype(out_dtype, copy=False))


@dataclass(frozen=True)
class CompositeFeature:
    """Per-position concatenation of upsampled, normalized block slices."""

    matrix: np.ndarray  # (R', sum_b D_b) float32
    height: int
    width: int
    depth_from: int
    channel_slices: dict[int, tuple[int, int]]  # block_id -> (start, stop)

    @property
    def num_rows(self) -> int:
        return self.height * self.width

    def block_slice(self, block_id: int) -> np.ndarray:
        start, stop = self.channel_slices[block_id]
        return self.matrix[:, start:stop]


def compose(record: ActivationRecord, depth_from: int) -> CompositeFeature:
    """Build the composite feature matrix from blocks >= ``depth_from``.

    Each upsampled block slice is scaled by ``1 / (D_b * ||u||_F)`` with
    the Frobenius norm taken over the sample's whole upsampled slice, so
    every slice lands at norm ``1/D_b``.  An all-zero block cannot be
    normalized; its slice stays zero and a warning is logged.
    """
    block_ids = sorted(b for b in record.per_block if b >= depth_from)
    if not block_ids:
        raise ValidationError(
            f"record {record.sample_id} has no blocks at depth >= {depth_from}"
        )
    target = record.per_block[block_ids[0]].shape[:2]
    slices: list[np.ndarray] = []
    offsets: dict[int, tuple[int, int]] = {}
    start = 0
    for b in block_ids:
        up = upsample_bilinear(record.per_block[b].astype(np.float64), target)
        flat = up.reshape(-1, up.shape[2])
        norm = float(np.linalg.norm(flat))
        channels = flat.shape[1]
        if norm == 0.0:
            logger.warning(
                "sample %d block %d is all-zero; composite slice left at zero",
                record.sample_id, b,
            )
            scaled = flat
        else:
            scaled = flat / (channels * norm)
        slices.append(scaled)
        offsets[b] = (start, start + channels)
        start += channels
    matrix = np.concatenate(slices, axis=1).astype(np.float32)
    return CompositeFeature(
        matrix=matrix,
        height=target[0],
        width=target[1],
        depth_from=depth_from,
        channel_slices=offsets,
    )


class _Reservoir:
    """Seeded reservoir sample of composite rows for one class."""

    def __init__(self, cap: int, seed: int, dim: int):
        self.cap = cap
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.rows = np.empty((cap, dim), dtype=np.float32)
        self.prov = np.empty((cap, 3), dtype=np.int64)
        self.seen = 0

    def add(self, rows: np.ndarray, prov: np.ndarray) -> None:
        n = rows.shape[0]
        fill = min(max(self.cap - self.seen, 0), n)
        if fill:
            self.rows[self.seen:self.seen + fill] = rows[:fill]
            self.prov[self.seen:self.seen + fill] = prov[:fill]
        if fill < n:
            arrival = self.seen + fill + np.arange(n - fill)
            slots = self.rng.integers(0, arrival + 1)
            keep = slots < self.cap
            # Duplicate slots resolve last-write-wins, matching the
            # sequential reservoir update order.
            self.rows[slots[keep]] = rows[fill:][keep]
            self.prov[slots[keep]] = prov[fill:][keep]
        self.seen += n

    def harvest(self) -> tuple[np.ndarray, np.ndarray]:
        size = min(self.seen, self.cap)
        return self.rows[:size], self.prov[:size]


def fit_composite_bank(
    records: Iterable[ActivationRecord],
    depth_from: int,
    num_classes: int,
    k_per_class: int,
    seed: int,
    row_cap: int = DEFAULT_ROW_CAP,
    fit_split: str | None = "train",
) -> PrototypeBank:
    """Class-wise k-means over composite rows pooled across class images.

    Rows are sub-sampled per class with a seeded reservoir capped at
    ``row_cap`` to bound the clustering input; the cap lands in the bank
    metadata.  Each prototype also records the provenance (sample id,
    grid cell) of its nearest fitted row.
    """
    reservoirs: dict[int, _Reservoir] = {}
    width = height = None
    for record in records:
        comp = compose(record, depth_from)
        if width is None:
            height, width = comp.height, comp.width
        res = reservoirs.get(record.label)
        if res is None:
            res = _Reservoir(
                cap=row_cap,
                seed=kmeans.splitmix64(kmeans.class_seed(seed, record.label) ^ 0xA5C3),
                dim=comp.matrix.shape[1],
            )
            reservoirs[record.label] = res
        cells = np.arange(comp.num_rows, dtype=np.int64)
        prov = np.column_stack((
            np.full(comp.num_rows, record.sample_id, dtype=np.int64),
            cells // comp.width,
            cells % comp.width,
        ))
        res.add(comp.matrix, prov)

    if set(reservoirs) != set(range(num_classes)):
        missing = sorted(set(range(num_classes)) - set(reservoirs))
        raise ValidationError(f"no training rows for classes {missing}")

    parts = [reservoirs[c].harvest() for c in range(num_classes)]
    points = np.concatenate([rows for rows, _ in parts])
    labels = np.concatenate([
        np.full(rows.shape[0], c, dtype=np.int64) for c, (rows, _) in enumerate(parts)
    ])
    provenance = np.concatenate([prov for _, prov in parts])
    return kmeans.fit_classwise(
        points,
        labels,
        num_classes=num_classes,
        k_per_class=k_per_class,
        seed=seed,
        location=LOCATION_COMPOSITE,
        depth_from=depth_from,
        fit_split=fit_split,
        row_cap=row_cap,
        provenance=provenance,
    )


@dataclass(frozen=True)
class ExplanationMap:
    """Hard assignment of every composite position to a prototype id."""

    assignments: np.ndarray  # (H', W') int64 in [0, K)
    depth_from: int
    num_prototypes: int
    num_classes: int
    k_per_class: int
    class_of: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=np.int64)
        if a.ndim != 2:
            raise ValidationError(f"assignments must be a 2-d grid, got {a.shape}")
        if a.min() < 0 or a.max() >= self.num_prototypes:
            raise ValidationError("assignment ids outside [0, K)")
        object.__setattr__(self, "assignments", a)
        if self.class_of is None:
            object.__setattr__(
                self,
                "class_of",
                np.repeat(np.arange(self.num_classes, dtype=np.int64), self.k_per_class),
            )

    @property
    def grid(self) -> tuple[int, int]:
        return self.assignments.shape

    def histogram(self) -> np.ndarray:
        """(K,) cell counts per prototype; sums to H'*W'."""
        return np.bincount(self.assignments.ravel(), minlength=self.num_prototypes)


def assign_rows(rows: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """Nearest-prototype id per row over the whole bank, ties -> lowest id."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[1] != bank.dim:
        raise ValidationError(f"row dim {rows.shape[1]} != bank dim {bank.dim}")
    protos = bank.prototypes.astype(np.float64)
    d2 = (
        np.einsum("ij,ij->i", rows, rows)[:, None]
        - 2.0 * rows @ protos.T
        + np.einsum("ij,ij->i", protos, protos)[None, :]
    )
    return np.argmin(d2, axis=1).astype(np.int64)


def explain_composite(comp: CompositeFeature, bank: PrototypeBank) -> ExplanationMap:
    if bank.location != LOCATION_COMPOSITE:
        raise ValidationError(f"bank location {bank.location!r} cannot explain composites")
    if bank.depth_from != comp.depth_from:
        raise ValidationError(
            f"bank fitted at depth {bank.depth_from}, composite built at {comp.depth_from}"
        )
    ids = assign_rows(comp.matrix, bank)
    return ExplanationMap(
        assignments=ids.reshape(comp.height, comp.width),
        depth_from=comp.depth_from,
        num_prototypes=bank.num_prototypes,
        num_classes=bank.num_classes,
        k_per_class=bank.k_per_class,
        class_of=bank.class_of,
    )


def explain(record: ActivationRecord, bank: PrototypeBank) -> ExplanationMap:
    """Segment a record's composite features with the bank's prototypes."""
    return explain_composite(compose(record, bank.depth_from), bank)


@dataclass(frozen=True)
class CountsPrediction:
    scores: np.ndarray  # (C,) windowed average counts
    class_id: int  # class of the most frequent cluster (canonical)
    histogram: np.ndarray  # (K,)
    argmax_score_class: int


def predict_counts(emap: ExplanationMap) -> CountsPrediction:
    """Class scores as windowed average counts over the class-major bank.

    ``scores[c]`` averages the histogram over class c's ``k_per_class``
    contiguous clusters; the canonical class is the owner of the globally
    most frequent cluster (ties toward the lowest cluster id).  The two
    readings can disagree when a class wins on average without owning the
    top cluster; such cases are logged.
    """
    hist = emap.histogram()
    scores = hist.reshape(emap.num_classes, emap.k_per_class).mean(axis=1)
    winner_cluster = int(np.argmax(hist))
    class_id = int(emap.class_of[winner_cluster])
    argmax_score_class = int(np.argmax(scores))
    if argmax_score_class != class_id:
        logger.info(
            "count prediction split: top cluster gives class %d, "
            "windowed averages give class %d", class_id, argmax_score_class,
        )
    return CountsPrediction(
        scores=scores,
        class_id=class_id,
        histogram=hist,
        argmax_score_class=argmax_score_class,
    )


def save_map(emap: ExplanationMap, path_stem: str | Path, bank_path: str | Path | None = None) -> None:
    stem = Path(path_stem)
    tensor_store.write_tensor(emap.assignments, stem.with_suffix(".npy"))
    sidecar = {
        "depth_from": emap.depth_from,
        "K": emap.num_prototypes,
        "C": emap.num_classes,
        "k_per_class": emap.k_per_class,
        "bank_path": str(bank_path) if bank_path is not None else None,
    }
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_map(path_stem: str | Path) -> ExplanationMap:
    stem = Path(path_stem)
    sidecar = json.loads(stem.with_suffix(".json").read_text())
    return ExplanationMap(
        assignments=tensor_store.read_tensor(stem.with_suffix(".npy")),
        depth_from=sidecar["depth_from"],
        num_prototypes=sidecar["K"],
        num_classes=sidecar["C"],
        k_per_class=sidecar["k_per_class"],
    )


def iter_composites(
    records: Iterable[ActivationRecord], depth_from: int
) -> Iterator[tuple[ActivationRecord, CompositeFeature]]:
    for record in records:
        yield record, compose(record, depth_from)
