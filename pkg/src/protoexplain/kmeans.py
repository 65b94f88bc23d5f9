"""Deterministic seeded Lloyd's k-means with k-means++ initialization.

This is the single clustering engine behind every explanation location
(pooled embeddings and multi-depth composite rows).  Determinism is a
contract, not an accident:

* all arithmetic runs in float64 with fixed reduction order, so a given
  (points, config) pair yields bit-identical centroids on every run;
* point->centroid ties break toward the lowest centroid index;
* empty clusters are repaired by moving the point currently farthest
  from its assigned centroid into the empty cluster;
* class-wise fits derive one seed per class by mixing the run seed with
  the class index (splitmix64), so each class's clustering is exactly an
  independent ``fit`` on the class-filtered data.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .bank import LOCATION_EMBEDDING, PrototypeBank
from .errors import InsufficientPointsError, ValidationError

_MASK64 = (1 << 64) - 1


def splitmix64(value: int) -> int:
    """One splitmix64 step; used to derive independent per-class seeds."""
    value = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = value
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def class_seed(seed: int, class_index: int) -> int:
    return splitmix64((seed & _MASK64) ^ class_index)


@dataclass(frozen=True)
class KMeansConfig:
    k: int
    seed: int
    max_iter: int = 300
    rel_tol: float = 1e-6
    empty_cluster_policy: str = "reassign_farthest"
    # Independent k-means++ restarts (seeds derived from `seed`); the run
    # with the lowest inertia wins, ties toward the earliest restart.
    n_restarts: int = 10

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if self.rel_tol <= 0:
            raise ValidationError("rel_tol must be > 0")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be >= 1")
        if self.n_restarts < 1:
            raise ValidationError("n_restarts must be >= 1")
        if self.empty_cluster_policy != "reassign_farthest":
            raise ValidationError(f"unknown empty_cluster_policy {self.empty_cluster_policy!r}")


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray  # (k, d) float64
    assignments: np.ndarray  # (n,) int64
    inertia: float
    iterations_run: int
    inertia_history: tuple[float, ...] = field(repr=False, default=())


def _pairwise_sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(n, k) squared euclidean distances, clipped at zero."""
    # |x - c|^2 = |x|^2 - 2 x.c + |c|^2 ; clip guards tiny negative roundoff.
    d2 = (
        np.einsum("ij,ij->i", points, points)[:, None]
        - 2.0 * points @ centers.T
        + np.einsum("ij,ij->i", centers, centers)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++ seeding (several candidates per step, best kept)."""
    n = points.shape[0]
    n_local_trials = 2 + int(math.log(k)) if k > 1 else 1
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = points[first]
    closest_d2 = _pairwise_sq_dists(points, centers[:1])[:, 0]
    for j in range(1, k):
        total = float(closest_d2.sum())
        if total <= 0.0:
            # All points coincide with chosen centers; any point works.
            candidates = rng.integers(n, size=n_local_trials)
        else:
            candidates = rng.choice(n, size=n_local_trials, p=closest_d2 / total)
        cand_d2 = _pairwise_sq_dists(points, points[candidates])
        pot = np.minimum(closest_d2[:, None], cand_d2).sum(axis=0)
        best = int(np.argmin(pot))
        centers[j] = points[candidates[best]]
        closest_d2 = np.minimum(closest_d2, cand_d2[:, best])
    return centers


def _repair_empty(points, centroids, assignments, counts):
    """Move the farthest-from-centroid point into each empty cluster."""
    dist_to_own = np.einsum(
        "ij,ij->i", points - centroids[assignments], points - centroids[assignments]
    )
    for empty in np.flatnonzero(counts == 0):
        order = np.argsort(-dist_to_own, kind="stable")
        for idx in order:
            donor = assignments[idx]
            if counts[donor] > 1:
                counts[donor] -= 1
                assignments[idx] = empty
                counts[empty] += 1
                dist_to_own[idx] = 0.0
                break


# Single-point refinement is a Python-level loop; worth it only where
# Lloyd's local minima actually bite and the loop stays cheap.
_REFINE_BUDGET = 200_000  # max n * k


def _hartigan_refine(
    points: np.ndarray, assignments: np.ndarray, k: int, max_sweeps: int = 50
) -> tuple[np.ndarray, list[float]]:
    """Greedy single-point moves (Hartigan style) until no move improves.

    Every accepted move strictly lowers the total inertia: removing x from
    cluster a changes SSE by -n_a/(n_a-1)*|x-mu_a|^2, adding it to b by
    +n_b/(n_b+1)*|x-mu_b|^2.  Returns refined assignments plus the inertia
    recorded after each sweep.
    """
    assignments = assignments.copy()
    counts = np.bincount(assignments, minlength=k).astype(np.float64)
    sums = np.zeros((k, points.shape[1]))
    np.add.at(sums, assignments, points)
    means = sums / counts[:, None]
    sweep_inertia: list[float] = []
    for _ in range(max_sweeps):
        moved = False
        for i in range(points.shape[0]):
            a = assignments[i]
            if counts[a] <= 1:
                continue
            x = points[i]
            diff_a = x - means[a]
            cost_out = counts[a] / (counts[a] - 1.0) * float(diff_a @ diff_a)
            d2 = np.einsum("ij,ij->i", means - x, means - x)
            gains = counts / (counts + 1.0) * d2
            gains[a] = np.inf
            b = int(np.argmin(gains))
            if gains[b] < cost_out - 1e-12:
                sums[a] -= x
                counts[a] -= 1.0
                means[a] = sums[a] / counts[a]
                sums[b] += x
                counts[b] += 1.0
                means[b] = sums[b] / counts[b]
                assignments[i] = b
                moved = True
        if not moved:
            break
        resid = points - means[assignments]
        sweep_inertia.append(float(np.einsum("ij,ij->", resid, resid)))
    return assignments, sweep_inertia


def _lloyd(points: np.ndarray, cfg: KMeansConfig, centroids: np.ndarray) -> KMeansResult:
    n = points.shape[0]
    centroids = centroids.copy()

    history: list[float] = []
    prev_inertia = math.inf
    assignments = np.zeros(n, dtype=np.int64)
    iterations = 0
    for iterations in range(1, cfg.max_iter + 1):
        d2 = _pairwise_sq_dists(points, centroids)
        assignments = np.argmin(d2, axis=1).astype(np.int64)  # ties -> lowest index
        counts = np.bincount(assignments, minlength=cfg.k)
        if (counts == 0).any():
            _repair_empty(points, centroids, assignments, counts)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignments, points)
        centroids = sums / counts[:, None]
        resid = points - centroids[assignments]
        inertia = float(np.einsum("ij,ij->", resid, resid))
        history.append(inertia)
        if prev_inertia < math.inf:
            improvement = (prev_inertia - inertia) / prev_inertia if prev_inertia > 0 else 0.0
            if improvement < cfg.rel_tol:
                break
        prev_inertia = inertia

    if history[-1] > 0.0 and n * cfg.k <= _REFINE_BUDGET:
        assignments, sweep_inertia = _hartigan_refine(points, assignments, cfg.k)
        if sweep_inertia:
            history.extend(sweep_inertia)
            counts = np.bincount(assignments, minlength=cfg.k)
            sums = np.zeros_like(centroids)
            np.add.at(sums, assignments, points)
            centroids = sums / counts[:, None]

    return KMeansResult(
        centroids=centroids,
        assignments=assignments,
        inertia=history[-1],
        iterations_run=iterations,
        inertia_history=tuple(history),
    )


# Below this many distinct k-subsets, every one is tried as an init; the
# seeded k-means++ restarts take over on anything larger.
_EXHAUSTIVE_INIT_BUDGET = 256


def _init_pool(points: np.ndarray, cfg: KMeansConfig):
    n = points.shape[0]
    if math.comb(n, cfg.k) <= _EXHAUSTIVE_INIT_BUDGET:
        for combo in itertools.combinations(range(n), cfg.k):
            yield points[list(combo)]
        return
    base = splitmix64(cfg.seed)
    for restart in range(cfg.n_restarts):
        rng = np.random.Generator(np.random.PCG64(splitmix64(base + restart)))
        yield _kmeanspp_init(points, cfg.k, rng)


def fit(points: np.ndarray, cfg: KMeansConfig) -> KMeansResult:
    """Lloyd's algorithm; deterministic for a fixed (points, cfg).

    Tiny inputs run Lloyd from every distinct k-subset of points; larger
    ones run ``cfg.n_restarts`` independently seeded k-means++ inits.  The
    lowest-inertia run wins.  Raises :class:`InsufficientPointsError` when
    n < k and :class:`ValidationError` on non-finite input.  Returned
    clusters are always non-empty and the winning run's inertia history is
    non-increasing.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] < 1:
        raise ValidationError(f"points must be (n, d) with d >= 1, got {points.shape}")
    if not np.isfinite(points).all():
        raise ValidationError("points contain non-finite values")
    if points.shape[0] < cfg.k:
        raise InsufficientPointsError(f"{points.shape[0]} points < k={cfg.k}")

    best: KMeansResult | None = None
    for init in _init_pool(points, cfg):
        result = _lloyd(points, cfg, centroids=init)
        if best is None or result.inertia < best.inertia:
            best = result
        if best.inertia == 0.0:
            break
    return best


def fit_classwise(
    points: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    k_per_class: int,
    seed: int,
    max_iter: int = 300,
    rel_tol: float = 1e-6,
    location: str = LOCATION_EMBEDDING,
    depth_from: int | None = None,
    fit_split: str | None = None,
    row_cap: int | None = None,
    provenance: np.ndarray | None = None,
) -> PrototypeBank:
    """Fit ``k_per_class`` centroids per class; class-major bank order.

    Each class is clustered independently with seed
    ``splitmix64(seed ^ class_index)``, so the result equals ``num_classes``
    separate :func:`fit` calls on class-filtered data.

    ``provenance`` optionally carries an (n, 3) int array of
    ``(sample_id, grid_row, grid_col)`` per point; when given, the bank
    records for every prototype the provenance of its nearest fitted point
    (used by the rendering gallery).
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if points.shape[0] != labels.shape[0]:
        raise ValidationError("points and labels disagree on n")
    if provenance is not None and provenance.shape != (points.shape[0], 3):
        raise ValidationError("provenance must be (n, 3)")

    centroid_blocks = []
    nearest: list[tuple[int, int, int]] = []
    for c in range(num_classes):
        mask = labels == c
        class_points = points[mask]
        if class_points.shape[0] < k_per_class:
            raise InsufficientPointsError(
                f"class {c} has {class_points.shape[0]} points < k_per_class={k_per_class}"
            )
        cfg = KMeansConfig(k=k_per_class, seed=class_seed(seed, c),
                           max_iter=max_iter, rel_tol=rel_tol)
        result = fit(class_points, cfg)
        centroid_blocks.append(result.centroids)
        if provenance is not None:
            class_prov = provenance[mask]
            d2 = _pairwise_sq_dists(class_points, result.centroids)
            for j in range(k_per_class):
                nearest.append(tuple(int(v) for v in class_prov[int(np.argmin(d2[:, j]))]))

    return PrototypeBank(
        prototypes=np.vstack(centroid_blocks),
        class_of=np.repeat(np.arange(num_classes, dtype=np.int64), k_per_class),
        k_per_class=k_per_class,
        location=location,
        depth_from=depth_from,
        seed=seed,
        fit_split=fit_split,
        row_cap=row_cap,
        nearest_rows=tuple(nearest) if nearest else None,
    )
