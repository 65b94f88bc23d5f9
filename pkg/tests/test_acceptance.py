"""Acceptance suite: one test per exit criterion, each printing a
PASS/FAIL line (run with ``pytest tests/test_acceptance.py -v -s``).

Every expected value is either computed by an independent oracle inside
this module (exhaustive partition enumeration, brute-force scans, dict
group-by, hand-computed windowed averages) or is an exact algebraic fact.
"""

import itertools
import json
import shutil
import time

import numpy as np
import pytest

from protoexplain import (
    encoder_explainer,
    kmex,
    sem_core,
    synthetic,
    tensor_store,
)
from protoexplain.attribution import base_attribution, refine
from protoexplain.bank import load_bank
from protoexplain.encoder_explainer import ExplanationMap, upsample_bilinear
from protoexplain.errors import FormatError, ValidationError
from protoexplain.kmeans import KMeansConfig, fit
from protoexplain.sem_core import LinearClassifier


def _report(name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[{status}] {name}{suffix}")
    assert ok, f"{name}{suffix}"


def test_commutativity_of_head_routes():
    """10,000 random f32 head pairs: both routes agree within 1e-5 * scale."""
    rng = np.random.default_rng(101)
    tol = 1e-5
    worst_ratio = 0.0
    start = time.perf_counter()
    for _ in range(10_000):
        h = rng.normal(size=(49, 512)).astype(np.float32)
        weights = rng.normal(size=(512, 10)).astype(np.float32)
        clf = LinearClassifier(weights)
        gap = float(np.max(np.abs(
            sem_core.sem_forward(h, clf) - sem_core.classify(sem_core.avg_pool(h), clf))))
        scale = max(1.0, float(np.abs(h).max()) * float(np.abs(weights).max()))
        worst_ratio = max(worst_ratio, gap / (tol * scale))
    elapsed = time.perf_counter() - start
    _report(
        "commutativity: 10k random (49x512, 512x10) f32 pairs",
        worst_ratio < 1.0 and elapsed < 10.0,
        f"worst gap at {worst_ratio:.2%} of tolerance, {elapsed:.1f}s",
    )


def _exhaustive_partition_optimum(points: np.ndarray, k: int) -> float:
    best = np.inf
    for assignment in itertools.product(range(k), repeat=len(points)):
        if len(set(assignment)) != k:
            continue
        a = np.asarray(assignment)
        inertia = 0.0
        for c in range(k):
            members = points[a == c]
            inertia += ((members - members.mean(axis=0)) ** 2).sum()
        best = min(best, inertia)
    return float(best)


def test_kmeans_oracle_bound():
    """100 tiny random instances: inertia <= 1.05x the exhaustive optimum."""
    rng = np.random.default_rng(202)
    worst = 0.0
    monotone = True
    for i in range(100):
        n = int(rng.integers(3, 11))
        k = int(rng.integers(1, min(3, n) + 1))
        d = int(rng.integers(1, 3))
        points = rng.uniform(-5, 5, size=(n, d))
        result = fit(points, KMeansConfig(k=k, seed=int(rng.integers(1 << 31))))
        history = np.asarray(result.inertia_history)
        monotone &= bool((np.diff(history) <= 1e-9 * np.maximum(history[:-1], 1.0)).all())
        optimum = _exhaustive_partition_optimum(points, k)
        ratio = result.inertia / optimum if optimum > 0 else 1.0
        worst = max(worst, ratio)
    _report(
        "k-means: 100 instances vs exhaustive partitions, monotone inertia",
        worst <= 1.05 and monotone,
        f"worst inertia ratio {worst:.4f}",
    )


def test_kmex_equivalence():
    """exp(-d^2) argmax equals l2 argmin on 10,000 random embeddings."""
    rng = np.random.default_rng(303)
    prototypes = rng.normal(size=(20, 16))
    bank = kmex.PrototypeBank(
        prototypes=prototypes,
        class_of=np.repeat(np.arange(4, dtype=np.int64), 5),
        k_per_class=5,
        location="embedding_b4",
        fit_split="train",
    )
    z = rng.normal(size=(10_000, 16))
    d2 = kmex.sq_distances(z, bank)
    by_similarity = np.argmax(np.exp(-d2), axis=1)
    by_distance = np.argmin(d2, axis=1)
    disagreements = int((by_similarity != by_distance).sum())
    _report(
        "kmex: exp-similarity argmax == nearest-prototype argmin, 10k embeddings",
        disagreements == 0,
        f"{disagreements} disagreements",
    )


def test_synthetic_end_to_end(dataset_manifest, fitted_workspace):
    """Gaussian-blob fixture: cnn, kmex, b4 at 100%; b234 >= 99% test accuracy."""
    manifest = tensor_store.load_manifest(dataset_manifest)
    clf = LinearClassifier(tensor_store.load_classifier_matrix(manifest))
    embeddings = tensor_store.load_embeddings(manifest)
    test_ids = manifest.sample_ids("test")
    labels = manifest.labels[test_ids]

    acc = {}
    cnn = np.argmax(sem_core.classify(embeddings[test_ids], clf), axis=1)
    acc["cnn"] = float((cnn == labels).mean() * 100)
    kmex_model = kmex.KmexModel(bank=load_bank(fitted_workspace / "banks" / "kmex"))
    acc["kmex"] = float(
        (kmex.predict_batch(embeddings[test_ids], kmex_model) == labels).mean() * 100)
    for name, depth in (("b4", 4), ("b234", 2)):
        bank = load_bank(fitted_workspace / "banks" / f"composite_b{depth}")
        preds = [
            encoder_explainer.predict_counts(encoder_explainer.explain(r, bank)).class_id
            for r in tensor_store.iter_records(manifest, split="test", depth_from=depth)
        ]
        acc[name] = float((np.asarray(preds) == labels).mean() * 100)

    ok = (acc["cnn"] == 100.0 and acc["kmex"] == 100.0
          and acc["b4"] == 100.0 and acc["b234"] >= 99.0)
    _report(
        "synthetic end-to-end: cnn/kmex/b4 at 100%, b234 >= 99%",
        ok,
        ", ".join(f"{m}={v:.1f}" for m, v in acc.items()),
    )


def _groupby_oracle(values, ids):
    sums, counts = {}, {}
    for v, s in zip(values.ravel(), ids.ravel()):
        s = int(s)
        sums[s] = sums.get(s, 0.0) + float(v)
        counts[s] = counts.get(s, 0) + 1
    out = np.zeros(values.shape)
    for i in range(values.shape[0]):
        for j in range(values.shape[1]):
            out[i, j] = sums[int(ids[i, j])] / counts[int(ids[i, j])]
    return out


def test_attribution_base_and_refine():
    """Self-score 1 (exact f64 / 1e-6 f32); refine == group-by oracle."""
    # Exact-in-f64 self-score: integer-valued column makes every product
    # and partial sum exactly representable, so the ratio is exactly 1.0.
    column = np.array([3.0, -2.0, 5.0, 1.0, -4.0, 2.0])
    clf64 = LinearClassifier(np.column_stack([column, np.ones(6)]))
    h64 = np.broadcast_to(column, (7, 7, 6)).copy()
    exact = bool((base_attribution(h64, clf64, 0).values == 1.0).all())

    rng = np.random.default_rng(404)
    weights32 = rng.normal(size=(32, 4)).astype(np.float32)
    clf32 = LinearClassifier(weights32)
    h32 = np.broadcast_to(weights32[:, 2], (5, 5, 32)).astype(np.float32)
    f32_close = bool(np.abs(base_attribution(h32, clf32, 2).values - 1.0).max() < 1e-6)

    worst_oracle = 0.0
    worst_mean = 0.0
    piecewise = True
    for _ in range(100):
        src = int(rng.integers(2, 6))
        dst = int(src * rng.integers(1, 3))
        num_ids = int(rng.integers(1, 6))
        att = base_attribution(
            rng.normal(size=(src, src, 3)), LinearClassifier(rng.normal(size=(3, 2))), 0)
        ids = rng.integers(0, num_ids, size=(dst, dst))
        emap = ExplanationMap(
            assignments=ids, depth_from=3, num_prototypes=num_ids,
            num_classes=1, k_per_class=num_ids)
        refined = refine(att, emap)
        up = upsample_bilinear(att.values.astype(np.float64), (dst, dst))
        worst_oracle = max(worst_oracle,
                           float(np.abs(refined.values - _groupby_oracle(up, ids)).max()))
        worst_mean = max(worst_mean, abs(float(refined.values.mean() - up.mean())))
        piecewise &= len(np.unique(refined.values)) <= len(np.unique(ids))

    ok = exact and f32_close and worst_oracle <= 1e-6 and worst_mean <= 1e-6 and piecewise
    _report(
        "attribution: self-score exact, refine == group-by oracle on 100 pairs",
        ok,
        f"oracle gap {worst_oracle:.2e}, mean drift {worst_mean:.2e}",
    )


def test_explanation_map_totality(dataset_manifest, fitted_workspace):
    """Histograms always sum to R'; windowed averages match hand computation."""
    manifest = tensor_store.load_manifest(dataset_manifest)
    total_ok = True
    for depth in (2, 4):
        bank = load_bank(fitted_workspace / "banks" / f"composite_b{depth}")
        for record in tensor_store.iter_records(manifest, split="test", depth_from=depth):
            emap = encoder_explainer.explain(record, bank)
            total_ok &= int(emap.histogram().sum()) == emap.assignments.size

    rng = np.random.default_rng(505)
    windows_ok = True
    for _ in range(20):
        num_classes = int(rng.integers(2, 6))
        k_per_class = int(rng.integers(1, 4))
        hist = rng.integers(0, 7, size=num_classes * k_per_class)
        hist[int(rng.integers(len(hist)))] += 1  # never empty
        ids = np.repeat(np.arange(len(hist)), hist)
        pad = (-len(ids)) % 4
        if pad:
            ids = np.concatenate([ids, np.full(pad, int(np.argmax(hist)))])
            hist = np.bincount(ids, minlength=len(hist))
        emap = ExplanationMap(
            assignments=ids.reshape(-1, 4), depth_from=4,
            num_prototypes=len(hist), num_classes=num_classes, k_per_class=k_per_class)
        pred = encoder_explainer.predict_counts(emap)
        manual = np.array([
            sum(hist[c * k_per_class:(c + 1) * k_per_class]) / k_per_class
            for c in range(num_classes)
        ])
        windows_ok &= bool(np.allclose(pred.scores, manual))
        windows_ok &= int(pred.histogram.sum()) == emap.assignments.size

    _report(
        "explanation maps: histogram totality + windowed-average counts",
        total_ok and windows_ok,
    )


def _corruptions():
    """Ten distinct dataset corruptions; each must be caught eagerly."""

    def truncate_labels(root, spec):
        tensor_store.write_tensor(np.zeros(3, dtype=np.int64), root / "labels.npy")

    def label_out_of_range(root, spec):
        tensor_store.write_tensor(np.array([0, 1, 99, 2], dtype=np.int64),
                                  root / "labels.npy")

    def wrong_block_channels(root, spec):
        tensor_store.write_tensor(np.zeros((4, 2, 2, 7), dtype=np.float32),
                                  root / "block4.npy")

    def missing_embeddings(root, spec):
        (root / "embeddings.npy").unlink()

    def classifier_shape(root, spec):
        tensor_store.write_tensor(np.ones((3, 10), dtype=np.float32),
                                  root / "classifier.npy")

    def bad_split_tag(root, spec):
        tensor_store.write_tensor(np.array([0, 0, 1, 7], dtype=np.int64),
                                  root / "split.npy")

    def split_length(root, spec):
        tensor_store.write_tensor(np.zeros(5, dtype=np.int64), root / "split.npy")

    def block_ids_not_increasing(root, spec):
        spec["blocks"] = spec["blocks"][::-1]

    def deep_block_grid_larger(root, spec):
        spec["blocks"][1].update({"h": 8, "w": 8})
        tensor_store.write_tensor(np.zeros((4, 8, 8, 6), dtype=np.float32),
                                  root / "block4.npy")

    def truncated_block_file(root, spec):
        data = (root / "block3.npy").read_bytes()
        (root / "block3.npy").write_bytes(data[:len(data) // 2])

    return [truncate_labels, label_out_of_range, wrong_block_channels,
            missing_embeddings, classifier_shape, bad_split_tag, split_length,
            block_ids_not_increasing, deep_block_grid_larger, truncated_block_file]


def _write_valid_mini(root):
    rng = np.random.default_rng(606)
    tensor_store.write_tensor(rng.normal(size=(4, 4, 4, 3)).astype(np.float32),
                              root / "block3.npy")
    tensor_store.write_tensor(rng.normal(size=(4, 2, 2, 6)).astype(np.float32),
                              root / "block4.npy")
    tensor_store.write_tensor(rng.normal(size=(4, 6)).astype(np.float32),
                              root / "embeddings.npy")
    tensor_store.write_tensor(rng.normal(size=(6, 10)).astype(np.float32),
                              root / "classifier.npy")
    tensor_store.write_tensor(np.array([0, 1, 2, 3], dtype=np.int64), root / "labels.npy")
    tensor_store.write_tensor(np.array([0, 0, 1, 1], dtype=np.int64), root / "split.npy")
    return {
        "dataset": "mini",
        "num_classes": 10,
        "embedding_dim": 6,
        "blocks": [
            {"id": 3, "h": 4, "w": 4, "c": 3, "path": "block3.npy"},
            {"id": 4, "h": 2, "w": 2, "c": 6, "path": "block4.npy"},
        ],
        "embeddings": "embeddings.npy",
        "classifier": "classifier.npy",
        "labels": "labels.npy",
        "split": "split.npy",
    }


def test_format_round_trip_and_corruption_detection(tmp_path):
    """NPY bitwise round trips; all 10 seeded corruptions rejected eagerly."""
    rng = np.random.default_rng(707)
    bitwise_ok = True
    for i in range(30):
        rank = int(rng.integers(1, 5))
        shape = tuple(int(rng.integers(1, 7)) for _ in range(rank))
        if rng.random() < 0.5:
            array = rng.normal(size=shape).astype(np.float32)
        else:
            array = rng.integers(-10**9, 10**9, size=shape).astype(np.int64)
        path = tmp_path / f"fixture_{i}.npy"
        tensor_store.write_tensor(array, path)
        back = tensor_store.read_tensor(path)
        bitwise_ok &= back.tobytes() == array.tobytes() and back.shape == array.shape
        bitwise_ok &= np.load(path).tobytes() == array.tobytes()

    caught = 0
    names = []
    for corrupt in _corruptions():
        root = tmp_path / f"ds_{corrupt.__name__}"
        root.mkdir()
        spec = _write_valid_mini(root)
        corrupt(root, spec)
        (root / "manifest.json").write_text(json.dumps(spec))
        try:
            tensor_store.load_manifest(root / "manifest.json")
        except (ValidationError, FormatError):
            caught += 1
        else:
            names.append(corrupt.__name__)
        shutil.rmtree(root)

    _report(
        "format: bitwise NPY round trips + 10/10 corruptions rejected",
        bitwise_ok and caught == 10,
        f"{caught}/10 caught" + (f", missed: {names}" if names else ""),
    )


def test_valid_mini_dataset_loads(tmp_path):
    """Control for the corruption harness: the uncorrupted dataset loads."""
    root = tmp_path / "ok"
    root.mkdir()
    spec = _write_valid_mini(root)
    (root / "manifest.json").write_text(json.dumps(spec))
    manifest = tensor_store.load_manifest(root / "manifest.json")
    assert manifest.num_samples == 4
