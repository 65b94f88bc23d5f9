"""Deterministic synthetic datasets in the on-disk manifest format.

Class embeddings are isotropic Gaussian blobs whose means sit pairwise at
``separation`` (in units of the noise sigma), and every activation block
is spatially constant per sample, so the pooled embedding equals each
block-4 pixel exactly.  The classifier columns are the class means, which
makes the linear head equivalent to nearest-class-mean on this data.

The generator writes everything a real exporter would: block NPYs, pooled
embeddings, classifier weights, labels, split tags, a manifest, and small
PNG images (class-colored noise) for the rendering path.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor_store
from .render import PALETTE

DEFAULT_SEED = 20260810
DEFAULT_BLOCK_LAYOUT = ((2, 8, 8, 6), (3, 4, 4, 8))  # (block_id, h, w, channels)


def generate(
    out_dir: str | Path,
    num_classes: int = 5,
    dim: int = 16,
    n_train_per_class: int = 20,
    n_test_per_class: int = 8,
    separation: float = 6.0,
    noise: float = 1.0,
    seed: int = DEFAULT_SEED,
    shallow_blocks: tuple[tuple[int, int, int, int], ...] = DEFAULT_BLOCK_LAYOUT,
    deep_block: tuple[int, int, int] = (4, 2, 2),
    image_size: int = 64,
    with_images: bool = True,
) -> Path:
    """Write a dataset under ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))

    n_train = num_classes * n_train_per_class
    n_test = num_classes * n_test_per_class
    n = n_train + n_test
    labels = np.concatenate([
        np.repeat(np.arange(num_classes, dtype=np.int64), n_train_per_class),
        np.repeat(np.arange(num_classes, dtype=np.int64), n_test_per_class),
    ])
    split = np.concatenate([
        np.zeros(n_train, dtype=np.int64),
        np.ones(n_test, dtype=np.int64),
    ])

    # Pairwise mean distance a*sqrt(2) == separation * noise.
    scale = separation * noise / np.sqrt(2.0)

    def class_means(channels: int) -> np.ndarray:
        if channels < num_classes:
            raise ValueError(f"need >= {num_classes} channels, got {channels}")
        means = np.zeros((num_classes, channels))
        means[np.arange(num_classes), np.arange(num_classes)] = scale
        return means

    blocks = list(shallow_blocks) + [(*deep_block, dim)]
    block_entries = []
    block4 = None
    for block_id, h, w, channels in blocks:
        means = class_means(channels)
        vectors = means[labels] + rng.normal(0.0, noise, size=(n, channels))
        tensor = np.broadcast_to(
            vectors[:, None, None, :].astype(np.float32), (n, h, w, channels)
        ).copy()
        path = out_dir / f"block{block_id}.npy"
        tensor_store.write_tensor(tensor, path)
        block_entries.append({"id": block_id, "h": h, "w": w, "c": channels,
                              "path": path.name})
        if block_id == blocks[-1][0]:
            block4 = tensor

    embeddings = block4.mean(axis=(1, 2)).astype(np.float32)
    tensor_store.write_tensor(embeddings, out_dir / "embeddings.npy")

    classifier = class_means(dim).T.astype(np.float32)  # (D, C), column j = mean_j
    tensor_store.write_tensor(classifier, out_dir / "classifier.npy")
    tensor_store.write_tensor(labels, out_dir / "labels.npy")
    tensor_store.write_tensor(split, out_dir / "split.npy")

    manifest = {
        "dataset": "synthetic-blobs",
        "num_classes": num_classes,
        "embedding_dim": dim,
        "blocks": block_entries,
        "embeddings": "embeddings.npy",
        "classifier": "classifier.npy",
        "labels": "labels.npy",
        "split": "split.npy",
    }
    if with_images:
        images_dir = out_dir / "images"
        images_dir.mkdir(exist_ok=True)
        for i in range(n):
            base = np.array(PALETTE[int(labels[i]) % len(PALETTE)], dtype=np.float64)
            pixels = base + rng.normal(0.0, 18.0, size=(image_size, image_size, 3))
            img = np.clip(pixels, 0, 255).astype(np.uint8)
            Image.fromarray(img).save(images_dir / f"{i:05d}.png")
        manifest["images"] = "images"

    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path
