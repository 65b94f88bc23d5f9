"""Dump ResNet34 activations into the manifest + NPY dataset format.

Forward hooks capture the post-ReLU outputs of residual blocks 2-4 (the
tensors the pooled embedding is computed from), the pooled embedding
itself, and the final linear layer's weights.  Biases are dropped and the
choice is recorded in the manifest's ``meta`` block.  Block tensors are
written incrementally through NPY memmaps so memory stays bounded by one
batch.

Expected shapes for 224x224 inputs: block2 28x28x128, block3 14x14x256,
block4 7x7x512, embedding dim 512.  Any drift (wrong checkpoint, altered
architecture) aborts the export naming the offending layer.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torchvision import models
from torchvision.transforms.functional import to_pil_image

from .datasets import load_pair, num_classes_of, unnormalize

logger = logging.getLogger(__name__)

BLOCK_LAYERS = {2: "layer2", 3: "layer3", 4: "layer4"}
EXPECTED_GRIDS = {2: (28, 28), 3: (14, 14), 4: (7, 7)}


@dataclass
class ExportSpec:
    dataset: str
    out_dir: Path
    checkpoint: Path | None = None
    data_root: Path = Path("./data")
    taps: tuple[int, ...] = (2, 3, 4)
    batch_size: int = 32
    device: str = "cpu"
    cap_train: int = 2000
    cap_test: int = 1000
    download: bool = False
    save_images: bool = True
    num_classes: int | None = None  # inferred from the dataset when None
    fake_size: int = 32
    fake_classes: int = 5

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        if sorted(self.taps) != list(self.taps) or not set(self.taps) <= {2, 3, 4}:
            raise ValueError(f"taps must be an ascending subset of (2, 3, 4), got {self.taps}")


def _build_model(spec: ExportSpec, num_classes: int) -> torch.nn.Module:
    model = models.resnet34(weights=None, num_classes=num_classes)
    if spec.checkpoint is not None:
        state = torch.load(spec.checkpoint, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        model.load_state_dict(state)
        logger.info("loaded checkpoint %s", spec.checkpoint)
    return model.to(spec.device).eval()


class _TapRecorder:
    """Forward hooks capturing post-block activations and the embedding."""

    def __init__(self, model: torch.nn.Module, taps: tuple[int, ...]):
        self.blocks: dict[int, torch.Tensor] = {}
        self.embedding: torch.Tensor | None = None
        self._handles = []
        for b in taps:
            layer = getattr(model, BLOCK_LAYERS[b])
            self._handles.append(layer.register_forward_hook(self._block_hook(b)))
        self._handles.append(model.avgpool.register_forward_hook(self._pool_hook))

    def _block_hook(self, b):
        def hook(_module, _inputs, output):
            self.blocks[b] = output.detach()
        return hook

    def _pool_hook(self, _module, _inputs, output):
        self.embedding = torch.flatten(output.detach(), 1)

    def close(self):
        for h in self._handles:
            h.remove()


def _block_shape_or_die(b: int, tensor: torch.Tensor) -> tuple[int, int, int]:
    # (N, D, H, W) from the hook; exported layout is (N, H, W, D).
    _, channels, h, w = tensor.shape
    if (h, w) != EXPECTED_GRIDS[b]:
        raise RuntimeError(
            f"shape drift at {BLOCK_LAYERS[b]}: got {h}x{w}, expected "
            f"{EXPECTED_GRIDS[b][0]}x{EXPECTED_GRIDS[b][1]} for 224x224 inputs"
        )
    return h, w, channels


def _capped_loader(dataset, cap: int, batch_size: int):
    n = min(len(dataset), cap)
    subset = torch.utils.data.Subset(dataset, range(n))
    return n, torch.utils.data.DataLoader(subset, batch_size=batch_size, shuffle=False)


def export(spec: ExportSpec, model: torch.nn.Module | None = None) -> Path:
    """Run the export; returns the manifest path.

    ``model`` optionally injects a prepared backbone (custom fine-tune,
    test double); otherwise a ResNet34 is built from the checkpoint.
    """
    out = spec.out_dir
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = load_pair(
        spec.dataset, spec.data_root, download=spec.download,
        fake_size=spec.fake_size, fake_classes=spec.fake_classes)
    num_classes = spec.num_classes or num_classes_of(spec.dataset, train_ds)
    if model is None:
        model = _build_model(spec, num_classes)
    else:
        if model.fc.out_features != num_classes:
            raise ValueError(
                f"model classifies {model.fc.out_features} classes, dataset has {num_classes}")
        model = model.to(spec.device).eval()
    recorder = _TapRecorder(model, spec.taps)

    n_train, train_loader = _capped_loader(train_ds, spec.cap_train, spec.batch_size)
    n_test, test_loader = _capped_loader(test_ds, spec.cap_test, spec.batch_size)
    n_total = n_train + n_test

    # Probe one batch to learn block shapes, then preallocate on-disk NPYs.
    with torch.no_grad():
        probe, _ = next(iter(train_loader))
        model(probe.to(spec.device))
    block_dims = {b: _block_shape_or_die(b, recorder.blocks[b]) for b in spec.taps}
    embedding_dim = int(recorder.embedding.shape[1])

    block_files = {
        b: np.lib.format.open_memmap(
            out / f"block{b}.npy", mode="w+", dtype=np.float32,
            shape=(n_total, *block_dims[b]))
        for b in spec.taps
    }
    embeddings = np.lib.format.open_memmap(
        out / "embeddings.npy", mode="w+", dtype=np.float32,
        shape=(n_total, embedding_dim))
    labels = np.zeros(n_total, dtype=np.int64)
    split = np.concatenate([
        np.zeros(n_train, dtype=np.int64), np.ones(n_test, dtype=np.int64)])

    images_dir = out / "images"
    if spec.save_images:
        images_dir.mkdir(exist_ok=True)

    cursor = 0
    with torch.no_grad():
        for loader in (train_loader, test_loader):
            for batch, batch_labels in loader:
                model(batch.to(spec.device))
                size = batch.shape[0]
                rows = slice(cursor, cursor + size)
                for b in spec.taps:
                    _block_shape_or_die(b, recorder.blocks[b])
                    block_files[b][rows] = (
                        recorder.blocks[b].permute(0, 2, 3, 1).cpu().numpy())
                embeddings[rows] = recorder.embedding.cpu().numpy()
                labels[rows] = batch_labels.numpy().astype(np.int64)
                if spec.save_images:
                    for i in range(size):
                        to_pil_image(unnormalize(batch[i].cpu())).save(
                            images_dir / f"{cursor + i:05d}.png")
                cursor += size
    recorder.close()
    for mm in block_files.values():
        mm.flush()
    embeddings.flush()

    # Transposing flips numpy to Fortran order; the format demands C-order.
    weights = np.ascontiguousarray(
        model.fc.weight.detach().cpu().numpy().T.astype(np.float32))  # (D, C)
    np.save(out / "classifier.npy", weights)
    np.save(out / "labels.npy", labels)
    np.save(out / "split.npy", split)

    manifest = {
        "dataset": spec.dataset,
        "num_classes": num_classes,
        "embedding_dim": embedding_dim,
        "blocks": [
            {"id": b, "h": block_dims[b][0], "w": block_dims[b][1],
             "c": block_dims[b][2], "path": f"block{b}.npy"}
            for b in spec.taps
        ],
        "embeddings": "embeddings.npy",
        "classifier": "classifier.npy",
        "labels": "labels.npy",
        "split": "split.npy",
        "meta": {
            "taps": "post_relu_block_outputs",
            "bias_handling": "dropped",
            "backbone": "resnet34",
            "checkpoint": str(spec.checkpoint) if spec.checkpoint else None,
            "cap_train": spec.cap_train,
            "cap_test": spec.cap_test,
        },
    }
    if spec.save_images:
        manifest["images"] = "images"
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    logger.info("exported %d train + %d test samples to %s", n_train, n_test, out)
    return manifest_path
