"""Bit-exact tensor and dataset manifest I/O.

Everything on disk is NPY v1.0 (little-endian, C-order) restricted to the
two dtypes the pipeline uses: ``<f4`` for activations/weights/embeddings
and ``<i8`` for labels, splits and assignments.  The codec is written out
by hand rather than delegated to :func:`numpy.save` so that

* the version is pinned to 1.0 regardless of header size,
* malformed or unsupported files fail with precise, typed errors,
* ``write(read(p))`` is byte-identical to ``p`` for any file this module
  or numpy itself produced (the header layout mirrors numpy's writer,
  including the 64-byte alignment).

A dataset is a single JSON manifest referencing one NPY per activation
block (shape ``(N, H_b, W_b, D_b)``), pooled embeddings ``(N, D)``,
classifier weights ``(D, C)``, labels ``(N,)`` and a 0/1 train/test split
``(N,)``.  Validation is eager: every declared shape is checked against
the actual NPY headers before the first record is yielded.
"""

from __future__ import annotations

import ast
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError, UnsupportedFormatError, ValidationError

MAGIC = b"\x93NUMPY"
SUPPORTED_DESCRS = {"<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}
HEADER_ALIGN = 64

TRAIN, TEST = 0, 1
SPLIT_NAMES = {"train": TRAIN, "test": TEST}


def _check_blob(array: np.ndarray) -> np.ndarray:
    if array.ndim < 1:
        raise ValidationError("tensor rank must be >= 1 (scalars are not storable)")
    if any(dim <= 0 for dim in array.shape):
        raise ValidationError(f"degenerate shape {array.shape}: all dims must be positive")
    if array.dtype not in (np.dtype("<f4"), np.dtype("<i8")):
        raise ValidationError(f"dtype {array.dtype} not storable; use float32 or int64")
    return np.ascontiguousarray(array)


def _descr_of(array: np.ndarray) -> str:
    return "<f4" if array.dtype == np.dtype("<f4") else "<i8"


def _format_header(descr: str, shape: tuple[int, ...]) -> bytes:
    # Same literal layout and 64-byte alignment as numpy.lib.format, so the
    # files interoperate byte-for-byte with np.save/np.load.
    header = "{'descr': %r, 'fortran_order': False, 'shape': %r, }" % (descr, shape)
    prefix_len = len(MAGIC) + 2 + 2  # magic + version + u16 header length
    total = prefix_len + len(header) + 1
    padding = (-total) % HEADER_ALIGN
    return (header + " " * padding + "\n").encode("latin1")


def write_tensor(array: np.ndarray, path: str | Path) -> None:
    """Write ``array`` to ``path`` as NPY v1.0.

    Only float32 / int64 arrays of rank >= 1 with no zero-sized dimension
    are accepted.
    """
    array = _check_blob(array)
    header = _format_header(_descr_of(array), array.shape)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(b"\x01\x00")
        fh.write(struct.pack("<H", len(header)))
        fh.write(header)
        fh.write(array.tobytes(order="C"))


def _parse_header(fh, path) -> tuple[np.dtype, tuple[int, ...], int]:
    """Parse an NPY header; returns (dtype, shape, data offset)."""
    magic = fh.read(6)
    if magic != MAGIC:
        raise FormatError(f"{path}: not an NPY file (bad magic {magic!r})")
    version = fh.read(2)
    if len(version) != 2:
        raise FormatError(f"{path}: truncated version field")
    if version != b"\x01\x00":
        raise UnsupportedFormatError(
            f"{path}: NPY version {version[0]}.{version[1]} unsupported; only 1.0 is accepted"
        )
    raw_len = fh.read(2)
    if len(raw_len) != 2:
        raise FormatError(f"{path}: truncated header length")
    (header_len,) = struct.unpack("<H", raw_len)
    header_bytes = fh.read(header_len)
    if len(header_bytes) != header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = ast.literal_eval(header_bytes.decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise FormatError(f"{path}: unparseable header: {exc}") from exc
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise FormatError(f"{path}: header keys {sorted(header)} != ['descr', 'fortran_order', 'shape']")
    descr = header["descr"]
    if descr not in SUPPORTED_DESCRS:
        raise UnsupportedFormatError(f"{path}: dtype {descr!r} unsupported; expected '<f4' or '<i8'")
    if header["fortran_order"] is not False:
        raise UnsupportedFormatError(f"{path}: fortran_order=True unsupported; arrays must be C-order")
    shape = header["shape"]
    if (
        not isinstance(shape, tuple)
        or len(shape) < 1
        or not all(isinstance(d, int) and d > 0 for d in shape)
    ):
        raise FormatError(f"{path}: bad shape {shape!r}; need a rank>=1 tuple of positive ints")
    return SUPPORTED_DESCRS[descr], shape, 6 + 2 + 2 + header_len


def read_header(path: str | Path) -> tuple[np.dtype, tuple[int, ...]]:
    """Read only the dtype and shape of an NPY file (cheap validation)."""
    with open(path, "rb") as fh:
        dtype, shape, _ = _parse_header(fh, path)
    return dtype, shape


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a full NPY v1.0 file into memory."""
    with open(path, "rb") as fh:
        dtype, shape, _ = _parse_header(fh, path)
        count = int(np.prod(shape))
        data = np.fromfile(fh, dtype=dtype, count=count)
        if data.size != count:
            raise FormatError(f"{path}: payload holds {data.size} items, header declares {count}")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return data.reshape(shape)


def open_tensor(path: str | Path) -> np.ndarray:
    """Memory-map an NPY file read-only (used for streaming large blocks)."""
    path = Path(path)
    with open(path, "rb") as fh:
        dtype, shape, offset = _parse_header(fh, path)
    expected = offset + int(np.prod(shape)) * dtype.itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise FormatError(f"{path}: file is {actual} bytes, header implies {expected}")
    return np.memmap(path, dtype=dtype, mode="r", offset=offset, shape=shape)


@dataclass(frozen=True)
class BlockSpec:
    """One activation block: spatial grid (h, w), channel count c, NPY path."""

    block_id: int
    h: int
    w: int
    c: int
    path: Path


@dataclass(frozen=True)
class DatasetManifest:
    dataset: str
    num_classes: int
    embedding_dim: int
    blocks: tuple[BlockSpec, ...]
    embeddings_path: Path
    classifier_path: Path
    labels_path: Path
    split_path: Path
    num_samples: int
    labels: np.ndarray = field(repr=False)
    split: np.ndarray = field(repr=False)
    images_dir: Path | None = None

    @property
    def block_ids(self) -> tuple[int, ...]:
        return tuple(b.block_id for b in self.blocks)

    def block(self, block_id: int) -> BlockSpec:
        for b in self.blocks:
            if b.block_id == block_id:
                return b
        raise ValidationError(f"block {block_id} not in manifest (has {self.block_ids})")

    def sample_ids(self, split: str | None = None) -> np.ndarray:
        """Ascending sample ids, optionally restricted to 'train' or 'test'."""
        if split is None:
            return np.arange(self.num_samples)
        if split not in SPLIT_NAMES:
            raise ValidationError(f"unknown split {split!r}; use 'train' or 'test'")
        return np.flatnonzero(self.split == SPLIT_NAMES[split])

    def image_path(self, sample_id: int) -> Path:
        if self.images_dir is None:
            raise ValidationError("manifest declares no 'images' directory")
        return self.images_dir / f"{sample_id:05d}.png"


@dataclass(frozen=True)
class ActivationRecord:
    """One sample: per-block activation tensors, pooled embedding, label, split."""

    sample_id: int
    per_block: dict[int, np.ndarray]  # block_id -> (H_b, W_b, D_b) float32
    embedding: np.ndarray  # (D,) float32
    label: int
    split: str


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ValidationError(message)


def _check_file_shape(path: Path, expected_shape: tuple[int, ...], expected_dtype: str) -> None:
    if not path.exists():
        raise ValidationError(f"{path}: referenced by manifest but missing")
    with open(path, "rb") as fh:
        dtype, shape, offset = _parse_header(fh, path)
    if dtype != SUPPORTED_DESCRS[expected_dtype]:
        raise ValidationError(f"{path}: dtype {dtype} but manifest requires {expected_dtype}")
    if shape != expected_shape:
        raise ValidationError(f"{path}: shape {shape} but manifest declares {expected_shape}")
    expected_size = offset + int(np.prod(shape)) * dtype.itemsize
    actual_size = path.stat().st_size
    if actual_size != expected_size:
        raise ValidationError(
            f"{path}: file is {actual_size} bytes but the declared shape implies {expected_size}"
        )


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and fully validate a dataset manifest.

    Relative paths inside the JSON are resolved against the manifest's own
    directory.  Any single inconsistency (missing file, shape or dtype
    drift, label out of range, bad split tag, non-monotone blocks) raises
    :class:`ValidationError` naming the offending file.
    """
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
    required = {"dataset", "num_classes", "embedding_dim", "blocks",
                "embeddings", "classifier", "labels", "split"}
    missing = required - set(spec)
    _require(not missing, f"{path}: manifest missing keys {sorted(missing)}")

    base = path.parent

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base / q

    num_classes = spec["num_classes"]
    embedding_dim = spec["embedding_dim"]
    _require(isinstance(num_classes, int) and num_classes >= 1, f"{path}: num_classes must be >= 1")
    _require(isinstance(embedding_dim, int) and embedding_dim >= 1, f"{path}: embedding_dim must be >= 1")

    blocks = []
    for raw in spec["blocks"]:
        _require(
            set(raw) >= {"id", "h", "w", "c", "path"},
            f"{path}: block entry {raw} incomplete",
        )
        blocks.append(BlockSpec(raw["id"], raw["h"], raw["w"], raw["c"], resolve(raw["path"])))
    _require(len(blocks) >= 1, f"{path}: manifest declares no blocks")
    ids = [b.block_id for b in blocks]
    _require(ids == sorted(set(ids)), f"{path}: block ids {ids} not strictly increasing")
    for shallow, deep in zip(blocks, blocks[1:]):
        _require(
            deep.h * deep.w <= shallow.h * shallow.w,
            f"{path}: block {deep.block_id} grid {deep.h}x{deep.w} larger than "
            f"shallower block {shallow.block_id} ({shallow.h}x{shallow.w})",
        )

    embeddings_path = resolve(spec["embeddings"])
    _require(embeddings_path.exists(), f"{embeddings_path}: referenced by manifest but missing")
    emb_dtype, emb_shape = read_header(embeddings_path)
    _require(emb_dtype == np.dtype("<f4"), f"{embeddings_path}: embeddings must be float32")
    _require(
        len(emb_shape) == 2 and emb_shape[1] == embedding_dim,
        f"{embeddings_path}: shape {emb_shape}, expected (N, {embedding_dim})",
    )
    num_samples = emb_shape[0]
    _check_file_shape(embeddings_path, emb_shape, "<f4")

    for b in blocks:
        _check_file_shape(b.path, (num_samples, b.h, b.w, b.c), "<f4")
    # Pooled embeddings are the deepest block's pixel average, so dims agree.
    _require(
        blocks[-1].c == embedding_dim,
        f"{path}: deepest block has {blocks[-1].c} channels but embedding_dim={embedding_dim}",
    )

    classifier_path = resolve(spec["classifier"])
    _check_file_shape(classifier_path, (embedding_dim, num_classes), "<f4")

    labels_path = resolve(spec["labels"])
    _check_file_shape(labels_path, (num_samples,), "<i8")
    labels = read_tensor(labels_path)
    _require(
        bool((labels >= 0).all() and (labels < num_classes).all()),
        f"{labels_path}: labels outside [0, {num_classes})",
    )

    split_path = resolve(spec["split"])
    _check_file_shape(split_path, (num_samples,), "<i8")
    split = read_tensor(split_path)
    _require(
        bool(np.isin(split, (TRAIN, TEST)).all()),
        f"{split_path}: split tags must be 0 (train) or 1 (test)",
    )

    images_dir = resolve(spec["images"]) if "images" in spec else None

    return DatasetManifest(
        dataset=spec["dataset"],
        num_classes=num_classes,
        embedding_dim=embedding_dim,
        blocks=tuple(blocks),
        embeddings_path=embeddings_path,
        classifier_path=classifier_path,
        labels_path=labels_path,
        split_path=split_path,
        num_samples=num_samples,
        labels=labels,
        split=split,
        images_dir=images_dir,
    )


def load_classifier_matrix(manifest: DatasetManifest) -> np.ndarray:
    """The (D, C) float32 classifier weight matrix."""
    return read_tensor(manifest.classifier_path)


def load_embeddings(manifest: DatasetManifest) -> np.ndarray:
    """The (N, D) float32 pooled-embedding matrix."""
    return read_tensor(manifest.embeddings_path)


def iter_records(
    manifest: DatasetManifest,
    split: str | None = None,
    depth_from: int | None = None,
) -> Iterator[ActivationRecord]:
    """Stream :class:`ActivationRecord` in ascending sample id.

    ``depth_from`` restricts materialized blocks to ids >= that depth;
    deeper-only runs then never touch the shallow (large) block files.
    """
    if depth_from is None:
        depth_from = manifest.block_ids[0]
    wanted = [b for b in manifest.blocks if b.block_id >= depth_from]
    _require(wanted != [], f"depth_from={depth_from} excludes every block {manifest.block_ids}")
    block_maps = {b.block_id: open_tensor(b.path) for b in wanted}
    embeddings = open_tensor(manifest.embeddings_path)
    split_names = {TRAIN: "train", TEST: "test"}
    for sample_id in manifest.sample_ids(split):
        sid = int(sample_id)
        yield ActivationRecord(
            sample_id=sid,
            per_block={b: np.array(m[sid]) for b, m in block_maps.items()},
            embedding=np.array(embeddings[sid]),
            label=int(manifest.labels[sid]),
            split=split_names[int(manifest.split[sid])],
        )
