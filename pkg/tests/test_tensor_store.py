"""Tensor codec and manifest validation tests.

numpy's own NPY reader/writer is the independent reference: files we
write must load bit-exactly with np.load, files np.save writes must read
bit-exactly with read_tensor, and the bytes themselves must agree.
"""

import json
import struct

import numpy as np
import pytest

from protoexplain import tensor_store
from protoexplain.errors import FormatError, UnsupportedFormatError, ValidationError
from protoexplain.tensor_store import (
    iter_records,
    load_manifest,
    read_header,
    read_tensor,
    write_tensor,
)


class TestNpyRoundTrip:
    def test_small_f32_vector(self, tmp_path):
        path = tmp_path / "v.npy"
        write_tensor(np.array([1.0, 2.0, 3.0], dtype=np.float32), path)
        out = read_tensor(path)
        assert out.shape == (3,)
        assert out.dtype == np.float32
        np.testing.assert_array_equal(out, [1.0, 2.0, 3.0])

    def test_write_read_write_byte_identical(self, tmp_path):
        rng = np.random.default_rng(7)
        src = tmp_path / "a.npy"
        dst = tmp_path / "b.npy"
        write_tensor(rng.normal(size=(17, 3)).astype(np.float32), src)
        write_tensor(read_tensor(src), dst)
        assert src.read_bytes() == dst.read_bytes()

    def test_numpy_written_file_round_trips_byte_identical(self, tmp_path):
        rng = np.random.default_rng(8)
        src = tmp_path / "np.npy"
        dst = tmp_path / "ours.npy"
        np.save(src, rng.normal(size=(5, 4, 2)).astype(np.float32))
        write_tensor(read_tensor(src), dst)
        assert src.read_bytes() == dst.read_bytes()

    def test_bytes_agree_with_numpy_writer(self, tmp_path):
        rng = np.random.default_rng(9)
        for shape, dtype in [((3,), np.float32), ((2, 2), np.int64), ((4, 1, 5), np.float32)]:
            array = (rng.normal(size=shape) * 100).astype(dtype)
            ours = tmp_path / "ours.npy"
            ref = tmp_path / "ref.npy"
            write_tensor(array, ours)
            np.save(ref, array)
            assert ours.read_bytes() == ref.read_bytes(), (shape, dtype)

    def test_i64_row_major_payload_order(self, tmp_path):
        # (2, 2) [[1, 2], [3, 4]] must store 1, 2, 3, 4 after the header.
        path = tmp_path / "m.npy"
        write_tensor(np.array([[1, 2], [3, 4]], dtype=np.int64), path)
        raw = path.read_bytes()
        (header_len,) = struct.unpack("<H", raw[8:10])
        payload = raw[10 + header_len:]
        assert struct.unpack("<4q", payload) == (1, 2, 3, 4)
        np.testing.assert_array_equal(np.load(path), [[1, 2], [3, 4]])

    def test_single_element_tensor(self, tmp_path):
        path = tmp_path / "one.npy"
        write_tensor(np.full((1, 1, 1), 5.0, dtype=np.float32), path)
        out = read_tensor(path)
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == 5.0

    def test_large_random_blob_bitwise(self, tmp_path):
        # ~10 MB of float32 noise survives a round trip bit-for-bit.
        rng = np.random.default_rng(10)
        blob = rng.normal(size=(2_500_000,)).astype(np.float32)
        path = tmp_path / "big.npy"
        write_tensor(blob, path)
        out = read_tensor(path)
        assert out.tobytes() == blob.tobytes()

    def test_randomized_corpus_bitwise(self, tmp_path):
        rng = np.random.default_rng(11)
        for i in range(25):
            rank = int(rng.integers(1, 5))
            shape = tuple(int(rng.integers(1, 6)) for _ in range(rank))
            if rng.random() < 0.5:
                array = rng.normal(size=shape).astype(np.float32)
            else:
                array = rng.integers(-1000, 1000, size=shape).astype(np.int64)
            path = tmp_path / f"c{i}.npy"
            write_tensor(array, path)
            out = read_tensor(path)
            assert out.tobytes() == array.tobytes()
            assert out.shape == array.shape and out.dtype == array.dtype
            np.testing.assert_array_equal(np.load(path), array)

    def test_memmap_matches_full_read(self, tmp_path):
        rng = np.random.default_rng(12)
        array = rng.normal(size=(6, 3, 2)).astype(np.float32)
        path = tmp_path / "m.npy"
        write_tensor(array, path)
        mapped = tensor_store.open_tensor(path)
        np.testing.assert_array_equal(np.asarray(mapped), array)


class TestNpyRejections:
    def test_zero_dim_shape_rejected(self):
        with pytest.raises(ValidationError):
            write_tensor(np.zeros((0,), dtype=np.float32), "/tmp/never.npy")

    def test_rank_zero_rejected(self):
        with pytest.raises(ValidationError):
            write_tensor(np.float32(3.0)[()], "/tmp/never.npy")

    def test_unsupported_dtype_on_write(self):
        with pytest.raises(ValidationError):
            write_tensor(np.zeros(3, dtype=np.float64), "/tmp/never.npy")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.npy"
        path.write_bytes(b"NOTNUMPY" + b"\x00" * 64)
        with pytest.raises(FormatError):
            read_tensor(path)

    def test_truncated_file(self, tmp_path):
        good = tmp_path / "good.npy"
        write_tensor(np.arange(100, dtype=np.int64), good)
        bad = tmp_path / "bad.npy"
        bad.write_bytes(good.read_bytes()[:-8])
        with pytest.raises(FormatError):
            read_tensor(bad)

    def test_fortran_order_rejected(self, tmp_path):
        path = tmp_path / "f.npy"
        array = np.asfortranarray(np.arange(6, dtype=np.float32).reshape(2, 3))
        np.save(path, array)
        with pytest.raises(UnsupportedFormatError):
            read_tensor(path)

    def test_float64_rejected(self, tmp_path):
        path = tmp_path / "d.npy"
        np.save(path, np.zeros(4, dtype=np.float64))
        with pytest.raises(UnsupportedFormatError):
            read_tensor(path)

    def test_version_2_rejected(self, tmp_path):
        path = tmp_path / "v2.npy"
        array = np.zeros(3, dtype=np.float32)
        with open(path, "wb") as fh:
            np.lib.format.write_array(fh, array, version=(2, 0))
        with pytest.raises(UnsupportedFormatError):
            read_tensor(path)

    def test_header_only_read(self, tmp_path):
        path = tmp_path / "h.npy"
        write_tensor(np.zeros((4, 7), dtype=np.float32), path)
        dtype, shape = read_header(path)
        assert dtype == np.dtype("<f4")
        assert shape == (4, 7)


def _write_mini_dataset(root, n=4, num_classes=10, dim=6):
    """Hand-built two-block dataset, independent of the synthetic module."""
    rng = np.random.default_rng(42)
    blocks = [(3, 4, 4, 3), (4, 2, 2, dim)]
    entries = []
    for block_id, h, w, c in blocks:
        write_tensor(rng.normal(size=(n, h, w, c)).astype(np.float32),
                     root / f"block{block_id}.npy")
        entries.append({"id": block_id, "h": h, "w": w, "c": c, "path": f"block{block_id}.npy"})
    write_tensor(rng.normal(size=(n, dim)).astype(np.float32), root / "embeddings.npy")
    write_tensor(rng.normal(size=(dim, num_classes)).astype(np.float32), root / "classifier.npy")
    write_tensor(rng.integers(0, num_classes, size=n).astype(np.int64), root / "labels.npy")
    write_tensor(np.array([0, 0, 1, 1][:n], dtype=np.int64), root / "split.npy")
    manifest = {
        "dataset": "mini",
        "num_classes": num_classes,
        "embedding_dim": dim,
        "blocks": entries,
        "embeddings": "embeddings.npy",
        "classifier": "classifier.npy",
        "labels": "labels.npy",
        "split": "split.npy",
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path


class TestManifest:
    def test_loads_and_counts(self, tmp_path):
        manifest = load_manifest(_write_mini_dataset(tmp_path))
        assert manifest.num_samples == 4
        assert manifest.block_ids == (3, 4)

    def test_four_records_labels_in_range(self, tmp_path):
        manifest = load_manifest(_write_mini_dataset(tmp_path))
        records = list(iter_records(manifest))
        assert len(records) == 4
        assert all(0 <= r.label < 10 for r in records)
        assert [r.sample_id for r in records] == [0, 1, 2, 3]

    def test_depth_from_restricts_blocks(self, tmp_path):
        manifest = load_manifest(_write_mini_dataset(tmp_path))
        records = list(iter_records(manifest, depth_from=4))
        assert all(set(r.per_block) == {4} for r in records)

    def test_streaming_determinism(self, tmp_path):
        manifest = load_manifest(_write_mini_dataset(tmp_path))
        first = list(iter_records(manifest))
        second = list(iter_records(manifest))
        for a, b in zip(first, second):
            assert a.sample_id == b.sample_id
            np.testing.assert_array_equal(a.embedding, b.embedding)
            for k in a.per_block:
                np.testing.assert_array_equal(a.per_block[k], b.per_block[k])

    def test_split_filter(self, tmp_path):
        manifest = load_manifest(_write_mini_dataset(tmp_path))
        assert [r.sample_id for r in iter_records(manifest, split="train")] == [0, 1]
        assert [r.sample_id for r in iter_records(manifest, split="test")] == [2, 3]

    def test_corrupt_labels_length_names_file(self, tmp_path):
        path = _write_mini_dataset(tmp_path)
        write_tensor(np.zeros(3, dtype=np.int64), tmp_path / "labels.npy")
        with pytest.raises(ValidationError, match="labels.npy"):
            load_manifest(path)

    def test_label_out_of_range(self, tmp_path):
        path = _write_mini_dataset(tmp_path)
        write_tensor(np.array([0, 1, 10, 2], dtype=np.int64), tmp_path / "labels.npy")
        with pytest.raises(ValidationError, match="labels"):
            load_manifest(path)

    def test_missing_block_file(self, tmp_path):
        path = _write_mini_dataset(tmp_path)
        (tmp_path / "block4.npy").unlink()
        with pytest.raises(ValidationError, match="block4.npy"):
            load_manifest(path)

    def test_block_shape_drift(self, tmp_path):
        path = _write_mini_dataset(tmp_path)
        write_tensor(np.zeros((4, 2, 2, 5), dtype=np.float32), tmp_path / "block4.npy")
        with pytest.raises(ValidationError, match="block4.npy"):
            load_manifest(path)

    def test_non_monotone_grids_rejected(self, tmp_path):
        path = _write_mini_dataset(tmp_path)
        spec = json.loads(path.read_text())
        # Declared deep block larger than the shallow one.
        spec["blocks"][1].update({"h": 8, "w": 8})
        path.write_text(json.dumps(spec))
        write_tensor(np.zeros((4, 8, 8, 6), dtype=np.float32), tmp_path / "block4.npy")
        with pytest.raises(ValidationError, match="grid"):
            load_manifest(path)

    def test_bad_split_tag(self, tmp_path):
        path = _write_mini_dataset(tmp_path)
        write_tensor(np.array([0, 0, 1, 2], dtype=np.int64), tmp_path / "split.npy")
        with pytest.raises(ValidationError, match="split"):
            load_manifest(path)
