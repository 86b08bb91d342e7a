import struct

import numpy as np
import pytest

from gqe.core.errors import DimensionError, FormatError, LabelError, NonFiniteError, ZeroVectorError
from gqe.models.store import SynthSpec
from gqe.services.embed_store_service import (
    STORE_HEADER,
    build_store,
    generate_queries,
    generate_synthetic,
    ingest_text,
    labels_path_for,
    load_store,
    save_store,
    store_digest,
)


def write_raw(path, rows, flags=0, magic=b"EMB1"):
    rows = np.asarray(rows, dtype="<f4")
    with open(path, "wb") as handle:
        handle.write(STORE_HEADER.pack(magic, rows.shape[1], rows.shape[0], flags))
        handle.write(rows.tobytes())


class TestLoadStore:
    def test_unit_rows_load_unchanged(self, tmp_path):
        path = tmp_path / "s.emb"
        write_raw(path, [[1, 0], [0, 1]])
        store = load_store(path)
        np.testing.assert_array_equal(store.vectors, [[1, 0], [0, 1]])
        assert store.count == 2 and store.dim == 2

    def test_normalizes_rows(self, tmp_path):
        path = tmp_path / "s.emb"
        write_raw(path, [[3, 4]])
        store = load_store(path)
        np.testing.assert_allclose(store.vectors[0], [0.6, 0.8], atol=1e-7)
        assert store.normalized

    def test_zero_row_is_rejected(self, tmp_path):
        path = tmp_path / "s.emb"
        write_raw(path, [[1, 0], [0, 0]])
        with pytest.raises(ZeroVectorError, match="zero vector"):
            load_store(path)

    def test_raw_load_keeps_values(self, tmp_path):
        path = tmp_path / "s.emb"
        write_raw(path, [[3, 4]])
        store = load_store(path, normalize=False)
        np.testing.assert_array_equal(store.vectors[0], [3, 4])
        assert not store.normalized

    def test_non_finite_value(self, tmp_path):
        path = tmp_path / "s.emb"
        write_raw(path, [[1, np.nan]])
        with pytest.raises(NonFiniteError):
            load_store(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "s.emb"
        write_raw(path, [[1, 0]], magic=b"XXXX")
        with pytest.raises(FormatError, match="magic"):
            load_store(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "s.emb"
        path.write_bytes(b"EMB1\x02")
        with pytest.raises(FormatError):
            load_store(path)

    def test_payload_shorter_than_header_declares(self, tmp_path):
        path = tmp_path / "s.emb"
        path.write_bytes(STORE_HEADER.pack(b"EMB1", 2, 3, 0) + struct.pack("<4f", 1, 0, 0, 1))
        with pytest.raises(DimensionError):
            load_store(path)

    def test_normalized_flag_does_not_skip_normalization(self, tmp_path):
        path = tmp_path / "s.emb"
        write_raw(path, [[3, 4], [1, 0], [0, 1]], flags=1)
        store = load_store(path)
        norms = np.linalg.norm(store.as_float64(), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)
        np.testing.assert_allclose(store.vectors[0], [0.6, 0.8], atol=1e-7)
        assert store.normalized

    def test_normalized_flag_does_not_hide_zero_rows(self, tmp_path):
        path = tmp_path / "s.emb"
        write_raw(path, [[1, 0], [0, 0]], flags=1)
        with pytest.raises(ZeroVectorError, match="zero vector"):
            load_store(path)

    def test_raw_load_of_wrongly_flagged_file_is_not_marked_normalized(self, tmp_path):
        path = tmp_path / "s.emb"
        write_raw(path, [[3, 4]], flags=1)
        store = load_store(path, normalize=False)
        np.testing.assert_array_equal(store.vectors[0], [3, 4])
        assert not store.normalized

    def test_flagged_unit_rows_load_bit_identical(self, tmp_path, make_store):
        store = make_store(50, 8, seed=4)
        path = tmp_path / "s.emb"
        save_store(store, path)
        np.testing.assert_array_equal(load_store(path).vectors, store.vectors)

    def test_normalized_rows_within_tolerance(self, tmp_path, make_store):
        store = make_store(200, 16, seed=3)
        path = tmp_path / "s.emb"
        save_store(store, path)
        norms = np.linalg.norm(load_store(path).as_float64(), axis=1)
        assert np.max(np.abs(norms - 1.0)) < 1e-5


class TestSaveStore:
    def test_round_trip_is_bit_identical(self, tmp_path, make_store):
        store = make_store(37, 5, seed=1, labels=4)
        path = tmp_path / "s.emb"
        save_store(store, path)
        loaded = load_store(path)
        assert loaded == store
        np.testing.assert_array_equal(loaded.labels, store.labels)
        assert labels_path_for(path).exists()

    def test_unwritable_path(self, tmp_path, make_store):
        with pytest.raises(OSError):
            save_store(make_store(3, 2), tmp_path / "missing" / "s.emb")

    def test_stores_are_read_only(self, make_store):
        store = make_store(3, 2)
        with pytest.raises(ValueError):
            store.vectors[0, 0] = 5.0


class TestLabels:
    def test_label_count_mismatch(self, tmp_path):
        path = tmp_path / "s.emb"
        write_raw(path, [[1, 0], [0, 1]])
        (tmp_path / "s.labels").write_text("0,1\n")
        with pytest.raises(LabelError):
            load_store(path, labels_path=tmp_path / "s.labels")

    def test_ids_must_ascend(self, tmp_path):
        path = tmp_path / "s.emb"
        write_raw(path, [[1, 0], [0, 1]])
        (tmp_path / "s.labels").write_text("1,0\n0,1\n")
        with pytest.raises(LabelError, match="expected id 0"):
            load_store(path, labels_path=tmp_path / "s.labels")


class TestIngestText:
    def test_comma_separated_rows(self, tmp_path):
        path = tmp_path / "e.txt"
        path.write_text("3,4\n\n1,0\n")
        store = ingest_text(path)
        np.testing.assert_allclose(store.vectors, [[0.6, 0.8], [1, 0]], atol=1e-7)

    def test_ragged_rows(self, tmp_path):
        path = tmp_path / "e.txt"
        path.write_text("3,4\n1,0,0\n")
        with pytest.raises(DimensionError, match=":2:"):
            ingest_text(path)

    def test_not_numbers(self, tmp_path):
        path = tmp_path / "e.txt"
        path.write_text("a,b\n")
        with pytest.raises(FormatError):
            ingest_text(path)


class TestSynthetic:
    def test_same_spec_is_bit_identical(self):
        spec = SynthSpec(clusters=2, points_per_cluster=3, dim=4, noise_sigma=0.1, seed=7)
        first, second = generate_synthetic(spec), generate_synthetic(spec)
        assert first == second
        assert store_digest(first) == store_digest(second)

    def test_other_seed_differs(self):
        spec = SynthSpec(clusters=2, points_per_cluster=3, dim=4, noise_sigma=0.1, seed=7)
        other = spec.model_copy(update={"seed": 8})
        assert generate_synthetic(spec) != generate_synthetic(other)

    def test_zero_noise_collapses_to_centers(self):
        store = generate_synthetic(SynthSpec(clusters=3, points_per_cluster=4, dim=5, noise_sigma=0.0, seed=2))
        for c in range(3):
            rows = store.vectors[store.labels == c]
            np.testing.assert_array_equal(rows, np.repeat(rows[:1], 4, axis=0))
        assert store.count == 12

    def test_labels_follow_clusters(self):
        store = generate_synthetic(SynthSpec(clusters=3, points_per_cluster=2, dim=4, noise_sigma=0.1))
        np.testing.assert_array_equal(store.labels, [0, 0, 1, 1, 2, 2])

    def test_queries_come_from_an_independent_stream(self):
        spec = SynthSpec(clusters=3, points_per_cluster=4, dim=6, noise_sigma=0.2, seed=1)
        queries = generate_queries(spec, 4)
        database = generate_synthetic(spec)
        assert queries.count == database.count
        assert not np.array_equal(queries.vectors, database.vectors)
        np.testing.assert_array_equal(queries.labels, database.labels)

    def test_build_store_rejects_bad_labels(self):
        with pytest.raises(LabelError):
            build_store(np.eye(3), np.array([0, 1]))
