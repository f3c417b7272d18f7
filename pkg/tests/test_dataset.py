import numpy as np
import pytest

from deconv.dataset import ReplicateDataset, read_csv
from deconv.errors import DataError, EmptyDataset, InsufficientReplicates


def sample_dataset(tmp_path):
    data = ReplicateDataset(
        w=np.array([[1.0, 2.0], [1.5, 2.5], [3.0, 4.0]]),
        subject_index=np.array([0, 0, 1]),
        rep_index=np.array([0, 1, 0]),
        subject_ids=np.array(["a", "b"]),
    )
    path = tmp_path / "d.csv"
    data.write_csv(path)
    return data, path


class TestRoundTrip:
    def test_write_read(self, tmp_path):
        data, path = sample_dataset(tmp_path)
        loaded = read_csv(path)
        assert np.array_equal(loaded.w, data.w)
        assert np.array_equal(loaded.subject_index, data.subject_index)
        assert list(loaded.subject_ids) == ["a", "b"]

    def test_ragged_counts(self, tmp_path):
        data, _ = sample_dataset(tmp_path)
        assert list(data.counts) == [2, 1]

    def test_exact_float_round_trip(self, tmp_path):
        w = np.array([[np.pi, 1.0 / 3.0]])
        data = ReplicateDataset(
            w=w,
            subject_index=np.zeros(1, dtype=int),
            rep_index=np.zeros(1, dtype=int),
            subject_ids=np.array([0]),
        )
        path = tmp_path / "f.csv"
        data.write_csv(path)
        assert np.array_equal(read_csv(path).w, w)

    def test_lf_line_endings(self, tmp_path):
        _, path = sample_dataset(tmp_path)
        raw = path.read_bytes()
        assert b"\r" not in raw
        assert raw.endswith(b"\n")


class TestParsing:
    def test_bad_field_count_names_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("subject,rep,x1\n1,0,1.0\n2,0\n")
        with pytest.raises(DataError, match="row 3"):
            read_csv(path)

    def test_non_numeric_names_row(self, tmp_path):
        path = tmp_path / "bad2.csv"
        path.write_text("subject,rep,x1\n1,0,1.0\n2,0,oops\n")
        with pytest.raises(DataError, match="row 3"):
            read_csv(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad3.csv"
        path.write_text("foo,bar,x1\n1,0,1.0\n")
        with pytest.raises(DataError, match="header"):
            read_csv(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_csv(tmp_path / "nope.csv")

    def test_non_contiguous_subjects(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text(
            "subject,rep,x1\n7,0,1.0\n3,0,2.0\n7,1,1.5\n"
        )
        data = read_csv(path)
        assert data.n_subjects == 2
        assert list(data.counts) == [2, 1]


class TestHelpers:
    def test_subject_means(self, tmp_path):
        data, _ = sample_dataset(tmp_path)
        assert np.allclose(data.subject_means(), [[1.25, 2.25], [3.0, 4.0]])

    def test_within_variance(self):
        data = ReplicateDataset(
            w=np.array([[0.0], [2.0], [5.0], [5.0]]),
            subject_index=np.array([0, 0, 1, 1]),
            rep_index=np.array([0, 1, 0, 1]),
            subject_ids=np.arange(2),
        )
        # deviations: (-1, 1, 0, 0); dof = 4 - 2
        assert np.allclose(data.within_subject_variance(), [1.0])

    def test_empty_rejected(self):
        with pytest.raises(EmptyDataset):
            ReplicateDataset(
                w=np.zeros((0, 2)),
                subject_index=np.zeros(0, dtype=int),
                rep_index=np.zeros(0, dtype=int),
                subject_ids=np.zeros(0),
            )

    def test_require_replicates(self):
        data = ReplicateDataset(
            w=np.zeros((3, 1)),
            subject_index=np.arange(3),
            rep_index=np.zeros(3, dtype=int),
            subject_ids=np.arange(3),
        )
        with pytest.raises(InsufficientReplicates):
            data.require_replicates()
