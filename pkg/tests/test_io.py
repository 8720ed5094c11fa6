"""File formats: matrices, vectors, Laplacian TSV, JSON reports and CSV."""

import numpy as np
import orjson
import pytest

from forster.api.schemas import BenchSummary, ExperimentSpec, SpectralCertificate
from forster.core.errors import DimensionMismatch, ParseError
from forster.data import io
from forster.modules.soc import SparseLaplacian


class TestMatrices:
    def test_text_round_trip_is_exact(self, tmp_path, rng):
        A = rng.standard_normal((4, 3))
        path = tmp_path / "A.txt"
        io.write_matrix(path, A)
        assert np.array_equal(io.read_matrix(path), A)

    def test_binary_detected_by_suffix(self, tmp_path, rng):
        A = rng.standard_normal((5, 2))
        path = tmp_path / "A.bin"
        io.write_matrix(path, A, binary=True)
        assert path.stat().st_size == 16 + 8 * 10
        assert np.array_equal(io.read_matrix(path), A)

    def test_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "A.txt"
        path.write_text("# rows\n2 2\n\n1 0\n# middle\n0 1\n")
        assert np.array_equal(io.read_matrix(path), np.eye(2))

    @pytest.mark.parametrize("text, line", [
        ("2 2\n1 0\n0 x\n", 3),
        ("2 2\n1 0 3\n0 1\n", 2),
        ("2\n1 0\n", 1),
        ("3 2\n1 0\n0 1\n", 3),
        ("1 1\nnan\n", 2),
    ])
    def test_parse_errors_carry_line(self, tmp_path, text, line):
        path = tmp_path / "bad.txt"
        path.write_text(text)
        with pytest.raises(ParseError) as excinfo:
            io.read_matrix(path)
        assert excinfo.value.line == line

    def test_binary_size_mismatch(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(np.array([3, 2], dtype="<i8").tobytes() + np.zeros(5).tobytes())
        with pytest.raises(ParseError):
            io.read_matrix(path)
        (tmp_path / "short.bin").write_bytes(b"\x00" * 8)
        with pytest.raises(ParseError):
            io.read_matrix(tmp_path / "short.bin")


class TestVectors:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "c.txt"
        io.write_vector(path, [0.5, 1.0 / 3.0])
        assert io.read_vector(path, expected=2).tolist() == [0.5, 1.0 / 3.0]

    def test_length_mismatch(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("1\n2\n")
        with pytest.raises(DimensionMismatch):
            io.read_vector(path, expected=3)

    def test_two_values_on_a_line(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("1\n2 3\n")
        with pytest.raises(ParseError) as excinfo:
            io.read_vector(path)
        assert excinfo.value.line == 2


class TestLaplacians:
    def test_header_and_round_trip(self, tmp_path):
        L = SparseLaplacian.from_edges(5, [0, 3], [1, 1], [2.5, 0.5])
        path = tmp_path / "L.tsv"
        io.write_laplacian_tsv(path, L)
        assert path.read_text().splitlines()[0] == "# n 5"
        back = io.read_laplacian_tsv(path)
        assert back.n == 5 and back.edges() == L.edges()

    def test_size_from_largest_index(self, tmp_path):
        path = tmp_path / "L.tsv"
        path.write_text("0\t1\t1.0\n1 2 2.0\n")
        L = io.read_laplacian_tsv(path)
        assert L.n == 3
        assert np.allclose(L.dense().sum(axis=1), 0.0)

    def test_index_outside_declared_size(self, tmp_path):
        path = tmp_path / "L.tsv"
        path.write_text("# n 2\n0\t2\t1.0\n")
        with pytest.raises(DimensionMismatch):
            io.read_laplacian_tsv(path)

    @pytest.mark.parametrize("row", ["0\t1\t-1.0", "0\t1", "a\t1\t1.0", "-1\t1\t1.0"])
    def test_bad_rows(self, tmp_path, row):
        path = tmp_path / "L.tsv"
        path.write_text("0\t1\t1.0\n" + row + "\n")
        with pytest.raises(ParseError) as excinfo:
            io.read_laplacian_tsv(path)
        assert excinfo.value.line == 2


class TestReports:
    def test_aliases_in_json(self):
        certificate = SpectralCertificate(eig_min=0.9, eig_max=1.1, epsilon_achieved=0.1, passed=True)
        data = orjson.loads(io.dumps_report(certificate))
        assert data["pass"] is True
        assert "passed" not in data

    def test_read_model(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_bytes(orjson.dumps({"d": [3], "sigma": [0.05], "seeds": 2}))
        spec = io.read_model(path, ExperimentSpec)
        assert spec.seed_list() == [0, 1] and spec.n_factor == 4

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text("{\n  \"d\": [3],\n  oops\n}")
        with pytest.raises(ParseError):
            io.read_json(path)

    def test_model_mismatch(self, tmp_path):
        path = tmp_path / "summary.json"
        path.write_bytes(orjson.dumps({"cells": "many"}))
        with pytest.raises(ParseError):
            io.read_model(path, BenchSummary)


class TestCsv:
    def test_header_written_once(self, tmp_path):
        path = tmp_path / "rows.csv"
        io.append_csv_rows(path, ("a", "b"), [(1, 2)])
        io.append_csv_rows(path, ("a", "b"), [(3, 4), (5, 6)])
        assert io.read_csv(path) == [{"a": "1", "b": "2"}, {"a": "3", "b": "4"}, {"a": "5", "b": "6"}]

    def test_write_replaces(self, tmp_path):
        path = tmp_path / "rows.csv"
        io.write_csv(path, ("x",), [(1,)])
        io.write_csv(path, ("x",), [(2,)])
        assert io.read_csv(path) == [{"x": "2"}]
