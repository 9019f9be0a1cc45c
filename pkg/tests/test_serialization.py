"""JSON records, sample CSVs and row-atomic result CSVs."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from covshift.errors import ConfigError
from covshift.serialization import (
    RowWriter,
    format_cell,
    provenance,
    read_json,
    read_rows_csv,
    read_samples_csv,
    write_json,
    write_rows_csv,
    write_samples_csv,
)


class TestJson:
    def test_round_trip_numpy(self, tmp_path):
        p = tmp_path / "a.json"
        write_json(p, {"x": np.arange(3.0), "k": np.int64(4), "b": np.bool_(True)})
        assert read_json(p) == {"x": [0.0, 1.0, 2.0], "k": 4, "b": True}
        assert not (tmp_path / "a.json.tmp").exists()

    def test_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            read_json(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        with pytest.raises(ConfigError, match="not valid JSON"):
            read_json(bad)

    def test_provenance_is_content_hash(self):
        a = provenance({"a": 1, "b": [1, 2]})
        assert a == provenance({"b": [1, 2], "a": 1})
        assert a != provenance({"a": 2, "b": [1, 2]})
        assert a.startswith("covshift-0.1.0+plan.") and len(a.split(".")[-1]) == 12


class TestSamplesCsv:
    @given(arrays(float, (7, 3), elements=st.floats(-1e6, 1e6)),
           arrays(float, 7, elements=st.floats(-1, 1)))
    def test_round_trip_exact(self, x, f):
        import tempfile
        from pathlib import Path

        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "s.csv"
            write_samples_csv(p, x, f)
            x2, f2 = read_samples_csv(p)
            np.testing.assert_array_equal(x2, x)
            np.testing.assert_array_equal(f2, f)
            write_samples_csv(p, x)
            x3, f3 = read_samples_csv(p)
            np.testing.assert_array_equal(x3, x)
            assert f3 is None

    def test_header(self, tmp_path):
        p = tmp_path / "s.csv"
        write_samples_csv(p, [[1.0, 2.0]], [0.5])
        assert p.read_text().splitlines()[0] == "dim,x0,x1,f_value"

    def test_bad_header(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(ConfigError):
            read_samples_csv(p)


class TestRows:
    def test_cells(self):
        assert format_cell(None) == ""
        assert format_cell(True) == "true"
        assert format_cell(math.nan) == "nan"
        assert format_cell(0.1) == "0.1"
        assert float(format_cell(1 / 3)) == 1 / 3

    def test_round_trip(self, tmp_path):
        rows = [{"a": 1, "b": 0.25, "c": "x", "d": False}, {"a": 2, "b": None, "c": "y", "d": True}]
        write_rows_csv(tmp_path / "r.csv", ("a", "b", "c", "d"), rows)
        assert read_rows_csv(tmp_path / "r.csv") == rows

    def test_rows_visible_before_close(self, tmp_path):
        p = tmp_path / "r.csv"
        w = RowWriter(p, ("a",))
        w.write({"a": 1})
        assert p.read_text() == "a\n1\n"
        w.close()
