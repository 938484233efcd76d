import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boostedattn.report import ExperimentReport, format_value


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_floats_round_trip_exactly(x):
    assert float(format_value(x)) == x


def test_format_value_types():
    assert format_value(True) == "true"
    assert format_value(3) == "3"
    assert format_value(0.1) == "0.10000000000000001"


def sample_report():
    r = ExperimentReport("demo", {"seeds": [0, 1], "note": 'a "quoted", value'})
    rng = np.random.default_rng(0)
    for seed in (0, 1):
        for cond in ("a", "b"):
            r.add(condition=cond, seed=seed, accuracy=float(rng.random()))
    return r


def test_csv_layout_and_round_trip():
    r = sample_report()
    text = r.to_csv()
    assert text.endswith("\r\n") and "\n" not in text.replace("\r\n", "")
    rows = list(csv.reader(io.StringIO(text, newline="")))
    assert rows[0] == ["experiment", "condition", "seed", "accuracy", "version", "config"]
    assert len(rows) == 5
    for parsed, orig in zip(rows[1:], r.rows):
        assert parsed[0] == "demo"
        assert float(parsed[3]) == orig["accuracy"]
        assert json.loads(parsed[5]) == r.config


def test_missing_cells_are_blank():
    r = ExperimentReport("x")
    r.add(a=1)
    r.add(b=2.5)
    rows = list(csv.reader(io.StringIO(r.to_csv(), newline="")))
    assert rows[1][1:3] == ["1", ""] and rows[2][1:3] == ["", "2.5"]


def test_summary_statistics():
    r = ExperimentReport("s")
    for v in (0.2, 0.4, 0.6):
        r.add(condition="c", accuracy=v)
    (s,) = r.summary()
    assert s["n"] == 3
    assert s["mean"] == pytest.approx(0.4)
    assert s["std"] == pytest.approx(np.std([0.2, 0.4, 0.6]))
    assert r.mean(condition="c") == pytest.approx(0.4)
    with pytest.raises(KeyError):
        r.mean(condition="missing")


def test_json_and_files(tmp_path):
    r = sample_report()
    r.reference = {"bayes": 0.5}
    paths = r.write(tmp_path / "out")
    assert [p.name for p in paths] == ["demo.csv", "demo.json"]
    assert paths[0].read_bytes() == r.to_csv().encode()
    doc = json.loads(paths[1].read_text())
    assert doc["reference"] == {"bayes": 0.5}
    assert [s["condition"] for s in doc["summary"]] == ["a", "b"]
    assert r.write(tmp_path / "only", formats=("csv",))[0].suffix == ".csv"


def test_default_metric_and_table():
    r = ExperimentReport("t")
    r.add(condition="x", ppl=12.5)
    assert r.default_metric() == "ppl"
    table = r.table("ppl", scale=1.0)
    assert "12.50" in table and table.splitlines()[0].startswith("condition")
