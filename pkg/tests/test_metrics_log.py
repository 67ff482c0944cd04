import math
from concurrent.futures import ThreadPoolExecutor

from metrics_log import MetricsLog, format_value, parse_value, read_csv, read_jsonl, write_csv


def test_floats_survive_csv_bit_exact(tmp_path):
    values = [0.1, 1 / 3, 2.0 ** -40, 123456.789e10]
    write_csv(tmp_path / "t.csv", [{"x": v, "i": k} for k, v in enumerate(values)], ["i", "x"])
    rows = read_csv(tmp_path / "t.csv")
    assert [r["x"] for r in rows] == values
    assert [r["i"] for r in rows] == [0, 1, 2, 3]


def test_value_formatting():
    assert format_value(None) == "" and parse_value("") is None
    assert format_value(True) == "true" and parse_value("true") is True
    assert parse_value("width") == "width"
    assert parse_value("7") == 7


def test_jsonl_append_and_nonfinite(tmp_path):
    log = MetricsLog(tmp_path / "sub" / "r.jsonl")
    log.append_jsonl({"a": 1.5, "b": None})
    log.append_jsonl({"a": math.inf})
    rows = read_jsonl(log.path)
    assert rows == [{"a": 1.5, "b": None}, {"a": "inf"}]


def test_concurrent_appends_do_not_interleave(tmp_path):
    path = tmp_path / "r.jsonl"

    def write(k):
        log = MetricsLog(path)
        for j in range(50):
            log.append_jsonl({"k": k, "j": j, "pad": "x" * 200})

    with ThreadPoolExecutor(max_workers=4) as ex:
        list(ex.map(write, range(4)))
    rows = read_jsonl(path)
    assert len(rows) == 200
    assert all(len(r["pad"]) == 200 for r in rows)
