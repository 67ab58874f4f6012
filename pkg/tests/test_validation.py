from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import two_pass_stats

from geoflow.errors import ParameterError, ParseError
from geoflow.validation import (
    ArtifactManifest,
    ValidationRule,
    default_rules_for,
    evaluate_rules,
    load_rules,
    read_ascii_grid,
    write_ascii_grid,
)

HEADER = "ncols 3\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 30\nNODATA_value -9999\n"


def grid_file(tmp_path, body: str, name: str = "g.asc"):
    path = tmp_path / name
    path.write_text(body)
    return path


def manifest_for(name: str, path: str, kind: str = "raster", results=None) -> ArtifactManifest:
    return ArtifactManifest.from_dict({"artifacts": [{"name": name, "path": path, "kind": kind}], "results": results})


def test_read_grid_header_values_and_crs(tmp_path):
    path = grid_file(tmp_path, HEADER + "1 2 3\n4 -9999 6\n")
    (tmp_path / "g.prj").write_text("EPSG:32633\n")
    grid = read_ascii_grid(path)
    assert grid.values.shape == (2, 3)
    assert grid.cell(1, 1) is None and grid.cell(0, 2) == 3.0
    s = grid.stats
    assert (s.rows, s.cols, s.min, s.max, s.crs) == (2, 3, 1.0, 6.0, "EPSG:32633")
    assert s.mean == pytest.approx(16 / 5) and s.nodata_fraction == pytest.approx(1 / 6)


def test_missing_prj_gives_unknown_crs(tmp_path):
    assert read_ascii_grid(grid_file(tmp_path, HEADER + "1 2 3\n4 5 6\n")).stats.crs == "unknown"


@pytest.mark.parametrize(
    "body, line",
    [
        (HEADER + "1 2\n4 5 6\n", 7),  # short row
        (HEADER + "1 2 x\n4 5 6\n", 7),  # non-numeric cell
        (HEADER + "1 2 3\n", 7),  # too few rows
        ("ncols 3\nnrows 2\nbogus 1\n", 3),  # unknown header key
        ("ncols 3\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n", 5),  # missing nrows
    ],
)
def test_malformed_grids_report_line_numbers(tmp_path, body, line):
    with pytest.raises(ParseError) as info:
        read_ascii_grid(grid_file(tmp_path, body))
    assert info.value.line == line


def test_all_nodata_grid_has_no_value_stats(tmp_path):
    grid = read_ascii_grid(grid_file(tmp_path, HEADER + "-9999 -9999 -9999\n-9999 -9999 -9999\n"))
    assert grid.stats.min is None and grid.stats.mean is None and grid.stats.nodata_fraction == 1.0


cell = st.one_of(st.just(-9999.0), st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False))


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_stats_match_two_pass_oracle(tmp_path_factory, rows, cols, data):
    values = data.draw(st.lists(st.lists(cell, min_size=cols, max_size=cols), min_size=rows, max_size=rows))
    path = tmp_path_factory.mktemp("g") / "g.asc"
    write_ascii_grid(path, np.array(values), nodata=-9999.0, fmt="%.17g")
    stats = read_ascii_grid(path).stats
    want = two_pass_stats(values, -9999.0)
    assert stats.nodata_fraction == pytest.approx(want["nodata_fraction"], rel=1e-12)
    for key in ("min", "max", "mean"):
        if want[key] is None:
            assert getattr(stats, key) is None
        else:
            assert getattr(stats, key) == pytest.approx(want[key], rel=1e-12, abs=1e-12)


def test_write_then_read_round_trip(tmp_path):
    values = np.array([[0.5, -9999.0], [0.25, 1.0]])
    path = write_ascii_grid(tmp_path / "r.asc", values, crs="EPSG:4326", cellsize=10, xll=5, yll=6)
    grid = read_ascii_grid(path)
    assert np.array_equal(grid.values, values)
    assert grid.header["cellsize"] == 10 and grid.stats.crs == "EPSG:4326"


def test_ndvi_out_of_range_fails_default_rules(tmp_path):
    write_ascii_grid(tmp_path / "ndvi.asc", np.array([[0.2, 1.5], [-0.3, 0.1]]))
    report = evaluate_rules(manifest_for("ndvi", "ndvi.asc"), default_rules_for("ndvi"), tmp_path)
    assert not report.passed
    assert [rid for rid, _ in report.failures] == ["ndvi.range"]
    assert "out of logical range" in report.failures[0][1]


def test_all_invalid_output_fails_invalid_fraction(tmp_path):
    write_ascii_grid(tmp_path / "ndvi.asc", np.full((2, 2), -9999.0))
    report = evaluate_rules(manifest_for("ndvi", "ndvi.asc"), default_rules_for("ndvi"), tmp_path)
    assert "ndvi.invalid" in dict(report.failures)


def test_clean_outputs_pass_and_every_rule_is_counted(tmp_path):
    write_ascii_grid(tmp_path / "ndvi.asc", np.array([[0.2, -0.5], [0.9, -9999.0]]))
    rules = default_rules_for("ndvi")
    report = evaluate_rules(manifest_for("ndvi", "ndvi.asc"), rules, tmp_path)
    assert report.passed and report.checked == len(rules) == 3
    assert report.to_dict()["pass"] is True


def test_classification_rules_check_integer_classes(tmp_path):
    write_ascii_grid(tmp_path / "m.asc", np.array([[0, 1], [1, 0.5]]))
    report = evaluate_rules(manifest_for("m", "m.asc"), default_rules_for("classification", "m"), tmp_path)
    assert "m.classes" in dict(report.failures)


def test_missing_manifest_fails_rather_than_passing(tmp_path):
    report = evaluate_rules(None, default_rules_for("ndvi", "ndvi"), tmp_path)
    assert not report.passed and len(report.failures) == 3
    assert dict(report.failures)["ndvi.exists"] == "artifact missing: ndvi"


def test_keyvalue_results_rules(tmp_path):
    ok = manifest_for("summary", "summary.json", "keyvalue", {"mean_ndvi": 0.42})
    assert evaluate_rules(ok, default_rules_for("keyvalue", "summary"), tmp_path).passed
    empty = manifest_for("summary", "summary.json", "keyvalue", None)
    assert not evaluate_rules(empty, default_rules_for("keyvalue", "summary"), tmp_path).passed
    tol = ValidationRule("t", "keyvalue_tolerance", {"key": "mean_ndvi", "expected": 0.42, "rel_tol": 0.01})
    assert evaluate_rules(ok, [tol], tmp_path).passed
    off = ValidationRule("t", "keyvalue_tolerance", {"key": "mean_ndvi", "expected": 0.5})
    assert not evaluate_rules(ok, [off], tmp_path).passed


def test_metadata_match(tmp_path):
    write_ascii_grid(tmp_path / "a.asc", np.ones((3, 4)), crs="EPSG:3857")
    good = ValidationRule("m", "metadata_match", {"artifact": "a", "rows": 3, "cols": 4, "crs": "EPSG:3857"})
    bad = ValidationRule("m2", "metadata_match", {"artifact": "a", "crs": "EPSG:4326"})
    report = evaluate_rules(manifest_for("a", "a.asc"), [good, bad], tmp_path)
    assert [rid for rid, _ in report.failures] == ["m2"]


@pytest.mark.parametrize(
    "kind, params",
    [
        ("value_range", {"artifact": "a", "lo": 2, "hi": 1}),
        ("invalid_fraction_max", {"artifact": "a", "threshold": 1.5}),
        ("metadata_match", {"artifact": "a"}),
        ("value_range", {"artifact": "a"}),
        ("entropy", {}),
    ],
)
def test_rule_parameter_validation(kind, params):
    with pytest.raises(ParameterError):
        ValidationRule("r", kind, params)


def test_rules_load_from_json(tmp_path):
    path = tmp_path / "rules.json"
    path.write_text(json.dumps([ValidationRule("r", "artifact_exists", {"artifact": "a"}).to_dict()]))
    assert load_rules(path)[0].kind == "artifact_exists"


def test_manifest_parsing_rejects_garbage(tmp_path):
    with pytest.raises(ParseError):
        ArtifactManifest.from_dict({"artifacts": [{"path": "x"}]})
    with pytest.raises(ParseError):
        ArtifactManifest.from_dict({"artifacts": [{"name": "a", "path": "x", "kind": "video"}]})
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(ParseError):
        ArtifactManifest.load(tmp_path / "manifest.json")


def test_large_grid_stats_match_two_pass_oracle(tmp_path):
    rng = np.random.default_rng(3)
    values = rng.uniform(-50, 50, (100, 100))
    values[rng.random((100, 100)) < 0.1] = -9999.0
    path = write_ascii_grid(tmp_path / "big.asc", values, fmt="%.17g")
    stats = read_ascii_grid(path).stats
    want = two_pass_stats(values.tolist(), -9999.0)
    assert (stats.min, stats.max) == (want["min"], want["max"])
    assert stats.mean == pytest.approx(want["mean"], rel=1e-12)
    assert stats.nodata_fraction == want["nodata_fraction"]
