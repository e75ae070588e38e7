from __future__ import annotations

import numpy as np
import pytest

from defa.correspondence import KeypointPair
from defa.errors import ValidationError
from defa.fileio import (
    read_error_records,
    read_landmarks,
    read_matches,
    read_points,
    write_ced,
    write_error_records,
    write_json,
    write_landmarks,
    write_matches,
    write_points,
)
from defa.metrics import ErrorRecord


def test_landmarks_roundtrip_exact(tmp_path, rng):
    pts = rng.uniform(0, 256, (2, 68))
    valid = rng.random(68) > 0.3
    bbox = (1.5, 2.25, 200.125, 190.0)
    path = tmp_path / "a.csv"
    write_landmarks(path, pts, valid, bbox)
    got, v, b = read_landmarks(path)
    assert np.array_equal(got, pts) and np.array_equal(v, valid) and b == bbox
    text = path.read_text().splitlines()
    assert text[0].startswith("# bbox ") and text[1] == "x,y,valid"


def test_landmarks_without_bbox_or_header(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("1,2,1\n3,4,0\n")
    pts, valid, bbox = read_landmarks(path)
    assert pts.tolist() == [[1.0, 3.0], [2.0, 4.0]] and valid.tolist() == [True, False] and bbox is None


@pytest.mark.parametrize(
    "body,where",
    [
        ("x,y,valid\n1,2\n", "a.csv:2"),
        ("x,y,valid\n1,2,1\nfoo,2,1\n", "a.csv:3"),
        ("x,y,valid\n1,nan,1\n", "a.csv:2"),
    ],
)
def test_bad_rows_name_the_line(tmp_path, body, where):
    path = tmp_path / "a.csv"
    path.write_text(body)
    with pytest.raises(ValidationError, match=where):
        read_landmarks(path)


def test_bad_bbox(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("# bbox 1 2 3\n1,2,1\n")
    with pytest.raises(ValidationError, match="bbox"):
        read_landmarks(path)


def test_points_and_matches_roundtrip(tmp_path, rng):
    pts = rng.normal(0, 100, (2, 40))
    write_points(tmp_path / "e.csv", pts)
    assert np.array_equal(read_points(tmp_path / "e.csv"), pts)
    pair = KeypointPair(rng.normal(0, 100, (2, 12)), rng.normal(0, 100, (2, 12)))
    write_matches(tmp_path / "m.csv", pair)
    back = read_matches(tmp_path / "m.csv")
    assert np.array_equal(back.points_i, pair.points_i) and np.array_equal(back.points_j, pair.points_j)


def test_empty_points_file(tmp_path):
    write_points(tmp_path / "e.csv", np.zeros((2, 0)))
    assert read_points(tmp_path / "e.csv").shape == (2, 0)


def test_error_records_roundtrip(tmp_path):
    recs = [ErrorRecord("a", 0.0125, "lp", 68), ErrorRecord("b", 0.1, "lp", 21)]
    write_error_records(tmp_path / "r.csv", recs)
    assert read_error_records(tmp_path / "r.csv") == recs


def test_error_records_missing_column(tmp_path):
    (tmp_path / "r.csv").write_text("image_id,value\na,1\n")
    with pytest.raises(ValidationError, match="nme"):
        read_error_records(tmp_path / "r.csv")


def test_ced_and_json(tmp_path):
    write_ced(tmp_path / "c.csv", [(0.0, 0.0), (0.1, 1.0)])
    assert (tmp_path / "c.csv").read_text() == "threshold,fraction\n0.0,0.0\n0.1,1.0\n"
    write_json(tmp_path / "x.json", {"b": 1, "a": [1.5]})
    assert (tmp_path / "x.json").read_text() == '{\n  "a": [\n    1.5\n  ],\n  "b": 1\n}\n'


def test_atomic_write_leaves_no_temp_files(tmp_path):
    write_points(tmp_path / "e.csv", np.ones((2, 3)))
    assert [p.name for p in tmp_path.iterdir()] == ["e.csv"]
