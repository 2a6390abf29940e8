import json

import pytest

from qfrerand.errors import InputError
from qfrerand.reports import canonical_json, read_column_csv, rows_to_csv, write_json


def test_empty_payload_is_valid_json_skeleton(tmp_path):
    path = tmp_path / "empty.json"
    write_json({}, str(path))
    assert json.loads(path.read_text()) == {}


def test_json_round_trip_preserves_floats(tmp_path):
    payload = {"a": 0.1 + 0.2, "b": 1e-17, "c": [3.0, 2.0 / 3.0], "n": 7}
    path = tmp_path / "r.json"
    write_json(payload, str(path))
    again = json.loads(path.read_text())
    assert again == payload            # exact, shortest-round-trip floats
    assert canonical_json(again) == canonical_json(payload)


def test_key_order_is_stable():
    payload = {"z": 1, "a": 2, "m": 3}
    assert list(json.loads(canonical_json(payload)).keys()) == ["z", "a", "m"]


def test_rows_to_csv_float_fidelity():
    rows = [{"x": 0.1 + 0.2, "label": "u1"}]
    text = rows_to_csv(rows, ["label", "x"])
    value = text.splitlines()[1].split(",")[1]
    assert float(value) == 0.1 + 0.2


def test_read_column_csv():
    ids, values = read_column_csv("unit_id,y\nu1,1.5\nu2,-2.0\n", "outcomes")
    assert ids == ("u1", "u2")
    assert values == [1.5, -2.0]
    with pytest.raises(InputError):
        read_column_csv("unit_id,y\n", "outcomes")
    with pytest.raises(InputError):
        read_column_csv("unit_id,y\nu1,apple\n", "outcomes")
