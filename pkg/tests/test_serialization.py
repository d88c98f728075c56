import json

import numpy as np
import pytest

from conftest import random_spn
from test_spn import naive_bayes
from toponets.errors import SpnFormatError
from toponets.inference import evaluate
from toponets.serialization import (deserialize, dumps_binary, dumps_json, load_spn, loads_binary, loads_json,
                                    save_spn, serialize)
from toponets.spn import Evidence


@pytest.mark.parametrize("fmt", ["json", "binary"])
def test_round_trip_is_exact(fmt):
    """Both containers restore identical tables and weights"""
    spn = random_spn(5)
    restored = deserialize(serialize(spn, fmt))
    assert restored == spn
    assert restored.weights.tobytes() == spn.weights.tobytes()
    evidence = Evidence.observe({0: 2}, spn.variables).merged(Evidence.marginal(spn.variables[1:]))
    assert evaluate(restored, evidence) == evaluate(spn, evidence)


def test_binary_is_deterministic():
    """Serializing twice gives the same bytes"""
    spn = random_spn(2)
    assert dumps_binary(spn) == dumps_binary(random_spn(2))


def test_files_pick_container_by_suffix(tmp_path):
    """``.json`` paths get the JSON document, anything else the binary container"""
    spn = naive_bayes()
    json_path = save_spn(spn, tmp_path / "model.json")
    binary_path = save_spn(spn, tmp_path / "model.spn")
    assert json.loads(json_path.read_text())["format"] == "toponets-spn"
    assert binary_path.read_bytes().startswith(b"TPNSPN")
    assert load_spn(json_path) == load_spn(binary_path) == spn


def test_json_errors_carry_node_index():
    """Malformed nodes are reported with their index"""
    doc = json.loads(dumps_json(naive_bayes()))
    doc["nodes"][6]["children"] = [7, 9]
    with pytest.raises(SpnFormatError) as err:
        loads_json(json.dumps(doc))
    assert err.value.node_index == 6

    doc = json.loads(dumps_json(naive_bayes()))
    doc["version"] = 99
    with pytest.raises(SpnFormatError, match="version"):
        loads_json(json.dumps(doc))


def test_binary_errors():
    """Bad magic, truncation and trailing bytes are format errors"""
    payload = dumps_binary(naive_bayes())
    with pytest.raises(SpnFormatError, match="not a binary"):
        loads_binary(b"XXXXXX" + payload[6:])
    with pytest.raises(SpnFormatError, match="truncated"):
        loads_binary(payload[:-3])
    with pytest.raises(SpnFormatError, match="trailing"):
        loads_binary(payload + b"\x00")


def test_binary_rejects_unordered_children():
    """A child id at or after its parent points at the offending node"""
    spn = naive_bayes()
    payload = bytearray(dumps_binary(spn))
    children = np.array(spn.children, dtype="<i8")
    offset = payload.index(children.tobytes())
    bad = children.copy()
    bad[-1] = spn.root
    payload[offset:offset + bad.nbytes] = bad.tobytes()
    with pytest.raises(SpnFormatError) as err:
        loads_binary(bytes(payload))
    assert err.value.node_index == spn.root
