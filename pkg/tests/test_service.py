import pytest
from fastapi.testclient import TestClient

from conftest import TOPONET_CONFIG
from toponets.main import app, get_model
from toponets.semmap import crop_map, hide_places, map_to_document
from toponets.toponet import build_toponet

client = TestClient(app)


@pytest.fixture(scope="module", autouse=True)
def serve_trained_model(trained_toponet):
    """Serve the session's trained model instead of reading TOPONETS_MODEL_DIR"""
    app.dependency_overrides[get_model] = lambda: trained_toponet
    yield
    app.dependency_overrides.clear()


@pytest.fixture(scope="module")
def partial_map(small_maps):
    return hide_places(crop_map(small_maps[0], 4, seed=3), 0.25, seed=0)


def request_for(semantic_map, **params):
    return {"map": map_to_document(semantic_map).model_dump(mode="json"), "n_decompositions": 2, "seed": 0,
            **params}


def test_health():
    """Health endpoint answers without a model"""
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "ok"}


def test_classify(partial_map):
    """One normalized posterior per place"""
    response = client.post("/classify", json=request_for(partial_map))
    assert response.status_code == 200
    places = response.json()["places"]
    assert sorted(p["place_id"] for p in places) == sorted(partial_map.places)
    for place in places:
        assert len(place["posterior"]) == 6
        assert sum(place["posterior"]) == pytest.approx(1.0)
        assert 0 <= place["mpe_class"] < 6


def test_placeholders(partial_map):
    """Predictions cover exactly the placeholders"""
    response = client.post("/placeholders", json=request_for(partial_map))
    assert response.status_code == 200
    assert sorted(p["place_id"] for p in response.json()["places"]) == sorted(partial_map.placeholders)


def test_novelty_decision(partial_map):
    """The decision appears only when a threshold is sent"""
    response = client.post("/novelty", json=request_for(partial_map))
    assert response.status_code == 200
    novelty = response.json()["novelty"]
    assert novelty["decision"] is None
    assert novelty["per_place_ll"] == pytest.approx(novelty["total_ll"] / partial_map.num_places)

    response = client.post("/novelty", json=request_for(partial_map, threshold=0.0))
    assert response.json()["novelty"]["decision"] == "novel"
    response = client.post("/novelty", json=request_for(partial_map, threshold=-1e9))
    assert response.json()["novelty"]["decision"] == "known"


def test_bad_maps_are_rejected(partial_map):
    """Grid references, dangling edges and bad parameters are client errors"""
    body = request_for(partial_map)
    node = next(n for n in body["map"]["nodes"] if n["kind"] == "place")
    node["grid"], node["grid_ref"] = None, "grids/0.grd"
    response = client.post("/classify", json=body)
    assert response.status_code == 400
    assert "inline" in response.json()["detail"]

    body = request_for(partial_map)
    body["map"]["edges"].append([partial_map.node_ids[0], 999])
    assert client.post("/classify", json=body).status_code == 400

    assert client.post("/classify", json=request_for(partial_map, n_decompositions=0)).status_code == 422


def test_model_conflicts(partial_map, trained_place_model, catalogue):
    """Class-set mismatches and untrained models are conflicts"""
    body = request_for(partial_map)
    body["map"]["class_set"] = "10-class"
    response = client.post("/classify", json=body)
    assert response.status_code == 409
    assert "10-class" in response.json()["detail"]

    untrained = build_toponet(trained_place_model, catalogue.names, cfg=TOPONET_CONFIG)
    serve = app.dependency_overrides[get_model]
    app.dependency_overrides[get_model] = lambda: untrained
    try:
        response = client.post("/classify", json=request_for(partial_map))
    finally:
        app.dependency_overrides[get_model] = serve
    assert response.status_code == 409
    assert "not been trained" in response.json()["detail"]


def test_missing_model_directory(tmp_path, monkeypatch):
    """Without an override the model comes from TOPONETS_MODEL_DIR"""
    monkeypatch.setenv("TOPONETS_MODEL_DIR", str(tmp_path / "absent"))
    saved = dict(app.dependency_overrides)
    app.dependency_overrides.clear()
    get_model.cache_clear()
    try:
        response = client.post("/novelty", json={"map": {"class_set": "6-class", "nodes": []}})
    finally:
        app.dependency_overrides.update(saved)
        get_model.cache_clear()
    assert response.status_code == 409
    assert "No usable model" in response.json()["detail"]
