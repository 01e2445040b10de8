import pytest
from fastapi.testclient import TestClient

from impress import __version__, toy
from impress.gateway import AuthError, MockChatBackend
from impress.pipeline import Pipeline
from impress.service import create_app

from conftest import CHAT, EMBED, make_gateway, toy_gateway

FINGERPRINT = "0123456789abcdef"


def body_for(case=0):
    conv, gold = toy.conversations()[case]
    return conv.to_json() | {"gold_spcs": list(gold)}


@pytest.fixture
def client(toy_pipeline):
    return TestClient(create_app(toy_pipeline, FINGERPRINT))


def test_health(client, toy_pipeline):
    resp = client.get("/v1/health")
    assert resp.status_code == 200
    assert resp.json() == {
        "status": "ok",
        "version": __version__,
        "fingerprint": FINGERPRINT,
        "pipeline_fingerprint": toy_pipeline.fingerprint(),
    }


@pytest.mark.parametrize("case", range(5))
def test_recommend_matches_library(client, toy_pipeline, case):
    resp = client.post("/v1/recommend", json=body_for(case))
    assert resp.status_code == 200
    data = resp.json()
    conv, gold = toy.conversations()[case]
    lib = toy_pipeline.recommend(conv).ranking
    assert [r["spc_id"] for r in data["ranked"]] == lib.ids
    assert [r["score"] for r in data["ranked"]] == [s for _, s in lib.ordered_spcs]
    assert data["ranked"][0]["spc_id"] == gold[0]
    assert data["ranked"][0]["display_name"] == toy_pipeline.store.display_name(gold[0])
    assert data["overhead"]["tokens"]["total"] > 0
    assert data["diagnosis"]["diagnosis"].startswith("Case ")


def test_trace_id_is_deterministic(client):
    a = client.post("/v1/recommend", json=body_for()).json()
    b = client.post("/v1/recommend", json=body_for()).json()
    assert a == b


def test_malformed_body(client):
    resp = client.post("/v1/recommend", content=b"{not json", headers={"content-type": "application/json"})
    assert resp.status_code == 400
    assert client.post("/v1/recommend", json=[1, 2]).status_code == 400


def test_missing_utterances(client):
    body = body_for()
    del body["utterances"]
    resp = client.post("/v1/recommend", json=body)
    assert resp.status_code == 422
    assert any(f["field"] == "utterances" for f in resp.json()["fields"])


def test_invalid_utterance(client):
    body = body_for()
    body["utterances"][1]["role"] = "robot"
    resp = client.post("/v1/recommend", json=body)
    assert resp.status_code == 422
    assert resp.json()["fields"][0]["field"] == "utterances.1.role"
    assert client.post("/v1/recommend", json=body_for() | {"utterances": []}).status_code == 422


def failing(_messages):
    raise AuthError("HTTP 401 from mock")


def test_backend_failure_is_502(toy_store):
    gw = make_gateway(MockChatBackend({"*": failing}))
    app = create_app(Pipeline.from_store(toy_store, gw, CHAT, EMBED), FINGERPRINT)
    resp = TestClient(app).post("/v1/recommend", json=body_for())
    assert resp.status_code == 502
    assert resp.json()["step"] == "step1-diagnosis"


def test_timeout_is_504(toy_store):
    gw = toy_gateway()
    gw.chat_backend.delay_s = 0.3
    app = create_app(Pipeline.from_store(toy_store, gw, CHAT, EMBED), FINGERPRINT, request_timeout_s=0.1)
    resp = TestClient(app).post("/v1/recommend", json=body_for())
    assert resp.status_code == 504
