import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from pointclick import io as pio
from pointclick.service import ModelRegistry, create_app
from pointclick.synthdata import SceneSpec, generate_scene


@pytest.fixture(scope="module")
def scene_doc():
    cloud, inst, cls = generate_scene(
        SceneSpec(n_instances_min=2, n_instances_max=3,
                  points_per_instance_min=25, points_per_instance_max=35,
                  floor_points=20, seed=21)
    )
    return pio.scene_to_dict(cloud, inst, cls)


@pytest.fixture(scope="module")
def client(tiny_model, scene_doc):
    registry = ModelRegistry(model_dir="/nonexistent")
    registry.add("tiny", tiny_model)
    app = create_app(registry)
    with TestClient(app) as c:
        yield c


def _mk_session(client, scene_doc):
    r = client.post("/sessions", json={"scene": scene_doc, "model": "tiny"})
    assert r.status_code == 201
    return r.json()["session_id"]


def _click(scene_doc, i, group):
    x, y, z = scene_doc["points"][i]
    return {"x": x, "y": y, "z": z, "group": group}


def test_models_listed(client):
    assert "tiny" in client.get("/models").json()["models"]


def test_create_session_valid(client, scene_doc):
    r = client.post("/sessions", json={"scene": scene_doc, "model": "tiny"})
    assert r.status_code == 201
    body = r.json()
    assert body["revision"] == 0
    assert body["n_points"] == len(scene_doc["points"])


def test_create_session_unknown_model(client, scene_doc):
    r = client.post("/sessions", json={"scene": scene_doc, "model": "nope"})
    assert r.status_code == 404


def test_create_session_malformed_scene(client):
    r = client.post("/sessions", json={"scene": {"points": [[1, 2]]}, "model": "tiny"})
    assert r.status_code == 422


def test_two_sessions_distinct_ids(client, scene_doc):
    assert _mk_session(client, scene_doc) != _mk_session(client, scene_doc)


def test_click_mutation_cycle(client, scene_doc):
    sid = _mk_session(client, scene_doc)
    r = client.post(f"/sessions/{sid}/clicks", json={"add": [_click(scene_doc, 0, 0)]})
    body = r.json()
    assert body["revision"] == 1
    assert body["result"] is not None
    groups = {g["group"] for g in body["result"]["groups"]}
    assert groups == {0}

    # add then remove the same click: state equals the pre-add state
    before = client.get(f"/sessions/{sid}/result").json()["result"]
    r = client.post(f"/sessions/{sid}/clicks", json={"add": [_click(scene_doc, 5, 1)]})
    assert r.json()["revision"] == 2
    r = client.post(f"/sessions/{sid}/clicks", json={"remove": [1]})
    after = r.json()
    assert after["revision"] == 3
    assert after["result"] == before


def test_multi_click_group_unions(client, scene_doc, tiny_model):
    sid = _mk_session(client, scene_doc)
    adds = [_click(scene_doc, i, 0) for i in (0, 1, 2)]
    body = client.post(f"/sessions/{sid}/clicks", json={"add": adds}).json()
    pi = np.asarray(body["result"]["point_instance"])
    # compare against a direct pipeline call with the same группировка
    from pointclick.pipeline import segment
    from pointclick.sampling import ClickSet

    cloud, _, _ = pio.scene_from_dict(scene_doc)
    clicks = ClickSet(
        clicks=np.array([[c["x"], c["y"], c["z"]] for c in adds]),
        instance_group=[0, 0, 0],
    )
    expect = segment(cloud, clicks, tiny_model)
    assert np.array_equal(pi, expect.point_instance)
    assert set(np.unique(pi)) <= {-1, 0}


def test_remove_all_clicks_clears_result(client, scene_doc):
    sid = _mk_session(client, scene_doc)
    client.post(f"/sessions/{sid}/clicks", json={"add": [_click(scene_doc, 3, 0)]})
    body = client.post(f"/sessions/{sid}/clicks", json={"remove": [0]}).json()
    assert body["result"] is None
    assert body["revision"] == 2


def test_unknown_session_and_bad_requests(client, scene_doc):
    assert client.get("/sessions/zzz/result").status_code == 404
    assert client.post("/sessions/zzz/clicks", json={"add": []}).status_code == 404
    sid = _mk_session(client, scene_doc)
    r = client.post(f"/sessions/{sid}/clicks", json={"add": [{"x": 1}]})
    assert r.status_code == 422
    r = client.post(f"/sessions/{sid}/clicks", json={"remove": [5]})
    assert r.status_code == 422


def test_scene_endpoint_roundtrip(client, scene_doc):
    sid = _mk_session(client, scene_doc)
    got = client.get(f"/sessions/{sid}/scene").json()
    assert got["points"] == scene_doc["points"]


def test_replay_log_reproduces_final_result(client, scene_doc):
    sid = _mk_session(client, scene_doc)
    mutations = [
        {"add": [_click(scene_doc, 0, 0)]},
        {"add": [_click(scene_doc, 7, 1), _click(scene_doc, 8, 1)]},
        {"remove": [0]},
        {"add": [_click(scene_doc, 2, 2)]},
        {"add": [_click(scene_doc, 12, 1)]},
    ]
    for m in mutations:
        client.post(f"/sessions/{sid}/clicks", json=m)
    final = client.get(f"/sessions/{sid}/result").json()
    log = client.get(f"/sessions/{sid}/log").json()["log"]
    assert log == mutations

    sid2 = _mk_session(client, scene_doc)
    for m in log:
        client.post(f"/sessions/{sid2}/clicks", json=m)
    replayed = client.get(f"/sessions/{sid2}/result").json()
    assert replayed["result"] == final["result"]
    assert replayed["clicks"] == final["clicks"]


def test_sse_stream_emits_revisions(client, scene_doc):
    sid = _mk_session(client, scene_doc)
    with client.stream("GET", f"/sessions/{sid}/events") as stream:
        it = stream.iter_lines()
        first = next(line for line in it if line.startswith("data:"))
        assert json.loads(first[5:])["revision"] == 0
