import numpy as np
import pytest
from fastapi.testclient import TestClient

import sketchsift.selector as sel
from sketchsift.embedder import EmbedNet, EmbedNetConfig
from sketchsift.ranking import GalleryFeatures, rank
from sketchsift.server import ServiceRuntime, create_app
from sketchsift.sketch import apply_mask, rasterize, StrokeMask
from sketchsift.synth import PairSpec, generate_pair


@pytest.fixture(scope="module")
def world():
    net = EmbedNet(EmbedNetConfig(input_hw=16, channels=(2, 3), embed_dim=8, seed=1))
    policy = sel.SelectorNet(sel.SelectorConfig(hidden=12, seed=1))
    photos, sketches, ids = [], [], []
    for i in range(6):
        spec = PairSpec(
            shape_family=("polygon", "ellipse", "blob")[i % 3],
            seed=600 + i,
            photo_hw=16,
            n_clean_strokes=4,
        )
        photo, labeled = generate_pair(spec)
        photos.append(photo.pixels)
        sketches.append(labeled.sketch)
        ids.append(labeled.pair_id)
    photos = np.stack(photos)
    gallery = GalleryFeatures(net.embed(photos), ids)
    runtime = ServiceRuntime(
        net=net,
        policy=policy,
        gallery=gallery,
        photos=photos,
        canvas_h=256,
        canvas_w=256,
        tau=0.2,
    )
    client = TestClient(create_app(runtime))
    return client, runtime, sketches, ids


def make_session(client, pair_id=None):
    body = {"pair_id": pair_id} if pair_id else {}
    resp = client.post("/session", json=body) if body else client.post("/session")
    assert resp.status_code == 200
    return resp.json()


def test_create_session_and_single_stroke(world):
    client, runtime, _, _ = world
    data = make_session(client)
    assert data["schema_version"] == "1"
    resp = client.post(
        f"/session/{data['id']}/stroke", json={"points": [[10, 10], [50, 40]]}
    )
    assert resp.status_code == 200
    body = resp.json()
    assert body["k"] == 1
    assert np.isfinite(body["critic_score"])


def test_retrieve_before_any_stroke_409(world):
    client, _, _, _ = world
    data = make_session(client)
    assert client.post(f"/session/{data['id']}/retrieve").status_code == 409
    assert client.post(f"/session/{data['id']}/select").status_code == 409
    assert client.get(f"/session/{data['id']}/score").status_code == 409


def test_unknown_session_404(world):
    client, _, _, _ = world
    assert client.get("/session/nope/score").status_code == 404
    assert client.post("/session/nope/stroke", json={"points": [[1, 1], [2, 2]]}).status_code == 404
    assert client.delete("/session/nope").status_code == 404


def test_malformed_stroke_400(world):
    client, _, _, _ = world
    data = make_session(client)
    sid = data["id"]
    assert client.post(f"/session/{sid}/stroke", json={"points": [[1, 1]]}).status_code == 400
    assert client.post(f"/session/{sid}/stroke", json={"points": "zzz"}).status_code == 400
    assert client.post(f"/session/{sid}/stroke", json={}).status_code == 400
    assert (
        client.post(f"/session/{sid}/stroke", json={"points": [[1, 1], [9999, 1]]}).status_code
        == 400
    )


def test_score_select_retrieve_flow(world):
    client, runtime, sketches, ids = world
    sketch, pair_id = sketches[0], ids[0]
    data = make_session(client, pair_id=pair_id)
    sid = data["id"]
    for stroke in sketch.strokes:
        pts = [[p.x, p.y] for p in stroke.points]
        resp = client.post(f"/session/{sid}/stroke", json={"points": pts})
        assert resp.status_code == 200
    score = client.get(f"/session/{sid}/score").json()
    assert score["threshold"] == 0.2
    assert score["feed_recommended"] == (score["critic_score"] >= 0.2)

    select = client.post(f"/session/{sid}/select").json()
    assert len(select["mask"]) == sketch.stroke_count
    assert select["k_selected"] == sum(1 for m in select["mask"] if m == "select")

    retrieve = client.post(
        f"/session/{sid}/retrieve", json={"top_k": runtime.gallery.size}
    ).json()
    assert len(retrieve["results"]) == runtime.gallery.size
    distances = [r["distance"] for r in retrieve["results"]]
    assert distances == sorted(distances)
    paired_hits = [r for r in retrieve["results"] if r["is_paired"]]
    assert len(paired_hits) == 1
    assert paired_hits[0]["photo_id"] == pair_id


def test_retrieve_agrees_with_ranking_module(world):
    client, runtime, sketches, ids = world
    sketch, pair_id = sketches[1], ids[1]
    data = make_session(client, pair_id=pair_id)
    sid = data["id"]
    for stroke in sketch.strokes:
        client.post(
            f"/session/{sid}/stroke",
            json={"points": [[p.x, p.y] for p in stroke.points]},
        )
    retrieve = client.post(
        f"/session/{sid}/retrieve", json={"top_k": runtime.gallery.size}
    ).json()
    # cross-check: the paired photo's position equals rank() on the same subset
    mask = StrokeMask(tuple(m == "select" for m in retrieve["mask"]))
    subset = apply_mask(sketch, mask)
    hw = runtime.net.config.input_hw
    emb = runtime.net.embed(rasterize(subset, hw, hw, 1).pixels[None])[0]
    expected = rank(emb, runtime.gallery, pair_id).rank
    position = 1 + [r["photo_id"] for r in retrieve["results"]].index(pair_id)
    assert position == expected


def test_sessions_with_same_strokes_identical_outputs(world):
    client, _, sketches, _ = world
    sketch = sketches[2]
    outputs = []
    for _ in range(2):
        data = make_session(client)
        sid = data["id"]
        for stroke in sketch.strokes:
            client.post(
                f"/session/{sid}/stroke",
                json={"points": [[p.x, p.y] for p in stroke.points]},
            )
        score = client.get(f"/session/{sid}/score").json()["critic_score"]
        results = client.post(f"/session/{sid}/retrieve").json()["results"]
        outputs.append((score, tuple(r["photo_id"] for r in results)))
    assert outputs[0] == outputs[1]


def test_score_is_pure_no_mutation(world):
    client, _, _, _ = world
    data = make_session(client)
    sid = data["id"]
    client.post(f"/session/{sid}/stroke", json={"points": [[5, 5], [60, 60], [90, 30]]})
    s1 = client.get(f"/session/{sid}/score").json()["critic_score"]
    s2 = client.get(f"/session/{sid}/score").json()["critic_score"]
    assert s1 == s2


def test_delete_session(world):
    client, _, _, _ = world
    data = make_session(client)
    sid = data["id"]
    assert client.delete(f"/session/{sid}").json()["deleted"] is True
    assert client.get(f"/session/{sid}/score").status_code == 404


def test_session_expiry(world):
    client, runtime, _, _ = world
    data = make_session(client)
    sid = data["id"]
    old_timeout = runtime.session_timeout_s
    runtime.session_timeout_s = -1.0  # everything is instantly stale
    try:
        assert client.get(f"/session/{sid}/score").status_code == 404
    finally:
        runtime.session_timeout_s = old_timeout


def test_unknown_demo_pair_400(world):
    client, _, _, _ = world
    resp = client.post("/session", json={"pair_id": "not-a-photo"})
    assert resp.status_code == 400


def test_meta_gallery_photo_endpoints(world):
    client, runtime, _, ids = world
    meta = client.get("/meta").json()
    assert meta["gallery_size"] == runtime.gallery.size
    assert meta["canvas_h"] == 256
    listing = client.get("/gallery").json()
    assert listing["ids"] == list(ids)
    photo = client.get(f"/photo/{ids[0]}").json()
    assert photo["h"] == photo["w"] == 16
    assert len(photo["pixels"]) == 16
    assert max(max(row) for row in photo["pixels"]) <= 255
    assert client.get("/photo/zzz").status_code == 404
