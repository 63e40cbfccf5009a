import io
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image as PILImage

from scribmat.service import create_app
from scribmat.session import oracle_scribbles
from scribmat.labelstate import strokes_to_wire
from scribmat.synthetic import make_case, suite_superpixel_target


@pytest.fixture(scope="module")
def case():
    return make_case("disk", seed=3)


@pytest.fixture()
def client():
    return TestClient(create_app())


def png_bytes(array):
    buf = io.BytesIO()
    if array.ndim == 2:
        PILImage.fromarray(array, mode="L").save(buf, format="PNG")
    else:
        PILImage.fromarray((array * 255).round().astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def create(client, case, **cfg):
    config = {"seed": 1, "superpixel_target": suite_superpixel_target(128), **cfg}
    resp = client.post(
        "/sessions",
        files={"image": ("image.png", png_bytes(case.image), "image/png")},
        data={"config": json.dumps(config)},
    )
    assert resp.status_code == 201, resp.text
    return resp.json()


class TestProtocolWalk:
    def test_create_submit_finalize_chain(self, client, case):
        res = create(client, case)
        sid = res["id"]
        assert res["status"] == "awaiting_scribbles"
        assert res["suggested_region"] is not None
        assert res["iteration"] == 0

        # Drive six rounds with oracle strokes computed against the session
        # geometry fetched over the API (region rectangle only guides the
        # oracle; strokes are legal anywhere).
        for round_idx in range(6):
            state = client.get(f"/sessions/{sid}").json()
            region = state["suggested_region"]
            strokes = self._oracle_strokes(client, sid, case, region, round_idx)
            resp = client.post(f"/sessions/{sid}/scribbles", json={"strokes": strokes})
            assert resp.status_code == 200, resp.text
        state = client.get(f"/sessions/{sid}").json()
        assert state["ready_to_finalize"]

        resp = client.post(f"/sessions/{sid}/finalize", json={})
        assert resp.status_code == 200
        urls = resp.json()["urls"]

        trimap = client.get(urls["trimap"])
        assert trimap.status_code == 200
        tri = np.asarray(PILImage.open(io.BytesIO(trimap.content)))
        assert set(np.unique(tri)) <= {0, 128, 255}

        alpha = client.get(urls["alpha"])
        assert alpha.status_code == 200
        a = np.asarray(PILImage.open(io.BytesIO(alpha.content)))
        assert a.min() >= 0 and a.max() <= 255

        overlay = client.get(urls["overlay"])
        assert overlay.status_code == 200

    def _oracle_strokes(self, client, sid, case, region, round_idx):
        # Rebuild the same session geometry locally to let the oracle pick
        # pure superpixels; the service only sees the wire-format strokes.
        from scribmat.session import SessionConfig, create_session

        cfg = SessionConfig(seed=1, superpixel_target=suite_superpixel_target(128))
        if not hasattr(self, "_local"):
            self._local = create_session(case.image, cfg)
            self._region_ids = {}
        grid = self._local.grid
        target = None
        for rid, rect in enumerate(grid.rects):
            if [int(v) for v in (rect[0], rect[1], rect[2], rect[3])] == [
                region["x0"], region["y0"], region["x1"], region["y1"],
            ]:
                target = rid
                break
        assert target is not None
        strokes = oracle_scribbles(
            grid, target, case.trimap, self._local.sp, seed=1009 + round_idx, iteration=round_idx
        )
        return strokes_to_wire(strokes)


class TestErrors:
    def test_unknown_session_404(self, client):
        assert client.get("/sessions/deadbeef").status_code == 404
        assert client.delete("/sessions/deadbeef").status_code == 404

    def test_finalized_session_rejects_scribbles_409(self, client, case):
        res = create(client, case, rounds=1)
        sid = res["id"]
        strokes = [
            {"class": "F", "radius": 3, "points": [[64, 64]]},
            {"class": "B", "radius": 3, "points": [[3, 3]]},
        ]
        client.post(f"/sessions/{sid}/scribbles", json={"strokes": strokes})
        done = client.post(f"/sessions/{sid}/finalize", json={})
        assert done.status_code == 200
        resp = client.post(f"/sessions/{sid}/scribbles", json={"strokes": []})
        assert resp.status_code == 409

    def test_unlabelable_session_finalize_422(self, client, case):
        res = create(client, case, rounds=1)
        sid = res["id"]
        client.post(f"/sessions/{sid}/scribbles", json={"strokes": []})
        resp = client.post(f"/sessions/{sid}/finalize", json={})
        assert resp.status_code == 422
        assert "finalize failed" in resp.text

    def test_premature_finalize_409(self, client, case):
        res = create(client, case)
        resp = client.post(f"/sessions/{res['id']}/finalize", json={})
        assert resp.status_code == 409

    def test_conflicting_strokes_422_names_superpixel(self, client, case):
        res = create(client, case)
        strokes = [
            {"class": "F", "radius": 3, "points": [[40, 40]]},
            {"class": "B", "radius": 3, "points": [[41, 41]]},
        ]
        resp = client.post(f"/sessions/{res['id']}/scribbles", json={"strokes": strokes})
        assert resp.status_code == 422
        assert "superpixel" in json.dumps(resp.json())

    def test_malformed_strokes_422(self, client, case):
        res = create(client, case)
        resp = client.post(
            f"/sessions/{res['id']}/scribbles",
            json={"strokes": [{"class": "Z", "radius": 3, "points": [[1, 1]]}]},
        )
        assert resp.status_code == 422

    def test_oversize_image_413(self, client):
        big = np.zeros((1, 5000, 3))
        resp = client.post(
            "/sessions",
            files={"image": ("big.png", png_bytes(big), "image/png")},
            data={"config": "{}"},
        )
        assert resp.status_code == 413

    def test_bad_config_422(self, client, case):
        resp = client.post(
            "/sessions",
            files={"image": ("image.png", png_bytes(case.image), "image/png")},
            data={"config": json.dumps({"rounds": 999})},
        )
        assert resp.status_code == 422

    def test_undecodable_image_422(self, client):
        resp = client.post(
            "/sessions",
            files={"image": ("junk.png", b"not a png", "image/png")},
            data={"config": "{}"},
        )
        assert resp.status_code == 422


class TestIdempotency:
    def test_scribble_retry_returns_same_response(self, client, case):
        res = create(client, case)
        sid = res["id"]
        headers = {"Idempotency-Key": "abc-1"}
        body = {"strokes": [{"class": "F", "radius": 3, "points": [[40, 40]]}]}
        first = client.post(f"/sessions/{sid}/scribbles", json=body, headers=headers)
        second = client.post(f"/sessions/{sid}/scribbles", json=body, headers=headers)
        assert first.status_code == second.status_code == 200
        assert first.json() == second.json()
        # The retry did not advance the iteration twice.
        assert client.get(f"/sessions/{sid}").json()["iteration"] == 1

    def test_finalize_retry_cached(self, client, case):
        res = create(client, case, rounds=1)
        sid = res["id"]
        strokes = [
            {"class": "F", "radius": 3, "points": [[64, 64]]},
            {"class": "B", "radius": 3, "points": [[3, 3]]},
        ]
        client.post(f"/sessions/{sid}/scribbles", json={"strokes": strokes})
        headers = {"Idempotency-Key": "fin-1"}
        first = client.post(f"/sessions/{sid}/finalize", json={}, headers=headers)
        second = client.post(f"/sessions/{sid}/finalize", json={}, headers=headers)
        assert first.status_code == second.status_code == 200
        assert first.json() == second.json()


class TestLifecycle:
    def test_delete_then_404(self, client, case):
        res = create(client, case, rounds=1)
        sid = res["id"]
        assert client.delete(f"/sessions/{sid}").status_code == 204
        assert client.get(f"/sessions/{sid}").status_code == 404

    def test_overlay_shows_stroke_colors(self, client, case):
        res = create(client, case)
        sid = res["id"]
        client.post(
            f"/sessions/{sid}/scribbles",
            json={"strokes": [{"class": "F", "radius": 3, "points": [[30, 30], [50, 50]]}]},
        )
        overlay = client.get(f"/sessions/{sid}/overlay.png")
        img = np.asarray(PILImage.open(io.BytesIO(overlay.content)).convert("RGB"))
        assert (img == (255, 0, 0)).all(axis=-1).any()  # red foreground stroke

    def test_results_before_finalize_409(self, client, case):
        res = create(client, case)
        assert client.get(f"/sessions/{res['id']}/trimap.png").status_code == 409
        assert client.get(f"/sessions/{res['id']}/alpha.png").status_code == 409
