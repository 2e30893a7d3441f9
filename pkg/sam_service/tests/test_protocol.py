"""Wire-protocol conformance of the stub service."""

import base64
import io

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from sam_service import create_app


def png_b64(arr: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_mask(b64: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(b64))) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8) >= 128


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app(stub=True))


@pytest.fixture(scope="module")
def scene():
    rng = np.random.default_rng(0)
    img = rng.integers(50, 100, size=(24, 32, 3), dtype=np.uint8)
    img[6:15, 8:20] = (210, 30, 30)  # uniform patch
    return img


class TestHealth:
    def test_health_ok(self, client):
        resp = client.get("/health")
        assert resp.status_code == 200
        assert resp.text == "ok"


class TestRefine:
    def test_box_fill_contract(self, client, scene):
        resp = client.post(
            "/refine",
            json={"image_png_b64": png_b64(scene), "box": [8, 6, 19, 14], "points": []},
        )
        assert resp.status_code == 200
        mask = decode_mask(resp.json()["mask_png_b64"])
        expect = np.zeros((24, 32), dtype=bool)
        expect[6:15, 8:20] = True
        np.testing.assert_array_equal(mask, expect)

    def test_dims_preserved(self, client):
        rng = np.random.default_rng(1)
        for h, w in ((8, 8), (17, 33), (64, 48)):
            img = rng.integers(0, 255, size=(h, w, 3), dtype=np.uint8)
            resp = client.post(
                "/refine",
                json={"image_png_b64": png_b64(img), "box": [0, 0, w - 1, h - 1], "points": []},
            )
            assert resp.status_code == 200
            assert decode_mask(resp.json()["mask_png_b64"]).shape == (h, w)

    def test_point_only_floods_color_region(self, client, scene):
        resp = client.post(
            "/refine",
            json={"image_png_b64": png_b64(scene), "box": None,
                  "points": [{"x": 10, "y": 8, "label": 1}]},
        )
        assert resp.status_code == 200
        mask = decode_mask(resp.json()["mask_png_b64"])
        expect = np.zeros((24, 32), dtype=bool)
        expect[6:15, 8:20] = True
        np.testing.assert_array_equal(mask, expect)

    def test_no_prompts_empty_mask(self, client, scene):
        resp = client.post("/refine", json={"image_png_b64": png_b64(scene), "box": None, "points": []})
        assert resp.status_code == 200
        assert decode_mask(resp.json()["mask_png_b64"]).sum() == 0

    def test_stateless_identical_responses(self, client, scene):
        body = {"image_png_b64": png_b64(scene), "box": [8, 6, 19, 14],
                "points": [{"x": 10, "y": 8, "label": 1}, {"x": 0, "y": 0, "label": 0}]}
        r1 = client.post("/refine", json=body)
        r2 = client.post("/refine", json=body)
        assert r1.json() == r2.json()


class TestErrors:
    def test_out_of_bounds_point_422(self, client, scene):
        resp = client.post(
            "/refine",
            json={"image_png_b64": png_b64(scene), "box": None,
                  "points": [{"x": 99, "y": 3, "label": 1}]},
        )
        assert resp.status_code == 422

    def test_out_of_bounds_box_422(self, client, scene):
        resp = client.post(
            "/refine", json={"image_png_b64": png_b64(scene), "box": [0, 0, 32, 10], "points": []}
        )
        assert resp.status_code == 422

    def test_bad_base64_400(self, client):
        resp = client.post("/refine", json={"image_png_b64": "@@not-base64@@", "box": None, "points": []})
        assert resp.status_code == 400

    def test_not_a_png_400(self, client):
        b64 = base64.b64encode(b"plain text, no image").decode()
        resp = client.post("/refine", json={"image_png_b64": b64, "box": None, "points": []})
        assert resp.status_code == 400

    def test_missing_field_400(self, client):
        resp = client.post("/refine", json={"box": None, "points": []})
        assert resp.status_code == 400

    def test_bad_label_400(self, client, scene):
        resp = client.post(
            "/refine",
            json={"image_png_b64": png_b64(scene), "box": None,
                  "points": [{"x": 1, "y": 1, "label": 5}]},
        )
        assert resp.status_code == 400

    def test_unloaded_without_stub_503(self, scene):
        client = TestClient(create_app(stub=False))
        resp = client.post("/refine", json={"image_png_b64": png_b64(scene), "box": None, "points": []})
        assert resp.status_code == 503
        assert client.get("/health").status_code == 200
