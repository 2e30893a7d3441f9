"""Live-socket integration: uvicorn server thread + real HTTP clients."""

import base64
import io
import socket
import threading
import time

import numpy as np
import pytest
import requests
import uvicorn
from PIL import Image

from sam_service import create_app


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture(scope="module")
def live_server():
    port = free_port()
    config = uvicorn.Config(create_app(stub=True), host="127.0.0.1", port=port, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    url = f"http://127.0.0.1:{port}"
    for _ in range(100):
        try:
            if requests.get(url + "/health", timeout=1).status_code == 200:
                break
        except requests.RequestException:
            time.sleep(0.05)
    else:
        raise RuntimeError("server did not come up")
    yield url
    server.should_exit = True
    thread.join(timeout=5)


def png_b64(arr: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def test_health_over_socket(live_server):
    resp = requests.get(live_server + "/health", timeout=5)
    assert resp.status_code == 200 and resp.text == "ok"


def test_refine_over_socket(live_server):
    img = np.full((16, 20, 3), 90, dtype=np.uint8)
    resp = requests.post(
        live_server + "/refine",
        json={"image_png_b64": png_b64(img), "box": [2, 3, 10, 12], "points": []},
        timeout=10,
    )
    assert resp.status_code == 200
    raw = base64.b64decode(resp.json()["mask_png_b64"])
    with Image.open(io.BytesIO(raw)) as im:
        mask = np.asarray(im.convert("L")) >= 128
    assert mask.shape == (16, 20)
    assert mask[3:13, 2:11].all() and mask.sum() == 10 * 9


def test_concurrent_requests_identical(live_server):
    img = np.full((12, 12, 3), 120, dtype=np.uint8)
    body = {"image_png_b64": png_b64(img), "box": [1, 1, 5, 5], "points": []}
    results = []

    def hit():
        results.append(requests.post(live_server + "/refine", json=body, timeout=10).json())

    threads = [threading.Thread(target=hit) for _ in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(r == results[0] for r in results)


def test_primary_remote_refiner_against_live_service(live_server):
    """The localization pipeline's remote refiner speaks this protocol."""
    floc_cgsr = pytest.importorskip("floc.cgsr")
    floc_imgproc = pytest.importorskip("floc.imgproc")

    img = floc_imgproc.Image(np.full((20, 24, 3), 80, dtype=np.uint8))
    coarse = floc_imgproc.BinaryMask(np.zeros((20, 24), dtype=bool))
    prompts = floc_cgsr.PromptSet(box=(4, 5, 15, 14), points=[(6, 7, 1)])
    result = floc_cgsr.refine(img, prompts, coarse, "remote", remote_url=live_server)
    assert result.error is None
    expect = np.zeros((20, 24), dtype=bool)
    expect[5:15, 4:16] = True
    np.testing.assert_array_equal(result.mask.data, expect)
