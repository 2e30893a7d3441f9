"""FastAPI application implementing the refinement wire protocol."""

from __future__ import annotations

import base64
import binascii
import io
from collections import deque
from typing import Literal, Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, PlainTextResponse
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel

STUB_COLOR_TAU = 32.0


class PromptPoint(BaseModel):
    x: int
    y: int
    label: Literal[0, 1]


class RefineRequest(BaseModel):
    image_png_b64: str
    box: Optional[list[int]] = None
    points: list[PromptPoint] = []


class RefineResponse(BaseModel):
    mask_png_b64: str


def _decode_image(b64: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
    except (binascii.Error, ValueError):
        raise HTTPException(status_code=400, detail="image_png_b64 is not valid base64")
    try:
        with Image.open(io.BytesIO(raw)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError):
        raise HTTPException(status_code=400, detail="payload is not a decodable PNG")


def _encode_mask(mask: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _validate_prompts(req: RefineRequest, h: int, w: int) -> None:
    if req.box is not None:
        if len(req.box) != 4:
            raise HTTPException(status_code=400, detail="box must be [x0, y0, x1, y1]")
        x0, y0, x1, y1 = req.box
        if not (0 <= x0 <= x1 < w and 0 <= y0 <= y1 < h):
            raise HTTPException(status_code=422, detail="box outside image bounds")
    for p in req.points:
        if not (0 <= p.x < w and 0 <= p.y < h):
            raise HTTPException(status_code=422, detail=f"point ({p.x}, {p.y}) outside image bounds")


def _flood_color_region(img: np.ndarray, sx: int, sy: int, tau: float) -> np.ndarray:
    """8-connected region of pixels within tau color distance of the seed."""
    h, w = img.shape[:2]
    ref = img[sy, sx].astype(np.float64)
    close = np.sqrt(((img.astype(np.float64) - ref) ** 2).sum(axis=-1)) <= tau
    out = np.zeros((h, w), dtype=bool)
    out[sy, sx] = True
    queue = deque([(sy, sx)])
    while queue:
        y, x = queue.popleft()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and close[ny, nx] and not out[ny, nx]:
                    out[ny, nx] = True
                    queue.append((ny, nx))
    return out


def _stub_mask(img: np.ndarray, req: RefineRequest) -> np.ndarray:
    h, w = img.shape[:2]
    if req.box is not None:
        x0, y0, x1, y1 = req.box
        mask = np.zeros((h, w), dtype=bool)
        mask[y0 : y1 + 1, x0 : x1 + 1] = True
        return mask
    for p in req.points:
        if p.label == 1:
            return _flood_color_region(img, p.x, p.y, STUB_COLOR_TAU)
    return np.zeros((h, w), dtype=bool)


class SamBackend:
    """Real promptable-segmentation backend; loaded once, used read-only."""

    def __init__(self, weights_path: str):
        import torch  # heavyweight imports stay optional
        from segment_anything import SamPredictor, sam_model_registry

        variant = "vit_h" if "vit_h" in weights_path else "vit_l" if "vit_l" in weights_path else "vit_b"
        sam = sam_model_registry[variant](checkpoint=weights_path)
        sam.to("cuda" if torch.cuda.is_available() else "cpu")
        self._predictor = SamPredictor(sam)

    def refine(self, img: np.ndarray, req: RefineRequest) -> np.ndarray:
        self._predictor.set_image(img)
        box = np.asarray(req.box, dtype=np.float32) if req.box is not None else None
        pts = np.asarray([[p.x, p.y] for p in req.points], dtype=np.float32) if req.points else None
        labs = np.asarray([p.label for p in req.points], dtype=np.int64) if req.points else None
        masks, scores, _ = self._predictor.predict(
            point_coords=pts, point_labels=labs, box=box, multimask_output=True
        )
        return masks[int(np.argmax(scores))].astype(bool)


def create_app(stub: bool = False, weights_path: Optional[str] = None) -> FastAPI:
    app = FastAPI(title="sam-service", docs_url=None, redoc_url=None)
    backend: Optional[SamBackend] = None
    if weights_path:
        backend = SamBackend(weights_path)

    @app.exception_handler(RequestValidationError)
    async def malformed_request(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": "malformed request"})

    @app.get("/health")
    def health() -> PlainTextResponse:
        return PlainTextResponse("ok")

    @app.post("/refine", response_model=RefineResponse)
    def refine(req: RefineRequest) -> RefineResponse:
        if backend is None and not stub:
            raise HTTPException(status_code=503, detail="model not loaded and stub mode disabled")
        img = _decode_image(req.image_png_b64)
        h, w = img.shape[:2]
        _validate_prompts(req, h, w)
        mask = backend.refine(img, req) if backend is not None else _stub_mask(img, req)
        if mask.shape != (h, w):
            raise HTTPException(status_code=500, detail="backend produced mismatched mask dims")
        return RefineResponse(mask_png_b64=_encode_mask(mask))

    return app
