"""Class-activation maps from both branches, attention refinement, fusion.

A map is kept in two planes: the raw (un-normalized) scores, which drive
prompt-point selection, and a min-max normalized plane in [0, 1], which
drives mask binarization. A constant raw plane normalizes to all-zero.

Fusion refines the conv-branch map with the layer-averaged attention matrix
(matrix-vector aggregation over patch positions) and unions it with the
transformer-branch map by elementwise max of the normalized planes.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imgproc import Image, bilinear_resize
from .model import DualBranchModel, classify_heads, images_to_input

CAMF_MAGIC = b"CAMF"

CLASS_AUTHENTIC = 0
CLASS_MANIPULATED = 1


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """(raw - min) / (max - min); all-zero when the map is constant."""
    lo = float(raw.min())
    hi = float(raw.max())
    if hi <= lo:
        return np.zeros_like(raw, dtype=np.float32)
    return ((raw - lo) / (hi - lo)).astype(np.float32)


@dataclass
class CamMap:
    """Per-class spatial activation map (raw plane + normalized plane)."""

    class_id: int
    raw: np.ndarray
    normalized: np.ndarray

    @classmethod
    def from_raw(cls, raw: np.ndarray, class_id: int) -> "CamMap":
        raw = np.asarray(raw, dtype=np.float32)
        return cls(class_id=class_id, raw=raw, normalized=normalize_map(raw))

    @property
    def grid(self) -> tuple[int, int]:
        return self.raw.shape


def _as_array(x) -> np.ndarray:
    data = getattr(x, "data", x)
    return np.asarray(data, dtype=np.float32)


def conv_cam(features, head_weights, class_id: int) -> CamMap:
    """Standard CAM: head-weighted sum of the final conv feature maps.

    features: [C,h,w]; head_weights: [2,C].
    """
    feat = _as_array(features)
    w = _as_array(head_weights)
    if feat.ndim != 3 or w.ndim != 2 or w.shape[1] != feat.shape[0]:
        raise ValueError(f"shape mismatch: features {feat.shape} vs head weights {w.shape}")
    raw = np.einsum("c,chw->hw", w[class_id], feat)
    return CamMap.from_raw(raw, class_id)


def trans_cam(patch_tokens, head_weights, class_id: int) -> CamMap:
    """Token-level CAM: each patch token dotted with the class head weights,
    reshaped to the (square) patch grid."""
    tok = _as_array(patch_tokens)
    w = _as_array(head_weights)
    if tok.ndim != 2 or w.shape[1] != tok.shape[1]:
        raise ValueError(f"shape mismatch: tokens {tok.shape} vs head weights {w.shape}")
    p = tok.shape[0]
    g = int(round(math.sqrt(p)))
    if g * g != p:
        raise ValueError(f"{p} patch tokens do not form a square grid")
    raw = (tok @ w[class_id]).reshape(g, g)
    return CamMap.from_raw(raw, class_id)


def attention_average(qs, ks, dim: int, heads: int) -> np.ndarray:
    """Mean over layers and heads of softmax(Q K^T / sqrt(D/S)), restricted
    to patch tokens (class-token row/column dropped after averaging) and
    row-renormalized to sum 1."""
    if len(qs) != len(ks):
        raise ValueError(f"mismatched layer counts: {len(qs)} Q vs {len(ks)} K")
    if not qs:
        raise ValueError("need at least one layer")
    hd = dim // heads
    acc = None
    for q, k in zip(qs, ks):
        qa = _as_array(q).astype(np.float64)
        ka = _as_array(k).astype(np.float64)
        t = qa.shape[0]
        qh = qa.reshape(t, heads, hd).transpose(1, 0, 2)
        kh = ka.reshape(t, heads, hd).transpose(1, 0, 2)
        scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(hd)
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=-1, keepdims=True)
        layer_mean = attn.mean(axis=0)
        acc = layer_mean if acc is None else acc + layer_mean
    avg = acc / len(qs)
    patch = avg[1:, 1:]
    patch = patch / patch.sum(axis=-1, keepdims=True)
    return patch.astype(np.float32)


def _to_grid(raw: np.ndarray, g: int) -> np.ndarray:
    """Bring a conv-resolution map onto the g x g patch grid."""
    h, w = raw.shape
    if (h, w) == (g, g):
        return raw
    if h % g == 0 and w % g == 0 and h // g == w // g:
        f = h // g
        return raw.reshape(g, f, g, f).mean(axis=(1, 3))
    return bilinear_resize(raw, g, g)


def fuse_cam(cam_trans: CamMap, cam_conv: CamMap, attn: np.ndarray) -> CamMap:
    """Attention-refined conv map unioned (elementwise max of normalized
    planes) with the transformer map. The raw plane of the result is the
    refined conv map, serving the un-normalized prompt-point rule."""
    p = attn.shape[0]
    g = int(round(math.sqrt(p)))
    if g * g != p or attn.shape != (p, p):
        raise ValueError(f"attention matrix {attn.shape} is not a square-grid operator")
    if cam_trans.raw.shape != (g, g):
        raise ValueError(f"trans CAM grid {cam_trans.raw.shape} incompatible with {g}x{g}")
    conv_grid = _to_grid(cam_conv.raw, g)
    refined_raw = (attn.astype(np.float64) @ conv_grid.reshape(-1).astype(np.float64)).reshape(g, g)
    refined_raw = refined_raw.astype(np.float32)
    fused_norm = np.maximum(cam_trans.normalized, normalize_map(refined_raw))
    return CamMap(class_id=cam_conv.class_id, raw=refined_raw, normalized=fused_norm)


def single_scale_cam(
    model: DualBranchModel, image: Image, scale: int, class_id: int = CLASS_MANIPULATED
) -> tuple[CamMap, float]:
    """Forward one image at one scale; return the fused CAM and the image
    score for that scale."""
    resized = bilinear_resize(image, scale, scale)
    x = images_to_input([resized])
    out = model.forward(x)
    feats = out.conv_feats[-1].data[0]
    c_cam = conv_cam(feats, model.conv_head_w, class_id)
    patch_tokens = out.tokens_final.data[0, 1:, :]
    t_cam = trans_cam(patch_tokens, model.trans_head_w, class_id)
    attn = attention_average(
        [q.data[0] for q in out.qs], [k.data[0] for k in out.ks], model.cfg.dim, model.cfg.heads
    )
    fused = fuse_cam(t_cam, c_cam, attn)
    _, _, scores = classify_heads(out)
    return fused, float(scores[0])


def multi_scale_analysis(
    model: DualBranchModel,
    image: Image,
    scales,
    class_id: int = CLASS_MANIPULATED,
) -> tuple[CamMap, float]:
    """Fused CAMs over all scales, resized to the source resolution and
    averaged in the raw plane (normalized plane recomputed from the average).
    The image score is the mean over scales."""
    scales = list(scales)
    if not scales:
        raise ValueError("scale list must be nonempty")
    raws, scores = [], []
    for s in scales:
        fused, score = single_scale_cam(model, image, s, class_id)
        raws.append(bilinear_resize(fused.raw, image.width, image.height))
        scores.append(score)
    raw = np.mean(np.stack(raws), axis=0).astype(np.float32)
    return CamMap.from_raw(raw, class_id), float(np.mean(scores))


def multi_scale_cam(
    model: DualBranchModel, image: Image, scales, class_id: int = CLASS_MANIPULATED
) -> CamMap:
    cam, _ = multi_scale_analysis(model, image, scales, class_id)
    return cam


# ---------------------------------------------------------------------------
# CAMF dump format
# ---------------------------------------------------------------------------


def write_camf(path, cam: CamMap, scales=()) -> None:
    """Binary raw plane (magic, u32 h, u32 w, h*w little-endian f32) plus a
    JSON sidecar with class, scales and normalization range."""
    path = Path(path)
    h, w = cam.raw.shape
    with open(path, "wb") as fh:
        fh.write(CAMF_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(cam.raw, dtype="<f4").tobytes())
    meta = {
        "class": int(cam.class_id),
        "scales": [int(s) for s in scales],
        "raw_min": float(cam.raw.min()),
        "raw_max": float(cam.raw.max()),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def read_camf(path) -> tuple[CamMap, dict]:
    path = Path(path)
    raw_bytes = path.read_bytes()
    if raw_bytes[:4] != CAMF_MAGIC:
        raise ValueError("not a CAM dump (bad magic)")
    h, w = struct.unpack_from("<II", raw_bytes, 4)
    arr = np.frombuffer(raw_bytes, dtype="<f4", count=h * w, offset=12).reshape(h, w)
    meta = json.loads(path.with_suffix(".json").read_text())
    return CamMap.from_raw(arr.copy(), int(meta["class"])), meta
