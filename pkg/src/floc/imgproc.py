"""Deterministic image-processing kernels.

Edge operators (Sobel/Prewitt magnitude with replicate padding), separable
Gaussian blur, a self-contained JPEG-style degradation codec, bilinear
resizing, and connected-component labeling. Everything here is a pure
function; concurrent calls on distinct inputs are safe.

PNG convention for masks: 0 = authentic, 255 = manipulated; any stored
value >= 128 reads back as manipulated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .tensor import Tensor

SOBEL_GX = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float32)
SOBEL_GY = SOBEL_GX.T.copy()
PREWITT_GX = np.array([[-1, 0, 1], [-1, 0, 1], [-1, 0, 1]], dtype=np.float32)
PREWITT_GY = PREWITT_GX.T.copy()

# IJG standard luminance quantization table, applied to every channel.
JPEG_LUMA_QTABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


@dataclass
class Image:
    """8-bit image, row-major [h, w, c] buffer with 1 or 3 channels."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"image must be [h,w,1] or [h,w,3], got {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError("image buffer must be uint8")
        self.pixels = np.ascontiguousarray(px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class BinaryMask:
    """Boolean mask; True marks manipulated pixels."""

    data: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.data)
        if m.ndim != 2:
            raise ValueError(f"mask must be 2-d, got shape {m.shape}")
        self.data = np.ascontiguousarray(m.astype(bool))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class Component:
    """Connected region: size, inclusive bbox, and (row, col) representative."""

    count: int
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 inclusive
    rep: tuple[int, int]  # (min row, then min col) member pixel


# ---------------------------------------------------------------------------
# edge operators
# ---------------------------------------------------------------------------


def _correlate2d_replicate(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 2-d correlation with replicate (edge) padding."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    xp = np.pad(x, pad, mode="edge")
    out = np.zeros_like(x, dtype=np.float32)
    h, w = x.shape[-2], x.shape[-1]
    for i in range(kh):
        for j in range(kw):
            if kernel[i, j] != 0.0:
                out += kernel[i, j] * xp[..., i : i + h, j : j + w]
    return out


def edge_magnitude(x: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """sqrt(Gx^2 + Gy^2) gradient magnitude, channelwise, replicate-padded."""
    rx = _correlate2d_replicate(x.astype(np.float32), gx)
    ry = _correlate2d_replicate(x.astype(np.float32), gy)
    return np.sqrt(rx * rx + ry * ry)


def _edge_filter(x: Tensor, gx: np.ndarray, gy: np.ndarray, name: str) -> Tensor:
    if x.data.ndim != 4:
        raise ValueError(f"{name} expects [N,C,H,W]")
    if x.shape[2] < 3 or x.shape[3] < 3:
        raise ValueError(f"{name} needs spatial dims >= 3")
    return Tensor(edge_magnitude(x.data, gx, gy))


def sobel_filter(x: Tensor) -> Tensor:
    """Sobel gradient magnitude of each channel. Fixed, non-learnable; the
    result carries no autodiff graph."""
    return _edge_filter(x, SOBEL_GX, SOBEL_GY, "sobel_filter")


def prewitt_filter(x: Tensor) -> Tensor:
    """Prewitt gradient magnitude; same contract as sobel_filter with
    uniform-weight kernels."""
    return _edge_filter(x, PREWITT_GX, PREWITT_GY, "prewitt_filter")


# ---------------------------------------------------------------------------
# blur / jpeg-like degradation
# ---------------------------------------------------------------------------


def gaussian_kernel_1d(kernel_size: int) -> np.ndarray:
    """Normalized 1-d Gaussian; sigma follows 0.3*((k-1)*0.5 - 1) + 0.8."""
    sigma = 0.3 * ((kernel_size - 1) * 0.5 - 1.0) + 0.8
    half = kernel_size // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: Image, kernel_size: int) -> Image:
    """Separable Gaussian blur with replicate borders; kernel_size 0 is the
    identity. Even nonzero kernel sizes are rejected."""
    if kernel_size == 0:
        return Image(img.pixels.copy())
    if kernel_size < 0 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be 0 or odd positive, got {kernel_size}")
    k = gaussian_kernel_1d(kernel_size)
    out = img.pixels.astype(np.float64)
    out = ndimage.convolve1d(out, k, axis=0, mode="nearest")
    out = ndimage.convolve1d(out, k, axis=1, mode="nearest")
    return Image(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def _dct_matrix(n: int = 8) -> np.ndarray:
    # Orthonormal DCT-II basis.
    m = np.zeros((n, n), dtype=np.float64)
    for k in range(n):
        for i in range(n):
            m[k, i] = math.cos(math.pi * (2 * i + 1) * k / (2 * n))
    m *= math.sqrt(2.0 / n)
    m[0, :] *= 1.0 / math.sqrt(2.0)
    return m


_DCT8 = _dct_matrix(8)


def scaled_quant_table(quality: int) -> np.ndarray:
    """IJG quality scaling of the luminance table; entries clamped to [1,255]."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be in 1..100, got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    t = np.floor((JPEG_LUMA_QTABLE * scale + 50.0) / 100.0)
    return np.clip(t, 1.0, 255.0)


def jpeg_like_compress(img: Image, quality: int) -> Image:
    """8x8 block DCT, quality-scaled quantization, inverse DCT, clamp.

    No chroma subsampling or entropy coding; each channel is treated as
    luminance. Quality 100 is near-lossless (all-ones table).
    """
    qt = scaled_quant_table(quality)
    h, w, c = img.pixels.shape
    ph = (8 - h % 8) % 8
    pw = (8 - w % 8) % 8
    x = np.pad(img.pixels.astype(np.float64), ((0, ph), (0, pw), (0, 0)), mode="edge")
    x -= 128.0
    hb, wb = x.shape[0] // 8, x.shape[1] // 8
    # [hb, wb, c, 8, 8] blocks
    blocks = x.reshape(hb, 8, wb, 8, c).transpose(0, 2, 4, 1, 3)
    coef = np.einsum("ij,bwcjk,lk->bwcil", _DCT8, blocks, _DCT8)
    coef = np.rint(coef / qt) * qt
    rec = np.einsum("ji,bwcjk,kl->bwcil", _DCT8, coef, _DCT8)
    out = rec.transpose(0, 3, 1, 4, 2).reshape(hb * 8, wb * 8, c) + 128.0
    out = out[:h, :w, :]
    return Image(np.clip(np.rint(out), 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# resize
# ---------------------------------------------------------------------------


def _bilinear(arr: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Standard align-corners-false bilinear sampling (2-d or [h,w,c])."""
    h, w = arr.shape[0], arr.shape[1]
    if new_h == h and new_w == w:
        return arr.astype(np.float64, copy=True)
    ys = (np.arange(new_h, dtype=np.float64) + 0.5) * (h / new_h) - 0.5
    xs = (np.arange(new_w, dtype=np.float64) + 0.5) * (w / new_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)
    fx = np.clip(xs - x0, 0.0, 1.0)
    a = arr.astype(np.float64)
    if arr.ndim == 3:
        fxb, fyb = fx[None, :, None], fy[:, None, None]
    else:
        fxb, fyb = fx[None, :], fy[:, None]
    top = a[y0][:, x0] * (1 - fxb) + a[y0][:, x1] * fxb
    bot = a[y1][:, x0] * (1 - fxb) + a[y1][:, x1] * fxb
    return top * (1 - fyb) + bot * fyb


def bilinear_resize(src: Union[Image, np.ndarray], new_w: int, new_h: int):
    """Resize an Image (u8) or a 2-d float map. Same-size resize is identity."""
    if new_w < 1 or new_h < 1:
        raise ValueError("target dims must be >= 1")
    if isinstance(src, Image):
        out = _bilinear(src.pixels, new_h, new_w)
        return Image(np.clip(np.rint(out), 0, 255).astype(np.uint8))
    arr = np.asarray(src)
    return _bilinear(arr, new_h, new_w).astype(arr.dtype, copy=False)


# ---------------------------------------------------------------------------
# connected components
# ---------------------------------------------------------------------------


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def connected_components(mask: BinaryMask, connectivity: int = 8) -> list[Component]:
    """Label True pixels into disjoint components (two-pass union-find).

    Result is ordered by (pixel count desc, representative pixel asc); the
    representative is the (min row, min col) member.
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    m = mask.data
    h, w = m.shape
    labels = np.full((h, w), -1, dtype=np.int64)
    uf = _UnionFind(int(m.sum()) + 1)
    next_label = 0
    if connectivity == 4:
        offsets = [(-1, 0), (0, -1)]
    else:
        offsets = [(-1, -1), (-1, 0), (-1, 1), (0, -1)]
    for y in range(h):
        for x in range(w):
            if not m[y, x]:
                continue
            neigh = []
            for dy, dx in offsets:
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and labels[ny, nx] >= 0:
                    neigh.append(labels[ny, nx])
            if not neigh:
                labels[y, x] = next_label
                next_label += 1
            else:
                lab = min(neigh)
                labels[y, x] = lab
                for other in neigh:
                    uf.union(lab, other)

    stats: dict[int, list] = {}  # root -> [count, y0, x0, y1, x1, rep]
    for y in range(h):
        for x in range(w):
            if labels[y, x] < 0:
                continue
            root = uf.find(labels[y, x])
            s = stats.get(root)
            if s is None:
                stats[root] = [1, y, x, y, x, (y, x)]
            else:
                s[0] += 1
                s[1] = min(s[1], y)
                s[2] = min(s[2], x)
                s[3] = max(s[3], y)
                s[4] = max(s[4], x)

    comps = [
        Component(count=s[0], bbox=(s[2], s[1], s[4], s[3]), rep=s[5]) for s in stats.values()
    ]
    comps.sort(key=lambda c: (-c.count, c.rep))
    return comps


def largest_component_bbox(mask: BinaryMask, connectivity: int = 8) -> Optional[tuple[int, int, int, int]]:
    """Bounding box of the biggest component; ties go to the component whose
    representative pixel comes first in (row, col) order. None when empty."""
    comps = connected_components(mask, connectivity)
    return comps[0].bbox if comps else None


# ---------------------------------------------------------------------------
# PNG i/o
# ---------------------------------------------------------------------------


def read_png(path) -> Image:
    with PILImage.open(path) as im:
        if im.mode in ("L", "I;16"):
            arr = np.asarray(im.convert("L"), dtype=np.uint8)[:, :, None]
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return Image(arr)


def write_png(path, img: Image) -> None:
    arr = img.pixels[:, :, 0] if img.channels == 1 else img.pixels
    PILImage.fromarray(arr).save(path, format="PNG")


def read_mask_png(path) -> BinaryMask:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return BinaryMask(arr >= 128)


def write_mask_png(path, mask: BinaryMask) -> None:
    arr = np.where(mask.data, 255, 0).astype(np.uint8)
    PILImage.fromarray(arr).save(path, format="PNG")
